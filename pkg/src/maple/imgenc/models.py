"""Region-specific 3D patch encoders and their reconstruction pre-training."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..core import ContractError, EmbeddingVec, REGIONS
from .patches import augment_patch

log = logging.getLogger(__name__)


NORMS = ("batch", "group")


def _norm(c, kind="batch"):
    if kind == "batch":
        return nn.BatchNorm3d(c)
    if kind == "group":
        return nn.GroupNorm(math.gcd(4, c), c)
    raise ContractError(f"unknown norm {kind!r}; expected one of {NORMS}")


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, stride=1, norm="batch"):
        super().__init__(
            nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            _norm(c_out, norm),
            nn.ReLU(inplace=True),
        )


class ResidualLayer(nn.Module):
    """Three conv blocks; the first may downsample, the last two are bypassed."""

    def __init__(self, c_in, c_out, stride, n_blocks=3, norm="batch"):
        super().__init__()
        self.entry = ConvBlock(c_in, c_out, stride, norm)
        self.body = nn.Sequential(*[ConvBlock(c_out, c_out, 1, norm) for _ in range(n_blocks - 1)])

    def forward(self, x):
        h = self.entry(x)
        return h + self.body(h)


def _down(n):
    return (n - 1) // 2 + 1


class PatchEncoder(nn.Module):
    """f_a: cube patch of one region -> m-dimensional vector."""

    def __init__(self, region, p_size, m=768, base_channels=8, n_layers=5, n_blocks=3,
                 min_size=2, norm="batch"):
        super().__init__()
        if region not in REGIONS:
            raise ContractError(f"unknown region {region!r}")
        self.region = region
        self.p_size = int(p_size)
        self.m = int(m)
        self.hparams = dict(
            region=region, p_size=self.p_size, m=self.m, base_channels=base_channels,
            n_layers=n_layers, n_blocks=n_blocks, min_size=min_size, norm=norm,
        )
        chans = [base_channels * 2**i for i in range(n_layers)]
        sizes = [self.p_size]
        layers, c_prev = [], 1
        for i, c in enumerate(chans):
            # halve between layers, but never below min_size
            stride = 2 if i > 0 and _down(sizes[-1]) >= min_size else 1
            if i > 0:
                sizes.append(_down(sizes[-1]) if stride == 2 else sizes[-1])
            layers.append(ResidualLayer(c_prev, c, stride, n_blocks, norm))
            c_prev = c
        self.channels = chans
        self.sizes = sizes
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(chans[-1] * sizes[-1] ** 3, self.m)

    def forward(self, x):
        if x.dim() == 4:
            x = x.unsqueeze(1)
        return self.fc(self.layers(x).flatten(1))


class PatchDecoder(nn.Module):
    """Mirror of a :class:`PatchEncoder` built from transposed convolutions."""

    def __init__(self, encoder):
        super().__init__()
        chans, sizes = encoder.channels, encoder.sizes
        norm = encoder.hparams["norm"]
        self.c_last, self.s_last = chans[-1], sizes[-1]
        self.fc = nn.Linear(encoder.m, self.c_last * self.s_last**3)
        ups = []
        for i in range(len(chans) - 1, 0, -1):
            n, n_prev = sizes[i], sizes[i - 1]
            if n == n_prev:
                up = nn.ConvTranspose3d(chans[i], chans[i - 1], 3, stride=1, padding=1)
            else:
                up = nn.ConvTranspose3d(chans[i], chans[i - 1], 3, stride=2, padding=1,
                                        output_padding=n_prev - (2 * n - 1))
            ups += [
                up,
                _norm(chans[i - 1], norm),
                nn.ReLU(inplace=True),
            ]
        self.ups = nn.Sequential(*ups)
        self.out = nn.Conv3d(chans[0], 1, 3, padding=1)

    def forward(self, z):
        h = self.fc(z).view(-1, self.c_last, self.s_last, self.s_last, self.s_last)
        return torch.sigmoid(self.out(self.ups(h))).squeeze(1)


def _check(encoder, patch):
    if patch.region != encoder.region:
        raise ContractError(f"{encoder.region} encoder cannot encode a {patch.region} patch")
    if patch.size != encoder.p_size:
        raise ContractError(f"encoder expects edge {encoder.p_size}, got {patch.size}")


@torch.no_grad()
def encode_patches(encoder, patches, batch_size=256):
    """Encode a list of patches; returns an (n, m) float64 array."""
    for p in patches:
        _check(encoder, p)
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    for i in range(0, len(patches), batch_size):
        x = torch.from_numpy(np.stack([p.data for p in patches[i:i + batch_size]])).to(dtype)
        out.append(encoder(x).double().numpy())
    encoder.train(was_training)
    if not out:
        return np.zeros((0, encoder.m))
    return np.concatenate(out)


def encode_patch(encoder, patch):
    return EmbeddingVec(encode_patches(encoder, [patch])[0], source="patch")


@dataclass
class PretrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    augment: bool = True
    seed: int = 0
    m: int = 768
    base_channels: int = 8
    n_layers: int = 5
    n_blocks: int = 3
    min_size: int = 2
    norm: str = "batch"


@dataclass
class PretrainResult:
    encoder: PatchEncoder
    initial_loss: float
    losses: list  # mean training MSE per epoch


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen).tolist()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def reconstruction_loss(encoder, decoder, patches):
    x = torch.from_numpy(np.stack([p.data for p in patches]))
    return float(nn.functional.mse_loss(decoder(encoder(x)), x))


def freeze(module):
    for prm in module.parameters():
        prm.requires_grad_(False)
    module.eval()
    return module


def pretrain_reconstruction(patches, config=None, region=None, progress=None):
    """Train an encoder/decoder pair on patch reconstruction (MSE).

    The decoder is discarded; the returned encoder is frozen.
    """
    cfg = config or PretrainConfig()
    if not patches:
        raise ContractError("no patches to pre-train on")
    region = region or patches[0].region
    sizes = {p.size for p in patches}
    if len(sizes) != 1 or any(p.region != region for p in patches):
        raise ContractError("pre-training needs patches of a single region and size")
    torch.manual_seed(cfg.seed)
    encoder = PatchEncoder(region, sizes.pop(), cfg.m, cfg.base_channels, cfg.n_layers, cfg.n_blocks,
                           cfg.min_size, cfg.norm)
    decoder = PatchDecoder(encoder)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    encoder.eval(), decoder.eval()
    initial = reconstruction_loss(encoder, decoder, patches)
    losses = []
    for epoch in range(cfg.epochs):
        encoder.train(), decoder.train()
        total = 0.0
        for idx in _batches(len(patches), cfg.batch_size, gen):
            batch = [augment_patch(patches[i], rng) if cfg.augment else patches[i] for i in idx]
            x = torch.from_numpy(np.stack([p.data for p in batch]))
            loss = nn.functional.mse_loss(decoder(encoder(x)), x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(patches))
        if progress:
            progress(epoch, losses[-1])
    log.info("%s encoder: mse %.5f -> %.5f", region, initial, losses[-1] if losses else initial)
    return PretrainResult(freeze(encoder), initial, losses)


def save_encoder(path, encoder):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"hparams": encoder.hparams, "state": encoder.state_dict()}, path)


def load_encoder(path):
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    enc = PatchEncoder(**blob["hparams"])
    enc.load_state_dict(blob["state"])
    return freeze(enc)


def weights_digest(module):
    """Order-stable hash of a module's parameters (detects accidental updates)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


__all__ = [
    "PatchEncoder", "PatchDecoder", "PretrainConfig", "PretrainResult", "encode_patch",
    "encode_patches", "pretrain_reconstruction", "reconstruction_loss", "freeze",
    "save_encoder", "load_encoder", "weights_digest",
]
