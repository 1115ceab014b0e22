"""Multi-instance alignment of pooled patch embeddings with sentence embeddings.

For each finding a small transformer pools the patch embeddings of the routed
region into one anchor. Anchors are pulled toward sentences of the same
finding state and pushed away from sentences of the other state with a
triplet loss, where positives and negatives are drawn by similarity.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import ABSENT, FINDINGS, PRESENT, ROUTING, STATES, ContractError, EmbeddingVec

log = logging.getLogger(__name__)


class QueryBlock(nn.Module):
    """Pre-norm cross-attention from the query token to the patch tokens."""

    def __init__(self, m, n_heads, dropout):
        super().__init__()
        self.norm_q = nn.LayerNorm(m)
        self.norm_kv = nn.LayerNorm(m)
        self.attn = nn.MultiheadAttention(m, n_heads, dropout=dropout, batch_first=True)
        self.norm_ff = nn.LayerNorm(m)
        self.ff = nn.Sequential(nn.Linear(m, 2 * m), nn.GELU(), nn.Dropout(dropout), nn.Linear(2 * m, m))
        self.drop = nn.Dropout(dropout)

    def forward(self, q, x, pad=None):
        kv = self.norm_kv(x)
        h, w = self.attn(self.norm_q(q), kv, kv, key_padding_mask=pad, need_weights=True, average_attn_weights=True)
        q = q + self.drop(h)
        q = q + self.drop(self.ff(self.norm_ff(q)))
        return q, w[:, 0]


class PoolingNetwork(nn.Module):
    """Per-finding pooling: a learned query token attends over a set of patch embeddings.

    The patch tokens carry no positional encoding and are never mixed with
    each other, so the output is invariant to their order and to repeating
    the whole set. Inputs are first standardised per dimension with fixed
    statistics (identity until :meth:`set_input_stats` is called).
    """

    def __init__(self, finding, m=768, n_layers=6, n_heads=12, dropout=0.1):
        super().__init__()
        if finding not in FINDINGS:
            raise ContractError(f"unknown finding {finding!r}")
        if m % n_heads:
            raise ContractError(f"m={m} is not divisible by n_heads={n_heads}")
        self.finding = finding
        self.region = ROUTING[finding]
        self.m = m
        self.hparams = dict(finding=finding, m=m, n_layers=n_layers, n_heads=n_heads, dropout=dropout)
        self.query = nn.Parameter(torch.randn(1, 1, m) * 0.02)
        self.blocks = nn.ModuleList([QueryBlock(m, n_heads, dropout) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(m)
        self.out = nn.Linear(m, m)
        self.register_buffer("in_mean", torch.zeros(m))
        self.register_buffer("in_scale", torch.ones(m))

    @torch.no_grad()
    def set_input_stats(self, mean, std, eps=1e-6):
        mean = torch.as_tensor(np.asarray(mean, dtype=np.float64)).to(self.in_mean.dtype)
        std = torch.as_tensor(np.asarray(std, dtype=np.float64)).to(self.in_scale.dtype)
        if mean.shape != (self.m,) or std.shape != (self.m,):
            raise ContractError(f"input statistics must have shape ({self.m},)")
        self.in_mean.copy_(mean)
        self.in_scale.copy_(std.clamp_min(eps))

    def forward(self, x, pad=None):
        """``x``: (batch, n, m) patch embeddings; ``pad`` marks padding slots.

        Returns pooled (batch, m) and attention weights (batch, n) averaged
        over heads and layers.
        """
        if x.dim() == 2:
            x = x.unsqueeze(0)
        x = (x - self.in_mean) / self.in_scale
        q = self.query.expand(x.shape[0], 1, self.m)
        weights = 0.0
        for blk in self.blocks:
            q, w = blk(q, x, pad)
            weights = weights + w
        return self.out(self.norm(q[:, 0])), weights / len(self.blocks)


@torch.no_grad()
def pool_patches(net, xs):
    """Pool one bag of patch embeddings; returns (EmbeddingVec, weights)."""
    if len(xs) == 0:
        raise ContractError("cannot pool an empty patch list")
    x = np.stack([np.asarray(v, dtype=np.float64) for v in xs])
    if x.shape[1] != net.m:
        raise ContractError(f"patch embeddings have dim {x.shape[1]}, network expects {net.m}")
    was = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    pooled, w = net(torch.from_numpy(x).to(dtype))
    net.train(was)
    return EmbeddingVec(pooled[0].double().numpy(), source="pooled_image"), w[0].double().numpy()


def _cos_rows(anchor, cands):
    a = np.asarray(anchor, dtype=np.float64)
    c = np.atleast_2d(np.asarray(cands, dtype=np.float64))
    na, nc = np.linalg.norm(a), np.linalg.norm(c, axis=1)
    if na == 0 or np.any(nc == 0):
        raise ContractError("cosine similarity of a zero vector is undefined")
    return c @ a / (nc * na)


def sampling_probs(sims, tau, sign):
    """Softmax of ``sign * sims / tau`` (sign -1 favours dissimilar candidates)."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    z = sign * np.asarray(sims, dtype=np.float64) / tau
    z = np.exp(z - z.max())
    return z / z.sum()


def _draw(anchor, cands, tau, rng, sign):
    if len(cands) == 0:
        raise ContractError("candidate set is empty")
    p = sampling_probs(_cos_rows(anchor, cands), tau, sign)
    return int(rng.choice(len(p), p=p))


def sample_positive(anchor, pos_set, tau, rng):
    """Index of a positive, drawn with probability ∝ exp(-sim / tau)."""
    return _draw(anchor, pos_set, tau, rng, -1.0)


def sample_negative(anchor, neg_set, tau, rng):
    """Index of a negative, drawn with probability ∝ exp(+sim / tau)."""
    return _draw(anchor, neg_set, tau, rng, +1.0)


def _triple(x, yp, yn):
    x, yp, yn = (np.asarray(v, dtype=np.float64) for v in (x, yp, yn))
    if not (x.shape == yp.shape == yn.shape) or x.ndim != 1:
        raise ContractError(f"dimension mismatch: {x.shape}, {yp.shape}, {yn.shape}")
    return x, yp, yn


def triplet_loss(x, yp, yn, margin):
    """max(0, |x - yp|^2 - |x - yn|^2 + margin)."""
    if margin <= 0:
        raise ContractError("margin must be positive")
    x, yp, yn = _triple(x, yp, yn)
    dp, dn = x - yp, x - yn
    return max(0.0, float(dp @ dp - dn @ dn + margin))


def triplet_grad(x, yp, yn, margin):
    """Gradient of :func:`triplet_loss` in ``x``; zero on and below the hinge."""
    x, yp, yn = _triple(x, yp, yn)
    if triplet_loss(x, yp, yn, margin) > 0.0:
        return 2.0 * (yn - yp)
    return np.zeros_like(x)


def triplet_loss_torch(x, yp, yn, margin):
    """Batched triplet loss, one value per row."""
    return torch.relu(((x - yp) ** 2).sum(-1) - ((x - yn) ** 2).sum(-1) + margin)


def anti_collapse_loss(anchors_by_state, lam):
    """lam * mean over cross-state anchor pairs of (1 + cos) / 2.

    Returns 0 when either state has no anchors. Works on tensors (keeps the
    graph) or on arrays.
    """
    if lam < 0:
        raise ContractError("anti-collapse weight must be >= 0")
    a = anchors_by_state.get(PRESENT, [])
    b = anchors_by_state.get(ABSENT, [])
    if len(a) == 0 or len(b) == 0:
        return 0.0
    as_np = not isinstance(a, torch.Tensor) and not isinstance(a[0], torch.Tensor)
    a = torch.as_tensor(np.asarray(a, dtype=np.float64)) if as_np else torch.stack(list(a))
    b = torch.as_tensor(np.asarray(b, dtype=np.float64)) if as_np else torch.stack(list(b))
    cos = nn.functional.normalize(a, dim=-1) @ nn.functional.normalize(b, dim=-1).T
    val = lam * ((1.0 + cos) / 2.0).mean()
    return float(val) if as_np else val


@dataclass
class AlignConfig:
    margin: float = 0.2
    tau: float = 0.1
    lam: float = 0.5
    epochs: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    n_layers: int = 6
    n_heads: int = 12
    dropout: float = 0.1
    triplets_per_sentence: int = 1
    normalize: bool = False
    standardize: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.margin <= 0 or self.lam < 0:
            raise ContractError("need tau > 0, margin > 0 and lam >= 0")
        if self.triplets_per_sentence < 1:
            raise ContractError("triplets_per_sentence must be >= 1")


@dataclass
class AlignItem:
    """One report sentence of a training sample, already labelled."""

    sample: int
    finding: str
    state: str


@dataclass
class AlignResult:
    nets: dict
    log: list = field(default_factory=list)  # rows of LOG_FIELDS


LOG_FIELDS = ("epoch", "triplet_loss", "anti_collapse_loss", "mean_pos_sim", "mean_neg_sim")


def _bag_tensor(bags, dtype):
    n = max(len(b) for b in bags)
    m = bags[0].shape[1]
    x = torch.zeros(len(bags), n, m, dtype=dtype)
    pad = torch.ones(len(bags), n, dtype=torch.bool)
    for i, b in enumerate(bags):
        x[i, : len(b)] = torch.from_numpy(np.asarray(b)).to(dtype)
        pad[i, : len(b)] = False
    return x, pad


def _maybe_norm(t, on):
    return nn.functional.normalize(t, dim=-1) if on else t


def build_nets(m, config):
    torch.manual_seed(config.seed)
    return {f: PoolingNetwork(f, m, config.n_layers, config.n_heads, config.dropout) for f in FINDINGS}


def train_alignment(patch_bags, items, sentence_pools, config=None, nets=None, progress=None):
    """Optimise the pooling networks; everything else stays fixed.

    ``patch_bags[i][region]`` holds the (n, m) patch embeddings of training
    sample ``i``. ``items`` lists the labelled report sentences. The pools
    ``sentence_pools[(finding, state)]`` are (k, m) arrays of sentence
    embeddings, computed once from the frozen text encoders.
    """
    cfg = config or AlignConfig()
    used = {it.finding for it in items}
    for f in used:
        for c in STATES:
            if len(sentence_pools.get((f, c), ())) == 0:
                raise ContractError(f"no {c} sentences for {f}: cannot form triplets")
    m = next(iter(sentence_pools.values())).shape[1]
    if nets is None:
        nets = build_nets(m, cfg)
        if cfg.standardize:
            for f in FINDINGS:
                x = np.concatenate([b[ROUTING[f]] for b in patch_bags if len(b[ROUTING[f]])])
                nets[f].set_input_stats(x.mean(0), x.std(0))
    params = [p for f in FINDINGS for p in nets[f].parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    dtype = params[0].dtype
    pools = {k: torch.from_numpy(np.asarray(v, dtype=np.float64)).to(dtype) for k, v in sentence_pools.items()}
    pools_n = {k: nn.functional.normalize(v.double(), dim=-1).numpy() for k, v in pools.items()}
    work = [it for it in items for _ in range(cfg.triplets_per_sentence)]
    history = []
    for epoch in range(cfg.epochs):
        for f in FINDINGS:
            nets[f].train()
        order = rng.permutation(len(work))
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            batch = [work[i] for i in order[start:start + cfg.batch_size]]
            tl_all = []
            by_finding = {}
            for it in batch:
                by_finding.setdefault(it.finding, []).append(it)
            ac_total = 0.0
            for f, its in by_finding.items():
                region = ROUTING[f]
                x, pad = _bag_tensor([patch_bags[it.sample][region] for it in its], dtype)
                pooled, _ = nets[f](x, pad)
                anchor = _maybe_norm(pooled, cfg.normalize)
                a_np = nn.functional.normalize(anchor.detach().double(), dim=-1).numpy()
                yp, yn, ps, ns = [], [], [], []
                for k, it in enumerate(its):
                    other = ABSENT if it.state == PRESENT else PRESENT
                    sp = pools_n[(f, it.state)] @ a_np[k]
                    sn = pools_n[(f, other)] @ a_np[k]
                    i = int(rng.choice(len(sp), p=sampling_probs(sp, cfg.tau, -1.0)))
                    j = int(rng.choice(len(sn), p=sampling_probs(sn, cfg.tau, +1.0)))
                    yp.append(pools[(f, it.state)][i])
                    yn.append(pools[(f, other)][j])
                    ps.append(sp[i])
                    ns.append(sn[j])
                yp = _maybe_norm(torch.stack(yp), cfg.normalize)
                yn = _maybe_norm(torch.stack(yn), cfg.normalize)
                tl_all.append(triplet_loss_torch(anchor, yp, yn, cfg.margin))
                sums[2] += sum(ps)
                sums[3] += sum(ns)
                groups = {PRESENT: [], ABSENT: []}
                for k, it in enumerate(its):
                    groups[it.state].append(pooled[k])
                ac = anti_collapse_loss(groups, cfg.lam) if cfg.lam > 0 else 0.0
                ac_total = ac_total + ac
            tl = torch.cat(tl_all)
            loss = tl.mean() + ac_total
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums[0] += tl.sum().item()
            sums[1] += float(ac_total.item() if torch.is_tensor(ac_total) else ac_total) * len(batch)
        n = len(work)
        row = (epoch, sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n)
        history.append(row)
        if progress:
            progress(*row)
    for f in FINDINGS:
        nets[f].eval()
    return AlignResult(nets, history)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        w.writerows(rows)


def save_pooling(path, net):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"hparams": net.hparams, "state": net.state_dict()}, path)


def load_pooling(path):
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    net = PoolingNetwork(**blob["hparams"])
    net.load_state_dict(blob["state"])
    return net.eval()


def config_dict(cfg):
    return {**asdict(cfg), "routing": dict(ROUTING)}
