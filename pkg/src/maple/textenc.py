"""Per-finding sentence encoders with linear state heads."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import ABSENT, FINDINGS, PRESENT, STATES, ContractError, EmbeddingVec, FindingLabel, Sentence
from .lexicon import tokenize

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"


class LabelWarning(UserWarning):
    """A sentence mentions more than one finding."""


def label_sentence(sentence, lexicon, warn_log=None):
    """Keyword label of one sentence, or None when no finding is mentioned.

    A negation cue anywhere in the sentence makes the state absent. For
    findings with state cues, an un-negated sentence is present only if a
    cue occurs. Sentences naming several findings take the first finding in
    the configured order; a warning is emitted and appended to ``warn_log``.
    """
    kw = getattr(lexicon, "keywords", lexicon)
    text = sentence.text if isinstance(sentence, Sentence) else str(sentence)
    tokens = tokenize(text)
    hits = kw.keyword_hits(tokens)
    if not hits:
        return None
    finding = hits[0]
    if len(hits) > 1:
        msg = f"sentence mentions {hits}; labelled as {finding}: {text!r}"
        warnings.warn(msg, LabelWarning, stacklevel=2)
        if warn_log is not None:
            warn_log.append(msg)
    if any(t in kw.negation_cues for t in tokens):
        return FindingLabel(finding, ABSENT)
    cues = kw.state_cues.get(finding)
    if cues and not any(t.startswith(c) for t in tokens for c in cues):
        return FindingLabel(finding, ABSENT)
    return FindingLabel(finding, PRESENT)


def build_text_corpus(sentences, lexicon, warn_log=None):
    """Group labelled sentences by finding: ``{finding: [(Sentence, state), ...]}``."""
    out = {f: [] for f in FINDINGS}
    for s in sentences:
        lab = label_sentence(s, lexicon, warn_log)
        if lab is not None:
            out[lab.finding].append((s, lab.state))
    return out


class Vocab:
    def __init__(self, words):
        self.itos = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts):
        return cls(w for t in texts for w in tokenize(t))

    def __len__(self):
        return len(self.itos)

    def encode(self, text):
        return [self.stoi.get(t, 1) for t in tokenize(text)]


class SentenceEncoder(nn.Module):
    """Sentence encoder: token embeddings, a small transformer, pooling, linear map to m."""

    def __init__(self, vocab, m=768, d_model=64, n_heads=4, n_layers=2, max_len=48, pooling="mean", dropout=0.1):
        super().__init__()
        if pooling not in ("mean", "cls"):
            raise ContractError(f"pooling must be 'mean' or 'cls', got {pooling!r}")
        self.vocab = vocab
        self.m = m
        self.max_len = max_len
        self.pooling = pooling
        self.hparams = dict(
            m=m, d_model=d_model, n_heads=n_heads, n_layers=n_layers, max_len=max_len,
            pooling=pooling, dropout=dropout,
        )
        self.tok = nn.Embedding(len(vocab) + 1, d_model, padding_idx=0)  # last row is the CLS token
        self.pos = nn.Embedding(max_len + 1, d_model)
        layer = nn.TransformerEncoderLayer(d_model, n_heads, 2 * d_model, dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)
        self.proj = nn.Linear(d_model, m)

    def tokenize(self, texts):
        ids = []
        for t in texts:
            seq = self.vocab.encode(t.text if isinstance(t, Sentence) else t)
            if not seq:
                raise ContractError(f"sentence has no tokens: {t!r}")
            seq = seq[: self.max_len]
            if self.pooling == "cls":
                seq = [len(self.vocab)] + seq
            ids.append(seq)
        n = max(len(s) for s in ids)
        return torch.tensor([s + [0] * (n - len(s)) for s in ids])

    def forward(self, ids):
        pad = ids == 0
        pos = torch.arange(ids.shape[1]).unsqueeze(0)
        h = self.encoder(self.tok(ids) + self.pos(pos), src_key_padding_mask=pad)
        if self.pooling == "cls":
            pooled = h[:, 0]
        else:
            keep = (~pad).unsqueeze(-1).to(h.dtype)
            pooled = (h * keep).sum(1) / keep.sum(1)
        return self.proj(pooled)

    def embed(self, texts):
        return self(self.tokenize(texts))


class StateHead(nn.Linear):
    """State head: one linear layer, m -> 2 logits ordered (present, absent)."""

    def __init__(self, m, init_std=0.01):
        super().__init__(m, 2)
        nn.init.normal_(self.weight, std=init_std)
        nn.init.zeros_(self.bias)


@torch.no_grad()
def encode_sentences(encoder, texts, batch_size=256):
    """Embed sentences in inference mode; returns an (n, m) float64 array."""
    was = encoder.training
    encoder.eval()
    out = [encoder.embed(texts[i:i + batch_size]).double().numpy() for i in range(0, len(texts), batch_size)]
    encoder.train(was)
    return np.concatenate(out) if out else np.zeros((0, encoder.m))


def encode_sentence(encoder, sentence):
    return EmbeddingVec(encode_sentences(encoder, [sentence])[0], source="sentence")


def state_from_logits(logits):
    """(state, confidence) from two logits; exact ties go to absent."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.shape != (2,):
        raise ContractError(f"expected 2 logits, got shape {z.shape}")
    p = np.exp(z - z.max())
    p /= p.sum()
    k = 0 if z[0] > z[1] else 1
    return STATES[k], float(p[k])


@torch.no_grad()
def classify_state(head, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (head.in_features,):
        raise ContractError(f"head expects dimension {head.in_features}, got {y.shape}")
    logits = head(torch.from_numpy(y).to(head.weight.dtype))
    return state_from_logits(logits.double().numpy())


@dataclass
class TextConfig:
    epochs: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    m: int = 768
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    pooling: str = "mean"
    dropout: float = 0.1


@dataclass
class TextTrainResult:
    encoder: SentenceEncoder
    head: StateHead
    history: list  # (epoch, mean loss, accuracy)


def _targets(states):
    bad = [s for s in states if s not in STATES]
    if bad:
        raise ContractError(f"unknown states {sorted(set(bad))}")
    return torch.tensor([STATES.index(s) for s in states])


def init_text_model(vocab, cfg):
    torch.manual_seed(cfg.seed)
    enc = SentenceEncoder(vocab, cfg.m, cfg.d_model, cfg.n_heads, cfg.n_layers, pooling=cfg.pooling, dropout=cfg.dropout)
    return enc, StateHead(cfg.m)


def finetune_text_encoder(corpus, config=None, vocab=None, progress=None):
    """Fit head(encoder(sentence)) to the sentence states with cross-entropy and Adam.

    ``corpus`` is a list of ``(sentence, state)``. Both states must occur.
    """
    cfg = config or TextConfig()
    texts = [s.text if isinstance(s, Sentence) else s for s, _ in corpus]
    states = [c for _, c in corpus]
    if len(set(states)) < 2:
        raise ContractError("text corpus must contain both states")
    y = _targets(states)
    vocab = vocab or Vocab.from_texts(texts)
    encoder, head = init_text_model(vocab, cfg)
    ids = encoder.tokenize(texts)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    n = len(texts)
    for epoch in range(cfg.epochs):
        encoder.train()
        order = torch.randperm(n, generator=gen)
        total, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            logits = head(encoder(ids[b]))
            loss = nn.functional.cross_entropy(logits, y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            correct += int((logits.argmax(1) == y[b]).sum())
        history.append((epoch, total / n, correct / n))
        if progress:
            progress(*history[-1])
    encoder.eval()
    head.eval()
    return TextTrainResult(encoder, head, history)


@torch.no_grad()
def state_accuracy(encoder, head, corpus):
    encoder.eval()
    texts = [s.text if isinstance(s, Sentence) else s for s, _ in corpus]
    pred = head(encoder.embed(texts)).argmax(1)
    return float((pred == _targets([c for _, c in corpus])).double().mean())


def _mean_pairwise(a, b=None):
    if b is None:
        pairs = list(itertools.combinations(range(len(a)), 2))
        return float(np.mean([a[i] @ a[j] for i, j in pairs]))
    return float((a @ b.T).mean())


def similarity_profile(embed, corpus):
    """Mean cosine similarities per finding: within each state and across states.

    ``embed`` maps a finding to a callable returning embeddings for a list of
    texts (or is a dict of encoders). ``corpus`` maps finding to
    ``[(sentence, state), ...]``. Findings with fewer than two sentences per
    state are skipped with a warning.
    """
    out = {}
    for f, items in corpus.items():
        groups = {c: [s.text if isinstance(s, Sentence) else s for s, st in items if st == c] for c in STATES}
        if min(len(g) for g in groups.values()) < 2:
            warnings.warn(f"{f}: need two sentences per state for a similarity profile", stacklevel=2)
            continue
        fn = embed[f] if isinstance(embed, dict) else embed
        if isinstance(fn, SentenceEncoder):
            fn = _bind(fn)
        vecs = {}
        for c, texts in groups.items():
            v = np.asarray(fn(texts), dtype=np.float64)
            norms = np.linalg.norm(v, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ContractError("zero embedding in similarity profile")
            vecs[c] = v / norms
        out[f] = {
            "within_present": _mean_pairwise(vecs[PRESENT]),
            "within_absent": _mean_pairwise(vecs[ABSENT]),
            "cross": _mean_pairwise(vecs[PRESENT], vecs[ABSENT]),
        }
    return out


def _bind(encoder):
    return lambda texts: encode_sentences(encoder, texts)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "accuracy"])
        w.writerows(history)


def save_text_model(path, encoder, head):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"vocab": encoder.vocab.itos, "hparams": encoder.hparams, "encoder": encoder.state_dict(), "head": head.state_dict()},
        path,
    )


def load_text_model(path):
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    vocab = Vocab(blob["vocab"])
    enc = SentenceEncoder(vocab, **blob["hparams"])
    enc.load_state_dict(blob["encoder"])
    head = StateHead(enc.m)
    head.load_state_dict(blob["head"])
    enc.eval()
    head.eval()
    return enc, head


def chance_loss():
    return math.log(2.0)


__all__ = [
    "LabelWarning", "SentenceEncoder", "StateHead", "TextConfig", "TextTrainResult", "Vocab",
    "build_text_corpus", "chance_loss", "classify_state", "encode_sentence", "encode_sentences",
    "finetune_text_encoder", "init_text_model", "label_sentence", "load_text_model",
    "save_text_model", "similarity_profile", "state_accuracy", "state_from_logits", "write_history",
]
