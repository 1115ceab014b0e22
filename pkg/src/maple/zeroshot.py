"""Zero-shot state assignment by nearest codebook sentence, and metrics.

Nothing here is trained: a finding's state is the label of the codebook
sentence embedding most similar to the pooled image embedding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ABSENT, FINDINGS, PRESENT, STATES, ContractError, load_tensor, save_tensor

UNSCORED = "unscored"
COLLAPSE_SHARE = 0.95


@dataclass(frozen=True)
class Codebook:
    """Per finding: stacked (n, m) vectors and their state labels."""

    vectors: dict
    labels: dict

    def __post_init__(self):
        dims = set()
        for f, v in self.vectors.items():
            v = np.asarray(v, dtype=np.float64)
            lab = tuple(self.labels[f])
            if v.ndim != 2 or len(lab) != len(v):
                raise ContractError(f"{f}: vectors and labels disagree")
            for c in STATES:
                if c not in lab:
                    raise ContractError(f"{f}: codebook has no {c} vectors")
            if np.any(np.linalg.norm(v, axis=1) == 0):
                raise ContractError(f"{f}: zero vector in codebook")
            dims.add(v.shape[1])
        if len(dims) > 1:
            raise ContractError("codebook vectors differ in dimension")

    def __len__(self):
        return sum(len(v) for v in self.vectors.values())


def build_codebook(pools, k=40, seed=0, method="sample"):
    """K vectors per (finding, state) from ``pools[(finding, state)]`` (n, m) arrays.

    ``method="sample"`` draws uniformly without replacement; ``"kmeans"``
    uses K cluster centres instead (same seed).
    """
    if k < 1:
        raise ContractError("K must be >= 1")
    short = [f"{f}/{c} ({len(v)})" for (f, c), v in sorted(pools.items()) if len(v) < k]
    missing = [f"{f}/{c} (0)" for f in {f for f, _ in pools} for c in STATES if (f, c) not in pools]
    if short or missing:
        raise ContractError(f"fewer than K={k} sentences for: {', '.join(sorted(short + missing))}")
    vectors, labels = {}, {}
    for f in FINDINGS:
        if (f, PRESENT) not in pools:
            continue
        vs, ls = [], []
        for c in STATES:
            # separate stream per cell, so adding a finding does not reshuffle the rest
            rng = np.random.default_rng([seed, FINDINGS.index(f), STATES.index(c)])
            pool = np.asarray(pools[(f, c)], dtype=np.float64)
            if method == "sample":
                chosen = pool[np.sort(rng.choice(len(pool), size=k, replace=False))]
            elif method == "kmeans":
                chosen = _kmeans(pool, k, rng)
            else:
                raise ContractError(f"unknown codebook method {method!r}")
            vs.append(chosen)
            ls += [c] * k
        vectors[f] = np.concatenate(vs)
        labels[f] = tuple(ls)
    return Codebook(vectors, labels)


def _kmeans(x, k, rng, iters=50):
    centres = x[rng.choice(len(x), size=k, replace=False)].copy()
    for _ in range(iters):
        assign = ((x[:, None] - centres[None]) ** 2).sum(-1).argmin(1)
        new = np.array([x[assign == j].mean(0) if np.any(assign == j) else centres[j] for j in range(k)])
        if np.allclose(new, centres):
            break
        centres = new
    return centres


def nearest(query, vectors, labels):
    """(state, best cosine) of the most similar codebook vector.

    When the best similarity is shared by vectors of both states the
    answer is absent.
    """
    q = np.asarray(query, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[1:] != q.shape:
        raise ContractError(f"query dim {q.shape} does not match codebook {v.shape[1:]}")
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ContractError("cannot classify a zero embedding")
    sims = v @ q / (np.linalg.norm(v, axis=1) * nq)
    best = sims.max()
    winners = {labels[i] for i in np.flatnonzero(sims == best)}
    state = ABSENT if ABSENT in winners else PRESENT
    return state, float(best)


def classify(embeddings, codebook):
    """Per finding: (state, best similarity), or (UNSCORED, nan) when missing."""
    out = {}
    for f in codebook.vectors:
        if f not in embeddings or embeddings[f] is None:
            out[f] = (UNSCORED, float("nan"))
        else:
            out[f] = nearest(embeddings[f], codebook.vectors[f], codebook.labels[f])
    return out


@dataclass(frozen=True)
class MetricsRow:
    task: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    ppv: float
    npv: float
    auc_linear: float
    collapsed: bool = False
    n_unscored: int = 0


def _ratio(a, b):
    return a / b if b else 0.0


def auc_linear(sensitivity, specificity):
    """Area under the ROC polyline through one operating point."""
    return (sensitivity + specificity) / 2.0


def confusion_metrics(task, tp, fp, tn, fn, collapsed=False, n_unscored=0):
    n = tp + fp + tn + fn
    if n == 0:
        raise ContractError(f"{task}: empty test set")
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    ppv = _ratio(tp, tp + fp)
    npv = _ratio(tn, tn + fn)
    f1 = _ratio(2 * ppv * sens, ppv + sens)
    return MetricsRow(
        task, tp, fp, tn, fn, (tp + tn) / n, f1, sens, spec, ppv, npv, auc_linear(sens, spec),
        bool(collapsed), n_unscored,
    )


def detect_collapse(predictions, share=COLLAPSE_SHARE):
    """True when one class makes up at least ``share`` of the predictions."""
    preds = [p for p in predictions if p != UNSCORED]
    if not preds:
        return True
    top = max(preds.count(PRESENT), preds.count(ABSENT))
    return top / len(preds) >= share


def compute_metrics(predictions, ground_truth):
    """``predictions[task]`` and ``ground_truth[task]`` are aligned state lists.

    Unscored predictions count as errors against the truth and are reported.
    """
    rows = []
    for task in predictions:
        pred, truth = list(predictions[task]), list(ground_truth[task])
        if len(pred) != len(truth):
            raise ContractError(f"{task}: {len(pred)} predictions for {len(truth)} labels")
        if not pred:
            raise ContractError(f"{task}: empty test set")
        for s in truth:
            if s not in STATES:
                raise ContractError(f"{task}: label {s!r} is not a state")
        for s in pred:
            if s not in STATES and s != UNSCORED:
                raise ContractError(f"{task}: prediction {s!r} is not a state")
        tp = sum(p == PRESENT and t == PRESENT for p, t in zip(pred, truth))
        tn = sum(p == ABSENT and t == ABSENT for p, t in zip(pred, truth))
        # an unscored case is counted as the wrong answer
        fp = sum(t == ABSENT for p, t in zip(pred, truth) if p != ABSENT)
        fn = sum(t == PRESENT for p, t in zip(pred, truth) if p != PRESENT)
        rows.append(confusion_metrics(task, tp, fp, tn, fn, detect_collapse(pred), pred.count(UNSCORED)))
    return rows


def majority_baseline(train_truth, n_test):
    """Predict the most frequent training state for every test case (ties: absent)."""
    out = {}
    for task, labels in train_truth.items():
        state = PRESENT if labels.count(PRESENT) > labels.count(ABSENT) else ABSENT
        out[task] = [state] * n_test
    return out


TABLE_COLUMNS = ("accuracy", "f1", "sensitivity", "specificity", "ppv", "npv", "auc_linear")
_SHORT = ("Acc", "F1", "Sens", "Spec", "PPV", "NPV", "AUC")


def write_metrics_csv(path, rows, method="maple"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "task", *TABLE_COLUMNS, "tp", "fp", "tn", "fn", "collapsed", "unscored"])
        for r in rows:
            w.writerow([method, r.task, *(f"{getattr(r, c):.4f}" for c in TABLE_COLUMNS),
                        r.tp, r.fp, r.tn, r.fn, int(r.collapsed), r.n_unscored])


def format_table(rows_by_method):
    """Aligned text table: one line per (method, task)."""
    head = f"{'method':<10} {'task':<20}" + "".join(f"{c:>8}" for c in _SHORT) + "  collapse"
    lines = [head, "-" * len(head)]
    for method, rows in rows_by_method.items():
        for r in rows:
            vals = "".join(f"{getattr(r, c):>8.4f}" for c in TABLE_COLUMNS)
            lines.append(f"{method:<10} {r.task:<20}{vals}  {'yes' if r.collapsed else 'no'}")
    return "\n".join(lines)


def save_codebook(path, codebook):
    """Vectors as one tensor file; labels and row ranges in a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    order = list(codebook.vectors)
    save_tensor(path, np.concatenate([codebook.vectors[f] for f in order]).astype(np.float32))
    meta, start = [], 0
    for f in order:
        n = len(codebook.vectors[f])
        meta.append({"finding": f, "start": start, "stop": start + n, "labels": list(codebook.labels[f])})
        start += n
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_codebook(path):
    path = Path(path)
    data = load_tensor(path).astype(np.float64)
    meta = json.loads(path.with_suffix(".json").read_text())
    return Codebook(
        {e["finding"]: data[e["start"]:e["stop"]] for e in meta},
        {e["finding"]: tuple(e["labels"]) for e in meta},
    )


def row_dict(row):
    return asdict(row)
