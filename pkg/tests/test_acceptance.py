"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

Criteria 7 to 10 share one desk-scale pipeline run (about 13 to 18 minutes on
a CPU). Set MAPLE_ACCEPTANCE_RUN to an existing finished run directory to
reuse it instead of starting a new one; ``-m "not slow"`` skips them.
"""

import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from maple.align import PoolingNetwork, pool_patches, sample_negative, sample_positive, sampling_probs
from maple.align import triplet_grad, triplet_loss
from maple.config import RunConfig
from maple.core import ABSENT, FINDINGS, PRESENT
from maple.imgenc import extract_skeleton, load_encoder, weights_digest
from maple.lexicon import load_lexicon
from maple.phantom import PhantomSpec, derive_seed, draw_states, generate_report, generate_volume, phantom_geometry
from maple.pipeline import Run
from maple.textenc import build_text_corpus, finetune_text_encoder, init_text_model, load_text_model
from maple.textenc import similarity_profile
from maple.zeroshot import auc_linear
from oracles import curve_hausdorff, total_variation

DATA = Path(__file__).parent / "data"
DESK = Path(__file__).parents[1] / "src" / "maple" / "configs" / "desk.yaml"
RESULTS = {}


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# --- 1: reported AUC arithmetic -------------------------------------------------

def test_criterion_01_reported_auc():
    t0 = time.perf_counter()
    with open(DATA / "reported_results.csv") as fh:
        rows = list(csv.DictReader(fh))
    errs = [abs(auc_linear(float(r["sensitivity"]), float(r["specificity"])) - float(r["auc"])) for r in rows]
    dt = time.perf_counter() - t0
    verdict(1, len(rows) == 20 and max(errs) <= 5e-4 and dt < 1.0,
            f"{len(rows)} rows, max |error| {max(errs):.2e}, {dt:.3f}s")


# --- 2: sentence similarity structure --------------------------------------------

def _reports(seeds, lex):
    spec = PhantomSpec()
    sents = [s for seed in seeds for s in generate_report(draw_states(spec, seed), lex, sample_seed=seed)]
    return build_text_corpus(sents, lex)


def test_criterion_02_similarity_profile():
    t0 = time.perf_counter()
    lex = load_lexicon()
    tcfg = RunConfig.load(DESK).text_config()
    train = _reports([derive_seed(101, i) for i in range(200)], lex)
    held = _reports([derive_seed(202, i) for i in range(120)], lex)
    counts = {f: min(sum(c == PRESENT for _, c in held[f]), sum(c == ABSENT for _, c in held[f])) for f in FINDINGS}
    tuned, base = {}, {}
    for f in FINDINGS:
        res = finetune_text_encoder(train[f], tcfg)
        tuned[f] = res.encoder
        base[f], _ = init_text_model(res.encoder.vocab, tcfg)
    after = similarity_profile(tuned, held)
    before = similarity_profile(base, held)
    ok = min(counts.values()) >= 40 and set(after) == set(before) == set(FINDINGS)
    parts = []
    for f in FINDINGS:
        a, b = after[f], before[f]
        within = min(a["within_present"], a["within_absent"])
        gap = max(b["within_present"], b["within_absent"]) - b["cross"]
        ok &= within >= 0.8 and a["cross"] <= -0.3 and gap < 0.3
        parts.append(f"{f}: within {within:.3f} cross {a['cross']:.3f} untrained gap {gap:.3f}")
    dt = time.perf_counter() - t0
    ok &= dt < 300
    verdict(2, ok, f"min sentences per state {min(counts.values())}; " + "; ".join(parts) + f"; {dt:.0f}s")


# --- 3: similarity-weighted sampling ---------------------------------------------

def test_criterion_03_sampling_frequencies():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    anchor = rng.normal(size=16)
    # uniform: candidates at one fixed angle to the anchor
    u = anchor / np.linalg.norm(anchor)
    ortho = np.linalg.qr(np.column_stack([u, rng.normal(size=(16, 5))]))[0][:, 1:].T
    uniform = np.array([0.4 * u + np.sqrt(1 - 0.16) * o for o in ortho])
    two = np.array([u, -u + 0.3 * ortho[0]])
    forty = rng.normal(size=(40, 16))
    worst = 0.0
    for cands in (uniform, two, forty):
        sims = cands @ anchor / (np.linalg.norm(cands, axis=1) * np.linalg.norm(anchor))
        for draw, sign in ((sample_positive, -1.0), (sample_negative, +1.0)):
            n = len(cands)
            counts = np.bincount([draw(anchor, cands, 0.1, rng) for _ in range(10_000)], minlength=n)
            worst = max(worst, total_variation(counts, sampling_probs(sims, 0.1, sign)))
    dt = time.perf_counter() - t0
    verdict(3, worst < 0.02 and dt < 10, f"max total variation {worst:.4f} over 3 sets x 2 samplers, {dt:.1f}s")


# --- 4: triplet gradient ----------------------------------------------------------

def test_criterion_04_triplet_gradient():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    h, margin, worst, n = 1e-6, 0.2, 0.0, 0
    while n < 100:
        x, yp, yn = rng.normal(size=(3, 16))
        if abs(np.sum((x - yp) ** 2) - np.sum((x - yn) ** 2) + margin) < 1e-3:
            continue  # too close to the hinge
        g = triplet_grad(x, yp, yn, margin)
        fd = np.array([(triplet_loss(x + h * e, yp, yn, margin) - triplet_loss(x - h * e, yp, yn, margin)) / (2 * h)
                       for e in np.eye(16)])
        # below the hinge both are exactly zero
        err = np.linalg.norm(fd - g) / np.linalg.norm(g) if g.any() else np.abs(fd).max()
        worst = max(worst, err)
        n += 1
    dt = time.perf_counter() - t0
    verdict(4, worst < 1e-4 and dt < 10, f"100 points, max relative error {worst:.2e}, {dt:.2f}s")


# --- 5: centerline oracle ---------------------------------------------------------

def test_criterion_05_skeleton_oracle():
    t0 = time.perf_counter()
    spec = PhantomSpec()
    dists = []
    for i in range(20):
        seed = derive_seed(0, i)
        _, mask, _, _ = generate_volume(spec, seed)
        sk = extract_skeleton(mask, "arteries")
        dists.append(curve_hausdorff(sk.points, phantom_geometry(spec, seed).artery_curve))
    dt = time.perf_counter() - t0
    verdict(5, max(dists) <= 1.0 and dt < 60,
            f"20 tubes, Hausdorff max {max(dists):.3f} mean {np.mean(dists):.3f} voxels, {dt:.1f}s")


# --- 6: pooling permutation invariance --------------------------------------------

def test_criterion_06_permutation_invariance():
    torch.manual_seed(6)
    net = PoolingNetwork("calcification", m=32, n_layers=2, n_heads=4).eval()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        xs = rng.normal(size=(int(rng.integers(2, 40)), 32))
        a, _ = pool_patches(net, xs)
        b, _ = pool_patches(net, xs[rng.permutation(len(xs))])
        worst = max(worst, float(np.abs(a.values - b.values).max()))
    verdict(6, worst < 1e-5, f"100 sets, max deviation {worst:.2e}")


# --- 7 to 10: desk-scale pipeline -------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    reuse = os.environ.get("MAPLE_ACCEPTANCE_RUN")
    cfg = RunConfig.load(DESK)
    run = Run(cfg, reuse or tmp_path_factory.mktemp("desk"))
    run.run_all()
    return run


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.mark.slow
def test_criterion_07_reconstruction_pretraining(desk_run):
    rows = _csv(desk_run.dir / "image" / "pretrain_arteries.csv")
    initial = float(rows[0]["mse"])
    final = float(rows[-1]["mse"])
    epochs = len(rows) - 1
    verdict(7, epochs <= 20 and final <= 0.5 * initial,
            f"artery patches, mse {initial:.4f} -> {final:.4f} ({final / initial:.2f}x) in {epochs} epochs")


@pytest.mark.slow
def test_criterion_08_zero_shot(desk_run):
    rows = _csv(desk_run.dir / "eval" / "metrics.csv")
    base = _csv(desk_run.dir / "eval" / "baseline_metrics.csv")
    split = desk_run.split()
    seconds = sum(desk_run.manifest.latest(s)["seconds"] for s in ("gen-data", "text", "image", "align", "codebook", "eval"))
    f1 = {r["task"]: float(r["f1"]) for r in rows}
    ok = (len(split["train"]) == 200 and len(split["test"]) == 60 and len(rows) == 4
          and all(v >= 0.7 for v in f1.values())
          and not any(int(r["collapsed"]) for r in rows)
          and all(int(r["collapsed"]) for r in base)
          and seconds <= 1800)
    verdict(8, ok, "F1 " + ", ".join(f"{k} {v:.3f}" for k, v in f1.items())
            + f"; baseline collapsed on {sum(int(r['collapsed']) for r in base)}/4; {seconds / 60:.1f} min")


@pytest.mark.slow
def test_criterion_09_localization(desk_run):
    recs = [r for r in _csv(desk_run.dir / "eval" / "attention.csv") if r["finding"] == "calcification"]
    share = np.mean([float(r["ratio_to_uniform"]) >= 2.0 for r in recs])
    verdict(9, len(recs) > 0 and share >= 0.7,
            f"{share:.3f} of {len(recs)} positive calcification volumes at >= 2x uniform attention")


@pytest.mark.slow
def test_criterion_10_frozen_encoders(desk_run):
    checks = json.loads((desk_run.dir / "align" / "frozen_checksums.json").read_text())
    # recompute from the saved checkpoints, independent of the training process
    now = []
    for f in FINDINGS:
        enc, head = load_text_model(desk_run.dir / "text" / f"text_{f}.pt")
        now += [weights_digest(enc), weights_digest(head)]
    now += [weights_digest(load_encoder(desk_run.dir / "image" / f"encoder_{r}.pt"))
            for r in ("arteries", "myocardium", "aorta_tp")]
    ok = checks["before"] == checks["after"] == now
    verdict(10, ok, f"{len(now)} frozen modules, checksums identical before, after and on disk")
