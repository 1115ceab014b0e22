import math

import numpy as np
import pytest
import torch
from scipy import stats

from maple.align import (
    AlignConfig,
    AlignItem,
    PoolingNetwork,
    anti_collapse_loss,
    load_pooling,
    pool_patches,
    sample_negative,
    sample_positive,
    sampling_probs,
    save_pooling,
    train_alignment,
    triplet_grad,
    triplet_loss,
)
from maple.core import ABSENT, FINDINGS, PRESENT, REGIONS, ROUTING, ContractError
from oracles import total_variation, triplet_loss_loop


def _net(m=16, seed=0):
    torch.manual_seed(seed)
    return PoolingNetwork("calcification", m=m, n_layers=2, n_heads=4).eval()


# --- sampling -------------------------------------------------------------------

def _unit_with_sims(sims, m=4):
    """Anchor e1 and unit candidates with the given cosine similarities to it."""
    anchor = np.eye(m)[0]
    cands = np.array([[s, math.sqrt(1 - s * s), 0, 0] for s in sims])
    return anchor, cands


def test_two_point_probabilities_match_hand_softmax():
    p = sampling_probs([0.9, 0.1], 0.1, -1.0)
    assert p[1] == pytest.approx(math.exp(-1) / (math.exp(-1) + math.exp(-9)), abs=1e-12)
    assert p[1] == pytest.approx(0.99966, abs=1e-5)
    q = sampling_probs([0.9, 0.1], 0.1, +1.0)
    assert q[0] == pytest.approx(math.exp(9) / (math.exp(9) + math.exp(1)), abs=1e-12)


@pytest.mark.parametrize("draw,sign", [(sample_positive, -1.0), (sample_negative, +1.0)])
def test_empirical_frequencies_match_softmax(draw, sign):
    anchor, cands = _unit_with_sims([0.8, 0.5, 0.45, -0.2])
    rng = np.random.default_rng(0)
    counts = np.bincount([draw(anchor, cands, 0.3, rng) for _ in range(10_000)], minlength=4)
    assert total_variation(counts, sampling_probs([0.8, 0.5, 0.45, -0.2], 0.3, sign)) < 0.02


def test_equidistant_and_flat_temperature_are_uniform():
    anchor, cands = _unit_with_sims([0.3] * 5)
    rng = np.random.default_rng(1)
    counts = np.bincount([sample_positive(anchor, cands, 0.1, rng) for _ in range(10_000)], minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01
    anchor, cands = _unit_with_sims([0.9, -0.9, 0.0])
    counts = np.bincount([sample_negative(anchor, cands, 1e6, rng) for _ in range(10_000)], minlength=3)
    assert stats.chisquare(counts).pvalue > 0.01


def test_single_candidate_and_empty_set():
    rng = np.random.default_rng(0)
    assert sample_positive(np.ones(3), np.ones((1, 3)), 0.1, rng) == 0
    with pytest.raises(ContractError):
        sample_negative(np.ones(3), np.zeros((0, 3)), 0.1, rng)
    with pytest.raises(ContractError):
        sampling_probs([0.1], 0.0, 1.0)


# --- triplet loss -------------------------------------------------------------

def test_triplet_loss_examples():
    assert triplet_loss([0, 0], [1, 0], [0, 1], 0.2) == pytest.approx(0.2)
    x = np.array([0.5, 0.5])
    assert triplet_loss(x, x, x + [math.sqrt(0.2), 0], 0.2) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        triplet_loss([0, 0], [1, 0], [0, 1, 0], 0.2)
    with pytest.raises(ContractError):
        triplet_loss([0, 0], [1, 0], [0, 1], 0.0)


def test_triplet_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, yp, yn = rng.normal(size=(3, 16))
        margin = float(rng.uniform(0.05, 2.0))
        assert triplet_loss(x, yp, yn, margin) == pytest.approx(triplet_loss_loop(x, yp, yn, margin), abs=1e-6)
        assert triplet_loss(x, yp, yn, margin) >= 0.0


def test_hinge_is_exactly_zero_past_margin():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, yp = rng.normal(size=(2, 8))
        yn = x + 10 * rng.normal(size=8)
        if np.sum((x - yn) ** 2) - np.sum((x - yp) ** 2) >= 0.5:
            assert triplet_loss(x, yp, yn, 0.5) == 0.0
            assert not np.any(triplet_grad(x, yp, yn, 0.5))


def test_triplet_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(50):
        x, yp, yn = rng.normal(size=(3, 16))
        if triplet_loss(x, yp, yn, 0.2) < 1e-3:
            continue
        g = triplet_grad(x, yp, yn, 0.2)
        fd = np.array([(triplet_loss(x + h * e, yp, yn, 0.2) - triplet_loss(x - h * e, yp, yn, 0.2)) / (2 * h)
                       for e in np.eye(16)])
        assert np.abs(fd - g).max() <= 1e-4 * np.abs(g).max()


# --- anti-collapse ----------------------------------------------------------------

def test_anti_collapse_cases():
    v = np.array([[1.0, 2.0, 0.0]])
    assert anti_collapse_loss({PRESENT: v}, 0.5) == 0.0
    assert anti_collapse_loss({PRESENT: v, ABSENT: -v}, 0.5) == pytest.approx(0.0, abs=1e-12)
    assert anti_collapse_loss({PRESENT: v, ABSENT: 3 * v}, 0.5) == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    val = anti_collapse_loss({PRESENT: rng.normal(size=(4, 5)), ABSENT: rng.normal(size=(3, 5))}, 0.7)
    assert 0.0 <= val <= 0.7
    with pytest.raises(ContractError):
        anti_collapse_loss({}, -1.0)


def test_align_config_validation():
    with pytest.raises(ContractError):
        AlignConfig(tau=0)
    with pytest.raises(ContractError):
        AlignConfig(margin=-1)
    with pytest.raises(ContractError):
        AlignConfig(lam=-0.1)


# --- pooling --------------------------------------------------------------------

def test_single_patch_gets_all_attention():
    _, w = pool_patches(_net(), [np.random.default_rng(0).normal(size=16)])
    assert w.shape == (1,) and w[0] == pytest.approx(1.0)


def test_attention_weights_are_a_distribution():
    _, w = pool_patches(_net(), np.random.default_rng(0).normal(size=(7, 16)))
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def test_permutation_and_duplication_invariance():
    net = _net()
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(9, 16))
    base, _ = pool_patches(net, xs)
    perm, _ = pool_patches(net, xs[rng.permutation(9)])
    dup, _ = pool_patches(net, np.concatenate([xs, xs]))
    assert np.abs(base.values - perm.values).max() < 1e-5
    assert np.abs(base.values - dup.values).max() < 1e-5


def test_padding_slots_are_ignored():
    net = _net()
    xs = torch.randn(1, 5, 16)
    padded = torch.cat([xs, torch.randn(1, 3, 16)], 1)
    pad = torch.tensor([[False] * 5 + [True] * 3])
    with torch.no_grad():
        a, _ = net(xs)
        b, w = net(padded, pad)
    assert torch.allclose(a, b, atol=1e-6)
    assert torch.all(w[0, 5:] == 0)


def test_pool_rejects_bad_input():
    with pytest.raises(ContractError):
        pool_patches(_net(), [])
    with pytest.raises(ContractError):
        pool_patches(_net(), [np.zeros(8)])
    with pytest.raises(ContractError):
        PoolingNetwork("fracture", m=8, n_heads=2)
    with pytest.raises(ContractError):
        PoolingNetwork("stenosis", m=10, n_heads=4)


def test_input_standardisation_is_applied_and_saved(tmp_path):
    net = _net()
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(6, 16))
    mean, std = rng.normal(size=16), rng.uniform(0.5, 2.0, size=16)
    raw, _ = pool_patches(net, xs)
    net.set_input_stats(mean, std)
    shifted, _ = pool_patches(net, xs * std + mean)
    assert np.allclose(raw.values, shifted.values, atol=1e-5)
    save_pooling(tmp_path / "p.pt", net)
    back = load_pooling(tmp_path / "p.pt")
    assert torch.equal(back.in_mean, net.in_mean) and torch.equal(back.in_scale, net.in_scale)
    with pytest.raises(ContractError):
        net.set_input_stats(np.zeros(3), np.ones(3))


# --- training loop ----------------------------------------------------------------

def _toy_problem(n=24, m=8, seed=0):
    """Bags whose present samples contain one marker patch per region."""
    rng = np.random.default_rng(seed)
    marker = rng.normal(size=m) * 3
    bags, items = [], []
    for i in range(n):
        states = {f: (PRESENT if rng.random() < 0.5 else ABSENT) for f in FINDINGS}
        bag = {}
        for r in REGIONS:
            b = rng.normal(size=(5, m))
            if any(states[f] == PRESENT for f in FINDINGS if ROUTING[f] == r):
                b[0] = marker
            bag[r] = b
        bags.append(bag)
        items += [AlignItem(i, f, states[f]) for f in FINDINGS]
    pools = {}
    for f in FINDINGS:
        d = rng.normal(size=m)
        pools[(f, PRESENT)] = d + 0.1 * rng.normal(size=(6, m))
        pools[(f, ABSENT)] = -d + 0.1 * rng.normal(size=(6, m))
    return bags, items, pools


def _cfg(**kw):
    base = dict(epochs=15, lr=3e-3, n_layers=1, n_heads=2, dropout=0.0, batch_size=8, seed=0)
    return AlignConfig(**{**base, **kw})


def test_training_reduces_loss_and_is_deterministic():
    bags, items, pools = _toy_problem()
    a = train_alignment(bags, items, pools, _cfg())
    b = train_alignment(bags, items, pools, _cfg())
    assert a.log == b.log
    first, last = a.log[0][1], a.log[-1][1]
    assert last <= 0.6 * first
    for f in FINDINGS:
        assert all(torch.equal(p, q) for p, q in zip(a.nets[f].state_dict().values(),
                                                     b.nets[f].state_dict().values()))


def test_lambda_zero_logs_zero_anti_collapse():
    bags, items, pools = _toy_problem()
    res = train_alignment(bags, items, pools, _cfg(epochs=2, lam=0.0))
    assert all(row[2] == 0.0 for row in res.log)
    res = train_alignment(bags, items, pools, _cfg(epochs=2, lam=0.5))
    assert all(row[2] > 0.0 for row in res.log)


def test_standardisation_statistics_come_from_the_bags():
    bags, items, pools = _toy_problem()
    res = train_alignment(bags, items, pools, _cfg(epochs=1))
    x = np.concatenate([b["myocardium"] for b in bags])
    net = res.nets["myocardium_anomaly"]
    assert np.allclose(net.in_mean.double().numpy(), x.mean(0), atol=1e-5)
    assert np.allclose(net.in_scale.double().numpy(), x.std(0), atol=1e-5)
    off = train_alignment(bags, items, pools, _cfg(epochs=1, standardize=False))
    assert torch.all(off.nets["myocardium_anomaly"].in_scale == 1)


def test_missing_state_is_a_setup_error():
    bags, items, pools = _toy_problem()
    del pools[("stenosis", ABSENT)]
    with pytest.raises(ContractError, match="stenosis"):
        train_alignment(bags, items, pools, _cfg(epochs=1))
