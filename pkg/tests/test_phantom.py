import json

import numpy as np
import pytest

from maple.core import ABSENT, FINDINGS, PRESENT, REGIONS, load_tensor
from maple.lexicon import load_lexicon
from maple.phantom import (
    PhantomError,
    PhantomSpec,
    derive_seed,
    draw_states,
    generate_dataset,
    generate_report,
    generate_volume,
    lesion_map,
    manifest_digest,
    phantom_geometry,
)
from maple.textenc import label_sentence

SMALL = PhantomSpec(volume_edge=40)
ALL_PRESENT = {f: PRESENT for f in FINDINGS}
ALL_ABSENT = {f: ABSENT for f in FINDINGS}


def test_spec_defaults_scale_with_edge():
    s = PhantomSpec(volume_edge=64)
    assert s.artery_radius == pytest.approx(0.035 * 64)
    assert s.myocardium_radius == pytest.approx(12.8)
    with pytest.raises(PhantomError):
        PhantomSpec(volume_edge=16)
    with pytest.raises(PhantomError):
        PhantomSpec(finding_priors={"fracture": 0.5})
    with pytest.raises(PhantomError):
        PhantomSpec(thickening_factor=10)


def test_zero_priors_give_no_lesions():
    spec = PhantomSpec(volume_edge=40, finding_priors={f: 0.0 for f in FINDINGS})
    _, _, lesions, states = generate_volume(spec, 5)
    assert all(s == ABSENT for s in states.values())
    assert lesions == []


def test_calcification_is_bright_inside_arteries():
    spec = PhantomSpec(volume_edge=40, finding_priors={"calcification": 1.0})
    vol, mask, lesions, states = generate_volume(spec, 11)
    assert states["calcification"] == PRESENT
    rec = [r for r in lesions if r.finding == "calcification"]
    assert rec
    vox = tuple(rec[0].voxels.T)
    art = mask.region("arteries")
    assert art[vox].all()
    lesion = np.zeros_like(art)
    lesion[vox] = True
    assert vol.data[lesion].mean() > vol.data[art & ~lesion].mean()


def test_generation_is_deterministic():
    a = generate_volume(SMALL, 123)
    b = generate_volume(SMALL, 123)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].labels, b[1].labels)
    assert a[3] == b[3]


def test_counterfactual_keeps_anatomy_and_noise():
    healthy = generate_volume(SMALL, 7, ALL_ABSENT)
    sick = generate_volume(SMALL, 7, ALL_PRESENT)
    changed = healthy[0].data != sick[0].data
    touched = np.zeros(changed.shape, dtype=bool)
    for rec in sick[2]:
        touched[tuple(rec.voxels.T)] = True
    # only lesion voxels differ; everything else is the same render
    assert not np.any(changed & ~touched)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_lesion_signal_exceeds_three_sigma(seed):
    spec = PhantomSpec(volume_edge=48)
    healthy = generate_volume(spec, seed, ALL_ABSENT)
    vol, _, lesions, _ = generate_volume(spec, seed, ALL_PRESENT)
    assert {r.finding for r in lesions} == set(FINDINGS)
    for rec in lesions:
        vox = tuple(rec.voxels.T)
        diff = abs(vol.data[vox].mean() - healthy[0].data[vox].mean())
        assert diff >= 3 * spec.noise_sigma, rec.finding


def test_regions_do_not_overlap_and_are_present():
    _, mask, _, _ = generate_volume(PhantomSpec(volume_edge=48), 3, ALL_PRESENT)
    counts = [mask.region(r).sum() for r in REGIONS]
    assert min(counts) > 0


def test_geometry_curve_lies_inside_volume():
    g = phantom_geometry(SMALL, 9)
    assert g.artery_curve.shape == (2000, 3)
    assert g.artery_curve.min() > 0 and g.artery_curve.max() < SMALL.volume_edge - 1
    assert abs(g.calcification_at - g.stenosis_at) >= 0.25


def test_lesion_map_bits():
    _, _, lesions, _ = generate_volume(SMALL, 2, ALL_PRESENT)
    m = lesion_map(lesions, (40, 40, 40))
    for i, f in enumerate(FINDINGS):
        rec = next(r for r in lesions if r.finding == f)
        assert np.all(m[tuple(rec.voxels.T)] & (1 << i))


def test_report_all_absent_labels():
    lex = load_lexicon()
    report = generate_report(ALL_ABSENT, lex, sample_seed=4, n_distractors=0)
    assert len(report) == 4
    labs = [label_sentence(s, lex) for s in report]
    assert [(lab.finding, lab.state) for lab in labs] == [(f, ABSENT) for f in FINDINGS]


def test_report_distractors_and_determinism():
    lex = load_lexicon()
    r = generate_report(ALL_PRESENT, lex, sample_seed=4, n_distractors=2)
    assert len(r) == 6
    assert sum(label_sentence(s, lex) is None for s in r) == 2
    assert r == generate_report(ALL_PRESENT, lex, sample_seed=4, n_distractors=2)


def test_state_frequencies_follow_prior():
    spec = PhantomSpec(volume_edge=40)
    draws = np.array([[s == PRESENT for s in draw_states(spec, derive_seed(0, i)).values()]
                      for i in range(8000)])
    # 8000 draws: sd of the mean is 0.0056
    assert np.all(np.abs(draws.mean(0) - 0.5) < 0.02)
    # blocks of 200 against the 99% binomial interval; any single block may
    # miss, so require the miss rate to be near 1%, not zero
    blocks = draws.reshape(40, 200, 4).sum(1)
    inside = (blocks >= 80) & (blocks <= 120)
    assert inside.mean() >= 0.95
    assert abs(np.corrcoef(draws.T)[0, 1]) < 0.05


def test_dataset_single_sample(tmp_path):
    man = generate_dataset(SMALL, 1, tmp_path)
    assert len(man["samples"]) == 1
    s = man["samples"][0]
    for key in ("volume", "mask", "lesions"):
        assert load_tensor(tmp_path / s[key]).shape == (40, 40, 40)
    assert (tmp_path / s["report"]).read_text().strip()
    assert json.loads((tmp_path / "manifest.json").read_text())["samples"][0]["id"] == "s00000"


def test_dataset_regeneration_is_identical(tmp_path):
    a = generate_dataset(SMALL, 3, tmp_path / "a")
    b = generate_dataset(SMALL, 3, tmp_path / "b", workers=2)
    assert manifest_digest(a) == manifest_digest(b)


def test_dataset_refuses_duplicate_ids(tmp_path):
    generate_dataset(SMALL, 2, tmp_path)
    with pytest.raises(PhantomError, match="duplicate"):
        generate_dataset(SMALL, 2, tmp_path, start_index=1)
    man = generate_dataset(SMALL, 1, tmp_path, start_index=2)
    assert [s["id"] for s in man["samples"]] == ["s00000", "s00001", "s00002"]
