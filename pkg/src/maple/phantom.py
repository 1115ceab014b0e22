"""Synthetic paired samples: parametric cardiac phantoms with planted findings
and templated reports.

Each sample draws geometry, finding states, lesion placement and noise from
independent child streams of its own seed. Forcing a different state map
therefore re-renders the *same* anatomy, which is what the counterfactual
lesion-contrast checks rely on.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    ABSENT,
    FINDINGS,
    PRESENT,
    REGIONS,
    ContractError,
    RegionMask,
    Sentence,
    Volume,
    save_tensor,
)
from .lexicon import load_lexicon

log = logging.getLogger(__name__)

INTENSITY = {
    "background": 0.05,
    "blood": 0.55,
    "myocardium": 0.35,
    "lumen": 0.65,
    "aorta": 0.60,
    "plaque": 0.30,
    "calcium": 1.00,
}

LESION_REGION = {
    "calcification": "arteries",
    "stenosis": "arteries",
    "myocardium_anomaly": "myocardium",
    "dilated_aorta_tp": "aorta_tp",
}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom layout. Geometry fields left as None scale with ``volume_edge``."""

    volume_edge: int = 64
    finding_priors: dict = field(default_factory=lambda: {f: 0.5 for f in FINDINGS})
    noise_sigma: float = 0.02
    seed: int = 0
    artery_radius: float | None = None
    myocardium_radius: float | None = None
    myocardium_thickness: float | None = None
    aorta_radius: float | None = None
    thickening_factor: float = 2.0
    dilation_factor: float = 1.6
    stenosis_lumen_fraction: float = 0.35
    calcification_radius_factor: float = 1.5
    heart_jitter: float = 0.02

    def __post_init__(self):
        e = int(self.volume_edge)
        if e < 32:
            raise PhantomError(f"volume_edge must be >= 32, got {e}")
        priors = {f: float(self.finding_priors.get(f, 0.5)) for f in FINDINGS}
        unknown = set(self.finding_priors) - set(FINDINGS)
        if unknown:
            raise PhantomError(f"priors for unknown findings: {sorted(unknown)}")
        if any(not 0.0 <= p <= 1.0 for p in priors.values()):
            raise PhantomError("finding priors must lie in [0, 1]")
        if self.calcification_radius_factor <= 0:
            raise PhantomError("calcification_radius_factor must be > 0")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")
        defaults = {
            "artery_radius": max(1.5, 0.035 * e),
            "myocardium_radius": 0.2 * e,
            "myocardium_thickness": max(2.0, 0.06 * e),
            "aorta_radius": 0.06 * e,
        }
        object.__setattr__(self, "volume_edge", e)
        object.__setattr__(self, "finding_priors", priors)
        for k, v in defaults.items():
            if getattr(self, k) is None:
                object.__setattr__(self, k, float(v))
        self._check_fit()

    # outer extent of the artery sphere, measured from the heart centre
    @property
    def artery_orbit(self):
        return self.myocardium_radius + 1.0 + self.artery_radius

    @property
    def aorta_offset(self):
        reach = self.artery_orbit + self.artery_radius + self.aorta_radius * self.dilation_factor + 1.0
        return reach / np.sqrt(2.0)

    def _check_fit(self):
        e = self.volume_edge
        jitter = self.heart_jitter * e
        margin = 2.0
        half = e / 2.0 - 0.5
        if self.myocardium_thickness * self.thickening_factor >= self.myocardium_radius:
            raise PhantomError("thickened myocardium would close the cavity")
        if half - jitter - (self.artery_orbit + self.artery_radius) < margin:
            raise PhantomError("arteries do not fit inside the volume")
        aorta_axis = half - self.aorta_offset - jitter
        if aorta_axis - self.aorta_radius * self.dilation_factor < margin:
            raise PhantomError("aorta/pulmonary trunk does not fit inside the volume")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LesionRecord:
    finding: str
    affected_region: str
    voxels: np.ndarray  # (n, 3) integer coordinates


@dataclass(frozen=True)
class PhantomGeometry:
    heart_center: np.ndarray
    artery_curve: np.ndarray  # dense (n, 3) samples of the generating curve
    aorta_segment: np.ndarray  # (2, 3) end points of the capsule axis
    calcification_at: float  # arc-length fraction along the artery
    stenosis_at: float


def derive_seed(*keys):
    """64-bit seed from a tuple of non-negative integers."""
    words = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int(words[0]) << 32 | int(words[1])


def _streams(sample_seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(sample_seed)).spawn(4)]


def phantom_geometry(spec, sample_seed):
    """Randomised anatomy of one sample (no intensities)."""
    geo_rng = _streams(sample_seed)[0]
    e = spec.volume_edge
    center = np.full(3, e / 2.0 - 0.5) + geo_rng.uniform(-1, 1, 3) * spec.heart_jitter * e

    normal = geo_rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    helper = np.eye(3)[np.argmin(np.abs(normal))]
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    start = geo_rng.uniform(0, 2 * np.pi)
    span = geo_rng.uniform(0.55, 0.8) * 2 * np.pi
    t = start + np.linspace(0.0, span, 2000)
    curve = center + spec.artery_orbit * (np.cos(t)[:, None] * u + np.sin(t)[:, None] * v)

    off = spec.aorta_offset
    axis_yx = center[1:] - off
    r_max = spec.aorta_radius * spec.dilation_factor
    z0, z1 = 0.15 * e + r_max, 0.85 * e - r_max
    segment = np.array([[z0, *axis_yx], [z1, *axis_yx]])

    lesion_rng = _streams(sample_seed)[2]
    stenosis_at = lesion_rng.uniform(0.15, 0.85)
    calc_at = lesion_rng.uniform(0.15, 0.85)
    while abs(calc_at - stenosis_at) < 0.25:
        calc_at = lesion_rng.uniform(0.15, 0.85)
    return PhantomGeometry(center, curve, segment, calc_at, stenosis_at)


def _grid(e):
    return np.indices((e, e, e), dtype=np.float64).reshape(3, -1).T


def _segment_distance(points, seg):
    a, b = seg
    d = b - a
    t = np.clip((points - a) @ d / (d @ d), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * d), axis=1)


def draw_states(spec, sample_seed):
    rng = _streams(sample_seed)[1]
    draws = rng.random(len(FINDINGS))
    return {f: PRESENT if draws[i] < spec.finding_priors[f] else ABSENT for i, f in enumerate(FINDINGS)}


def generate_volume(spec, sample_seed, states=None):
    """Render one phantom.

    Returns ``(Volume, RegionMask, lesions, states)``. ``states`` may be
    passed to override the prior draw; the anatomy and noise stay the same.
    """
    if states is None:
        states = draw_states(spec, sample_seed)
    missing = [f for f in FINDINGS if f not in states]
    if missing:
        raise ContractError(f"no state for findings {missing}")
    geo = phantom_geometry(spec, sample_seed)
    e = spec.volume_edge
    pts = _grid(e)
    n = pts.shape[0]
    img = np.full(n, INTENSITY["background"])
    labels = np.zeros(n, dtype=np.int16)
    lab = {r: i + 1 for i, r in enumerate(REGIONS)}
    lesions = []

    # myocardium: spherical shell; thickening grows the wall into the cavity
    r_heart = np.linalg.norm(pts - geo.heart_center, axis=1)
    r_out = spec.myocardium_radius
    r_in = r_out - spec.myocardium_thickness
    r_in_thick = r_out - spec.myocardium_thickness * spec.thickening_factor
    inner = r_in_thick if states["myocardium_anomaly"] == PRESENT else r_in
    img[r_heart < inner] = INTENSITY["blood"]
    shell = (r_heart >= inner) & (r_heart <= r_out)
    img[shell] = INTENSITY["myocardium"]
    labels[shell] = lab["myocardium"]
    if states["myocardium_anomaly"] == PRESENT:
        grown = (r_heart >= r_in_thick) & (r_heart < r_in)
        lesions.append(LesionRecord("myocardium_anomaly", "myocardium", np.flatnonzero(grown)))

    # aorta / pulmonary trunk: capsule, dilation widens it along its length
    d_aorta = _segment_distance(pts, geo.aorta_segment)
    radius = spec.aorta_radius
    if states["dilated_aorta_tp"] == PRESENT:
        radius *= spec.dilation_factor
    aorta = d_aorta <= radius
    img[aorta] = INTENSITY["aorta"]
    if np.any(labels[aorta]):
        raise PhantomError("aorta overlaps another region")
    labels[aorta] = lab["aorta_tp"]
    if states["dilated_aorta_tp"] == PRESENT:
        grown = aorta & (d_aorta > spec.aorta_radius)
        lesions.append(LesionRecord("dilated_aorta_tp", "aorta_tp", np.flatnonzero(grown)))

    # arteries: tube swept along the curve
    tree = cKDTree(geo.artery_curve)
    d_art, nearest = tree.query(pts, distance_upper_bound=spec.artery_radius + 1.0)
    artery = d_art <= spec.artery_radius
    if np.any(labels[artery]):
        raise PhantomError("arteries overlap another region")
    img[artery] = INTENSITY["lumen"]
    labels[artery] = lab["arteries"]
    frac = np.where(artery, nearest, 0) / (len(geo.artery_curve) - 1)
    seg_len = np.linalg.norm(np.diff(geo.artery_curve, axis=0), axis=1).sum()

    if states["stenosis"] == PRESENT:
        half = max(2.0, 1.5 * spec.artery_radius) / seg_len
        lumen = spec.stenosis_lumen_fraction * spec.artery_radius
        plaque = artery & (np.abs(frac - geo.stenosis_at) <= half) & (d_art > lumen)
        img[plaque] = INTENSITY["plaque"]
        lesions.append(LesionRecord("stenosis", "arteries", np.flatnonzero(plaque)))

    if states["calcification"] == PRESENT:
        idx = int(round(geo.calcification_at * (len(geo.artery_curve) - 1)))
        c = geo.artery_curve[idx]
        blob = artery & (np.linalg.norm(pts - c, axis=1) <= max(1.0, spec.calcification_radius_factor * spec.artery_radius))
        img[blob] = INTENSITY["calcium"]
        lesions.append(LesionRecord("calcification", "arteries", np.flatnonzero(blob)))

    noise = _streams(sample_seed)[3].normal(0.0, spec.noise_sigma, n)
    img = np.clip(img + noise, 0.0, 1.0).reshape(e, e, e)
    labels = labels.reshape(e, e, e)
    shape = (e, e, e)
    lesions = [
        LesionRecord(r.finding, r.affected_region, np.stack(np.unravel_index(r.voxels, shape), axis=1))
        for r in lesions
    ]
    return Volume(img.astype(np.float32)), RegionMask(labels, REGIONS), lesions, dict(states)


def lesion_map(lesions, shape):
    """Integer grid with bit ``i`` set where finding ``FINDINGS[i]`` was planted."""
    out = np.zeros(shape, dtype=np.int32)
    for rec in lesions:
        bit = 1 << FINDINGS.index(rec.finding)
        out[tuple(rec.voxels.T)] |= bit
    return out


def generate_report(states, lexicon=None, sample_seed=0, n_distractors=None, report_id=""):
    """One templated sentence per finding, preceded by 0-2 acquisition sentences."""
    lexicon = lexicon or load_lexicon()
    rng = np.random.default_rng(derive_seed(sample_seed, 7))
    if n_distractors is None:
        n_distractors = int(rng.integers(0, 3))
    sentences = []
    if n_distractors:
        if not lexicon.distractors:
            raise PhantomError("lexicon has no distractor sentences")
        picks = rng.choice(len(lexicon.distractors), size=n_distractors, replace=False)
        sentences += [lexicon.render(lexicon.distractors[i], rng) for i in picks]
    for f in lexicon.keywords.finding_order:
        if f not in states:
            raise ContractError(f"no state for finding {f!r}")
        templates = lexicon.templates.get((f, states[f]))
        if not templates:
            raise PhantomError(f"no templates for ({f}, {states[f]})")
        sentences.append(lexicon.render(templates[int(rng.integers(len(templates)))], rng))
    return [Sentence(s, report_id) for s in sentences]


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_sample(args):
    spec, index, out_dir, lexicon_path = args
    sid = f"s{index:05d}"
    seed = derive_seed(spec.seed, index)
    volume, mask, lesions, states = generate_volume(spec, seed)
    report = generate_report(states, load_lexicon(lexicon_path), seed, report_id=sid)
    d = Path(out_dir) / "samples" / sid
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "volume": d / "volume.mapl",
        "mask": d / "mask.mapl",
        "lesions": d / "lesions.mapl",
        "report": d / "report.txt",
    }
    save_tensor(files["volume"], volume.data)
    save_tensor(files["mask"], mask.labels)
    save_tensor(files["lesions"], lesion_map(lesions, volume.shape))
    files["report"].write_text("".join(s.text + "\n" for s in report), encoding="utf-8")
    rel = {k: str(p.relative_to(out_dir)) for k, p in files.items()}
    return {
        "id": sid,
        "sample_seed": seed,
        **rel,
        "ground_truth": states,
        "checksums": {k: _sha256(p) for k, p in files.items()},
    }


def generate_dataset(spec, n_samples, out_dir, lexicon_path=None, workers=1, start_index=0):
    """Write ``n_samples`` phantoms plus ``manifest.json`` to ``out_dir``.

    Per-sample seeds derive from ``(spec.seed, index)``, so the worker count
    never changes the output.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PhantomError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise PhantomError(f"{out_dir} is not writable")
    manifest_path = out_dir / "manifest.json"
    existing = set()
    if manifest_path.exists():
        existing = {s["id"] for s in json.loads(manifest_path.read_text())["samples"]}
    ids = [f"s{i:05d}" for i in range(start_index, start_index + n_samples)]
    clash = existing.intersection(ids)
    if clash:
        raise PhantomError(f"duplicate sample ids: {sorted(clash)[:5]}")

    lex = str(lexicon_path) if lexicon_path else None
    jobs = [(spec, i, str(out_dir), lex) for i in range(start_index, start_index + n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_write_sample, jobs, chunksize=8))
    else:
        entries = [_write_sample(j) for j in jobs]
    log.info("generated %d samples in %s", len(entries), out_dir)

    if existing:
        old = json.loads(manifest_path.read_text())
        entries = old["samples"] + entries
    manifest = {
        "format": 1,
        "master_seed": spec.seed,
        "spec": spec.to_dict(),
        "lexicon": lex or "bundled",
        "samples": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def manifest_digest(manifest):
    """Stable hash over ids, labels and file checksums."""
    body = json.dumps(
        [(s["id"], s["ground_truth"], s["checksums"]) for s in manifest["samples"]], sort_keys=True
    )
    return hashlib.sha256(body.encode()).hexdigest()
