"""Domain types, vector math and the binary tensor format shared by all stages."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FINDINGS = ("calcification", "stenosis", "myocardium_anomaly", "dilated_aorta_tp")
REGIONS = ("arteries", "myocardium", "aorta_tp")

PRESENT = "present"
ABSENT = "absent"
# classifier logit order: index 0 is "present"
STATES = (PRESENT, ABSENT)

# which region's patches are pooled for each finding
ROUTING = {
    "calcification": "arteries",
    "stenosis": "arteries",
    "myocardium_anomaly": "myocardium",
    "dilated_aorta_tp": "aorta_tp",
}

DEFAULT_DIM = 768


class ContractError(ValueError):
    """An argument violates an operation's preconditions."""


class TensorFormatError(ValueError):
    """A tensor file is malformed, truncated or fails its checksum."""


def _readonly(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _readonly(self.data, np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ContractError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ContractError("volume intensities must lie in [0, 1]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ContractError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class RegionMask:
    """Labelled segmentation; label ``i`` (1-based) is ``region_names[i - 1]``."""

    labels: np.ndarray
    region_names: tuple = REGIONS

    def __post_init__(self):
        labels = _readonly(self.labels, np.int16)
        names = tuple(self.region_names)
        if labels.ndim != 3:
            raise ContractError("region mask must be 3D")
        if labels.min() < 0 or labels.max() > len(names):
            raise ContractError("mask contains labels without a declared region")
        present = np.bincount(labels.ravel(), minlength=len(names) + 1)
        empty = [n for i, n in enumerate(names, start=1) if present[i] == 0]
        if empty:
            raise ContractError(f"declared regions without voxels: {empty}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "region_names", names)

    def label_of(self, region):
        try:
            return self.region_names.index(region) + 1
        except ValueError:
            raise ContractError(f"unknown region {region!r}") from None

    def region(self, region):
        """Boolean mask of one region."""
        return self.labels == self.label_of(region)


@dataclass(frozen=True)
class Patch:
    data: np.ndarray
    region: str
    center: tuple

    def __post_init__(self):
        data = _readonly(self.data, np.float32)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ContractError(f"patch must be a cube, got shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ContractError("patch values must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))

    @property
    def size(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class Sentence:
    text: str
    report_id: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ContractError("sentence text is empty")


@dataclass(frozen=True)
class FindingLabel:
    finding: str
    state: str

    def __post_init__(self):
        if self.finding not in FINDINGS:
            raise ContractError(f"unknown finding {self.finding!r}")
        if self.state not in STATES:
            raise ContractError(f"state must be one of {STATES}, got {self.state!r}")


@dataclass(frozen=True)
class EmbeddingVec:
    values: np.ndarray
    source: str = "sentence"

    def __post_init__(self):
        v = _readonly(self.values, np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ContractError("embedding must be a finite 1D vector")
        if self.source not in ("sentence", "pooled_image", "patch"):
            raise ContractError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class PairedSample:
    sample_id: str
    volume_ref: str
    mask_ref: str
    report: tuple = ()
    ground_truth: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [f for f in FINDINGS if f not in self.ground_truth]
        if missing:
            raise ContractError(f"sample {self.sample_id} lacks ground truth for {missing}")


def _pair(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ContractError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return u, v


def cosine_sim(u, v):
    """Cosine similarity of two equal-length vectors.

    Raises ContractError for a zero vector instead of returning NaN.
    """
    u, v = _pair(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def sq_l2(u, v):
    u, v = _pair(u, v)
    d = u - v
    return float(d @ d)


def cosine_matrix(a, b):
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ContractError("cosine similarity of a zero vector is undefined")
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


# --- binary tensor files -------------------------------------------------------
#
# "MAPL" | version u16 | rank u8 | dims u32 * rank | float32 payload | crc32 u32
# all little-endian, payload in row-major order

MAGIC = b"MAPL"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHB")


def save_tensor(path, grid):
    grid = np.asarray(grid)
    if grid.size == 0:
        raise ContractError("refusing to save an empty grid")
    if not np.issubdtype(grid.dtype, np.number) or np.iscomplexobj(grid):
        raise ContractError(f"only real grids can be saved, got {grid.dtype}")
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    header = _HEAD.pack(MAGIC, FORMAT_VERSION, grid.ndim)
    header += struct.pack(f"<{grid.ndim}I", *grid.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_tensor(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise TensorFormatError(f"{path}: file too short for a header")
    magic, version, rank = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported format version {version}")
    offset = _HEAD.size + 4 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", raw, _HEAD.size)
    n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
    payload = raw[offset:offset + n_bytes]
    trailer = raw[offset + n_bytes:]
    if len(payload) != n_bytes or len(trailer) != 4:
        raise TensorFormatError(
            f"{path}: checksum mismatch (payload length {len(payload)} != {n_bytes})"
        )
    (crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload) != crc:
        raise TensorFormatError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
