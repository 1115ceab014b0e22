import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maple.core import (
    ABSENT,
    FINDINGS,
    PRESENT,
    REGIONS,
    ROUTING,
    ContractError,
    EmbeddingVec,
    FindingLabel,
    PairedSample,
    Patch,
    RegionMask,
    Sentence,
    TensorFormatError,
    Volume,
    cosine_matrix,
    cosine_sim,
    load_tensor,
    save_tensor,
    sq_l2,
)


def test_routing_covers_every_finding():
    assert set(ROUTING) == set(FINDINGS)
    assert set(ROUTING.values()) == set(REGIONS)
    assert ROUTING["calcification"] == ROUTING["stenosis"] == "arteries"


def test_cosine_examples():
    e1 = np.array([1.0, 0.0])
    assert cosine_sim(e1, e1) == pytest.approx(1.0)
    assert cosine_sim(e1, -e1) == pytest.approx(-1.0)
    assert cosine_sim([1, 0], [1, 1]) == pytest.approx(1 / np.sqrt(2), abs=1e-8)


def test_cosine_rejects_zero_and_mismatch():
    with pytest.raises(ContractError):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(ContractError):
        cosine_sim([1, 0], [1, 0, 0])


def test_sq_l2_examples():
    v = np.array([0.3, -2.0])
    assert sq_l2(v, v) == 0.0
    assert sq_l2([0, 0], [1, 0]) == 1.0
    assert sq_l2([1, 2], [4, 6]) == 25.0


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_cosine_is_bounded_and_symmetric(u, v):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    c = cosine_sim(u, v)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(cosine_sim(v, u))


def test_cosine_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    m = cosine_matrix(a, b)
    for i in range(4):
        for j in range(3):
            assert m[i, j] == pytest.approx(cosine_sim(a[i], b[j]))


def test_tensor_round_trip(tmp_path):
    grid = np.random.default_rng(1).random((4, 4, 4)).astype(np.float32)
    save_tensor(tmp_path / "g.mapl", grid)
    out = load_tensor(tmp_path / "g.mapl")
    assert out.shape == (4, 4, 4)
    assert np.array_equal(out, grid)


def test_tensor_layout_is_documented_format(tmp_path):
    grid = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_tensor(tmp_path / "g.mapl", grid)
    raw = (tmp_path / "g.mapl").read_bytes()
    assert raw[:4] == b"MAPL"
    version, rank = struct.unpack_from("<HB", raw, 4)
    assert (version, rank) == (1, 2)
    assert struct.unpack_from("<2I", raw, 7) == (2, 3)
    payload = raw[15:-4]
    assert np.array_equal(np.frombuffer(payload, "<f4"), grid.ravel())
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(payload)


def test_truncated_payload_is_a_checksum_error(tmp_path):
    save_tensor(tmp_path / "g.mapl", np.ones((4, 4, 4)))
    raw = (tmp_path / "g.mapl").read_bytes()
    (tmp_path / "g.mapl").write_bytes(raw[:-10])
    with pytest.raises(TensorFormatError, match="checksum"):
        load_tensor(tmp_path / "g.mapl")


def test_flipped_byte_is_detected(tmp_path):
    save_tensor(tmp_path / "g.mapl", np.ones((2, 2)))
    raw = bytearray((tmp_path / "g.mapl").read_bytes())
    raw[20] ^= 0xFF
    (tmp_path / "g.mapl").write_bytes(bytes(raw))
    with pytest.raises(TensorFormatError):
        load_tensor(tmp_path / "g.mapl")


def test_bad_magic(tmp_path):
    (tmp_path / "g.mapl").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(TensorFormatError, match="magic"):
        load_tensor(tmp_path / "g.mapl")


def test_empty_grid_is_rejected(tmp_path):
    with pytest.raises(ContractError):
        save_tensor(tmp_path / "g.mapl", np.zeros((0, 3)))


def test_volume_validation():
    v = Volume(np.full((3, 4, 5), 0.5))
    assert v.shape == (3, 4, 5) and v.data.dtype == np.float32
    assert not v.data.flags.writeable
    with pytest.raises(ContractError):
        Volume(np.full((3, 3, 3), 1.5))
    with pytest.raises(ContractError):
        Volume(np.zeros((3, 3)))
    with pytest.raises(ContractError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))


def test_region_mask():
    labels = np.zeros((4, 4, 4), dtype=int)
    labels[0, 0, 0], labels[1, 1, 1], labels[2, 2, 2] = 1, 2, 3
    m = RegionMask(labels)
    assert m.label_of("myocardium") == 2
    assert m.region("aorta_tp").sum() == 1
    with pytest.raises(ContractError):
        m.label_of("liver")
    labels[2, 2, 2] = 0
    with pytest.raises(ContractError, match="without voxels"):
        RegionMask(labels)


def test_patch_and_labels():
    p = Patch(np.zeros((4, 4, 4)), "arteries", (1.0, 2.0, 3.0))
    assert p.size == 4 and p.center == (1, 2, 3)
    with pytest.raises(ContractError):
        Patch(np.zeros((4, 4, 3)), "arteries", (0, 0, 0))
    with pytest.raises(ContractError):
        FindingLabel("fracture", PRESENT)
    with pytest.raises(ContractError):
        FindingLabel("stenosis", "maybe")
    with pytest.raises(ContractError):
        Sentence("   ")
    with pytest.raises(ContractError):
        EmbeddingVec([1.0, np.nan])
    with pytest.raises(ContractError):
        PairedSample("s", "v", "m", ground_truth={"stenosis": ABSENT})
