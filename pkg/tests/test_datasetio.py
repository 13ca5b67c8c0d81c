import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from communext import datasetio
from communext.datasetio import CorruptContainer, DatasetError, SplitSpec
from communext.propagation import CANONICAL_ANGLES


def _same_sample(a, b):
    assert a.sample_id == b.sample_id
    assert a.tx == b.tx
    assert a.building.heights.tobytes() == b.building.heights.tobytes()
    assert a.coverage.tobytes() == b.coverage.tobytes()
    assert a.classes.tobytes() == b.classes.tobytes()
    for ang in CANONICAL_ANGLES:
        assert a.directional[ang].tobytes() == b.directional[ang].tobytes()
        assert a.sparse_7g[ang].values.tobytes() == b.sparse_7g[ang].values.tobytes()
        assert a.sparse_7g[ang].sample_mask.tobytes() == b.sparse_7g[ang].sample_mask.tobytes()
    assert sorted(a.sparse_cov) == sorted(b.sparse_cov)
    for k in a.sparse_cov:
        assert a.sparse_cov[k].values.tobytes() == b.sparse_cov[k].values.tobytes()
    assert a.seeds == b.seeds


def test_valid_samples_pass(tiny_samples):
    assert all(datasetio.validate_sample(s) is None for s in tiny_samples)


def test_missing_direction_rejected(tiny_samples):
    s = tiny_samples[0]
    d = dict(s.directional)
    del d[180]
    why = datasetio.validate_sample(dataclasses.replace(s, directional=d))
    assert why == "missing direction 180"


def test_shape_mismatch_rejected(tiny_samples):
    s = tiny_samples[0]
    why = datasetio.validate_sample(dataclasses.replace(s, coverage=np.zeros((64, 64))))
    assert why.startswith("shape mismatch")


def test_unsampled_not_floor_rejected(tiny_samples):
    s = tiny_samples[0]
    sm = s.sparse_7g[0]
    bad = sm.values.copy()
    bad[sm.sample_mask == 0] = -100
    sd = {**s.sparse_7g, 0: dataclasses.replace(sm, values=bad)}
    assert "unsampled" in datasetio.validate_sample(dataclasses.replace(s, sparse_7g=sd))


def test_round_trip_bit_exact(tiny_samples, tmp_path):
    path = tmp_path / "d.cuxd"
    manifest = datasetio.write_dataset(tiny_samples[:5], path, extra={"note": "x"})
    back, m2 = datasetio.read_dataset(path, with_manifest=True)
    assert len(back) == 5
    for a, b in zip(tiny_samples[:5], back):
        _same_sample(a, b)
    assert m2 == manifest
    assert m2["count"] == len(m2["samples"]) == 5
    assert m2["shapes"] == ["32x32"]
    assert m2["manifest_hash"] == datasetio.manifest_hash(m2)


def test_manifest_hash_reproducible(tiny_samples, tmp_path):
    a = datasetio.write_dataset(tiny_samples, tmp_path / "a.cuxd")
    b = datasetio.write_dataset(tiny_samples, tmp_path / "b.cuxd")
    assert a["manifest_hash"] == b["manifest_hash"]
    assert (tmp_path / "a.cuxd").read_bytes() == (tmp_path / "b.cuxd").read_bytes()


def test_write_rejects_invalid(tiny_samples, tmp_path):
    s = dataclasses.replace(tiny_samples[0], coverage=None)
    with pytest.raises(DatasetError):
        datasetio.write_dataset([s], tmp_path / "x.cuxd")
    assert not (tmp_path / "x.cuxd").exists()


@pytest.mark.parametrize("cut", [3, 9, 20, 500, -13, -1])
def test_truncated_file_is_corrupt(tiny_samples, tmp_path, cut):
    path = tmp_path / "d.cuxd"
    datasetio.write_dataset(tiny_samples[:2], path)
    data = path.read_bytes()
    path.write_bytes(data[:cut] if cut > 0 else data[:len(data) + cut])
    with pytest.raises(CorruptContainer):
        datasetio.read_dataset(path)


def test_bad_magic_reports_offset(tiny_samples, tmp_path):
    path = tmp_path / "d.cuxd"
    datasetio.write_dataset(tiny_samples[:1], path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptContainer, match="offset 0"):
        datasetio.read_dataset(path)


def test_record_length_lie_detected(tiny_samples, tmp_path):
    path = tmp_path / "d.cuxd"
    datasetio.write_dataset(tiny_samples[:1], path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, 9, 10**8)
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptContainer, match="offset 9"):
        datasetio.read_dataset(path)


def test_header_layout(tiny_samples, tmp_path):
    path = tmp_path / "d.cuxd"
    datasetio.write_dataset(tiny_samples[:3], path)
    data = path.read_bytes()
    assert data[:4] == b"CUXD" and data[4] == 1
    assert struct.unpack_from("<I", data, 5)[0] == 3
    assert data[-4:] == b"DXUC"


def test_split_ten_parents():
    ids = [f"p{i}" for i in range(10) for _ in range(4)]
    tr, va, te = datasetio.split(ids, SplitSpec(seed=3))
    assert (len(tr), len(va), len(te)) == (28, 8, 4)
    assert datasetio.split(ids, SplitSpec(seed=3)) == (tr, va, te)


def test_split_needs_ten_groups():
    with pytest.raises(DatasetError):
        datasetio.split([f"p{i}" for i in range(9)])


def test_split_ratio_validation():
    with pytest.raises(DatasetError):
        SplitSpec(ratios=(6, 2, 1))


@pytest.mark.parametrize("n,expect", [(10, [7, 2, 1]), (11, [8, 2, 1]), (13, [9, 3, 1]),
                                      (60, [42, 12, 6]), (15, [11, 3, 1])])
def test_largest_remainder(n, expect):
    assert datasetio._largest_remainder(n, (7, 2, 1)) == expect


def test_split_disjoint_over_100_seeds():
    ids = [f"p{i:03d}" for i in range(23) for _ in range(4)]
    for seed in range(100):
        parts = datasetio.split(ids, SplitSpec(seed=seed))
        groups = [{ids[i] for i in p} for p in parts]
        assert not (groups[0] & groups[2]) and not (groups[0] & groups[1])
        assert not (groups[1] & groups[2])
        assert sum(map(len, parts)) == len(ids)


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 60), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_split_property(n_groups, crops, seed):
    ids = [f"g{i}" for i in range(n_groups) for _ in range(crops)]
    parts = datasetio.split(ids, SplitSpec(seed=seed))
    assert sorted(i for p in parts for i in p) == list(range(len(ids)))
    owners = {}
    for k, p in enumerate(parts):
        for i in p:
            assert owners.setdefault(ids[i], k) == k
    assert [len({ids[i] for i in p}) for p in parts] == datasetio._largest_remainder(
        n_groups, (7, 2, 1))
