"""Samples, group-disjoint splits, and the CUXD binary container.

Container layout (all integers little-endian)::

    b"CUXD" | u8 version | u32 record_count
    record_count x ( u32 payload_len | payload )
    manifest JSON (utf-8) | u64 manifest_len | b"DXUC"

payload::

    u32 meta_len | meta JSON | u16 n_grids
    n_grids x ( u16 name_len | name | u32 H | u32 W | H*W float32 )
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .propagation import CANONICAL_ANGLES, FLOOR_DBM
from .sampling import SparseMap
from .scene import BuildingMap, TxConfig

MAGIC = b"CUXD"
END_MAGIC = b"DXUC"
VERSION = 1


class DatasetError(ValueError):
    pass


class CorruptContainer(DatasetError):
    pass


@dataclass
class Sample:
    building: BuildingMap
    tx: TxConfig
    coverage: np.ndarray | None
    directional: dict[int, np.ndarray]
    classes: np.ndarray | None
    sparse_7g: dict[int, SparseMap] = field(default_factory=dict)
    sparse_cov: dict[str, SparseMap] = field(default_factory=dict)
    crop: int = 0
    seeds: dict = field(default_factory=dict)

    @property
    def parent_id(self) -> str:
        return self.building.parent_id

    @property
    def sample_id(self) -> str:
        return f"{self.parent_id}/{self.crop}"

    @property
    def directions(self) -> np.ndarray:
        """(8, H, W) ground truth in canonical angle order."""
        return np.stack([self.directional[a] for a in CANONICAL_ANGLES])


def validate_sample(s: Sample) -> str | None:
    """None if the sample is usable, otherwise the first violated condition."""
    if s.building is None:
        return "missing building map"
    if s.coverage is None:
        return "missing coverage map"
    for a in CANONICAL_ANGLES:
        if a not in s.directional or s.directional[a] is None:
            return f"missing direction {a}"
    if s.classes is None:
        return "missing mask map"
    shape = s.building.shape
    grids = {"coverage": s.coverage, "classes": s.classes,
             **{f"direction {a}": s.directional[a] for a in CANONICAL_ANGLES}}
    for k, sm in {**{f"sparse_7g {a}": v for a, v in s.sparse_7g.items()},
                  **{f"sparse_cov {n}": v for n, v in s.sparse_cov.items()}}.items():
        grids[k] = sm.values
        grids[k + " mask"] = sm.sample_mask
    for name, g in grids.items():
        if np.shape(g) != shape:
            return f"shape mismatch: {name} {np.shape(g)} vs building {shape}"
    bld = s.building.occupied
    for name in ["coverage", *(f"direction {a}" for a in CANONICAL_ANGLES)]:
        g = grids[name]
        if np.any(g < FLOOR_DBM):
            return f"{name} has values below {FLOOR_DBM} dBm"
        if np.any(g[bld] != FLOOR_DBM):
            return f"{name} building pixels not at {FLOOR_DBM} dBm"
    if np.any((s.classes == 2) != bld):
        return "mask map building class disagrees with building map"
    for k, sm in {**{f"sparse_7g {a}": v for a, v in s.sparse_7g.items()},
                  **{f"sparse_cov {n}": v for n, v in s.sparse_cov.items()}}.items():
        if np.any(sm.values[sm.sample_mask == 0] != FLOOR_DBM):
            return f"{k}: unsampled cells not at {FLOOR_DBM} dBm"
    return None


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (7, 2, 1)
    seed: int = 0

    def __post_init__(self):
        if sum(self.ratios) != 10 or min(self.ratios) < 0:
            raise DatasetError(f"split ratios {self.ratios} must be non-negative and sum to 10")


def _largest_remainder(n: int, ratios) -> list[int]:
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def split(samples, spec: SplitSpec = SplitSpec()) -> tuple[list[int], list[int], list[int]]:
    """Train/val/test index lists; every crop of a parent lands in one split."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        pid = s if isinstance(s, str) else s.parent_id
        groups.setdefault(pid, []).append(i)
    keys = sorted(groups)
    if len(keys) < 10:
        raise DatasetError(f"need at least 10 parent scenes to split, got {len(keys)}")
    rng = np.random.default_rng(spec.seed)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    n_train, n_val, _ = _largest_remainder(len(keys), spec.ratios)
    parts = (keys[:n_train], keys[n_train:n_train + n_val], keys[n_train + n_val:])
    return tuple(sorted(i for k in part for i in groups[k]) for part in parts)


# --- container -------------------------------------------------------------

def _grids(s: Sample) -> dict[str, np.ndarray]:
    g = {"B": s.building.heights, "S_c": s.coverage, "classes": s.classes}
    for a in CANONICAL_ANGLES:
        g[f"S_d{a}"] = s.directional.get(a)
    for a, sm in sorted(s.sparse_7g.items()):
        g[f"sd7/{a}/values"] = sm.values
        g[f"sd7/{a}/mask"] = sm.sample_mask
    for name, sm in sorted(s.sparse_cov.items()):
        g[f"sc/{name}/values"] = sm.values
        g[f"sc/{name}/mask"] = sm.sample_mask
    return g


def _meta(s: Sample) -> dict:
    return {"parent_id": s.parent_id, "crop": s.crop, "resolution": s.building.resolution,
            "tx": {"position": list(s.tx.position), "height": s.tx.height,
                   "gain_3g5": s.tx.gain_3g5, "gain_7g": s.tx.gain_7g},
            "seeds": s.seeds}


def encode_record(meta: dict, grids: dict[str, np.ndarray]) -> bytes:
    mb = json.dumps(meta, sort_keys=True).encode()
    parts = [struct.pack("<I", len(mb)), mb, struct.pack("<H", len(grids))]
    for name, arr in grids.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 2:
            raise DatasetError(f"grid {name!r} must be 2-D, got {arr.shape}")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<II", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_record(buf: bytes, base: int = 0) -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptContainer(f"record truncated at offset {base + pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(mlen))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptContainer(f"bad record metadata at offset {base + 4}: {e}") from None
    (ng,) = struct.unpack("<H", take(2))
    grids = {}
    for _ in range(ng):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode()
        h, w = struct.unpack("<II", take(8))
        grids[name] = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
    if pos != len(buf):
        raise CorruptContainer(f"{len(buf) - pos} trailing bytes in record at offset {base}")
    return meta, grids


def _encode(s: Sample) -> bytes:
    return encode_record(_meta(s), {k: v for k, v in _grids(s).items() if v is not None})


def _to_sample(meta: dict, grids: dict[str, np.ndarray]) -> Sample:
    t = meta["tx"]
    tx = TxConfig(tuple(t["position"]), t["height"], t["gain_3g5"], t["gain_7g"])
    sd7, scov = {}, {}
    for name in grids:
        if name.startswith("sd7/") and name.endswith("/values"):
            a = int(name.split("/")[1])
            sd7[a] = SparseMap(grids[name], grids[f"sd7/{a}/mask"].astype(np.uint8))
        elif name.startswith("sc/") and name.endswith("/values"):
            n = name.split("/")[1]
            scov[n] = SparseMap(grids[name], grids[f"sc/{n}/mask"].astype(np.uint8))
    directional = {a: grids[f"S_d{a}"] for a in CANONICAL_ANGLES if f"S_d{a}" in grids}
    classes = grids.get("classes")
    return Sample(
        building=BuildingMap(grids["B"], meta["resolution"], meta["parent_id"]),
        tx=tx, coverage=grids.get("S_c"), directional=directional,
        classes=None if classes is None else classes.astype(np.uint8),
        sparse_7g=sd7, sparse_cov=scov, crop=meta["crop"], seeds=meta["seeds"])


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def write_records(path, records: list[bytes], manifest: dict) -> dict:
    """Write pre-encoded records plus a manifest (count and hash filled in)."""
    manifest = {**manifest, "format": "CUXD", "version": VERSION, "count": len(records)}
    manifest["manifest_hash"] = manifest_hash(manifest)
    mbytes = json.dumps(manifest, sort_keys=True, indent=1).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<BI", VERSION, len(records)))
        for r in records:
            f.write(struct.pack("<I", len(r)))
            f.write(r)
        f.write(mbytes)
        f.write(struct.pack("<Q", len(mbytes)) + END_MAGIC)
    os.replace(tmp, path)
    return manifest


def read_records(path) -> tuple[list[tuple[dict, dict]], dict]:
    """All (meta, grids) records and the manifest; raises CorruptContainer."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 9 or data[:4] != MAGIC:
        raise CorruptContainer(f"{path}: bad magic at offset 0 (expected {MAGIC!r})")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise CorruptContainer(f"{path}: unsupported version {version} at offset 4")
    pos = 9
    records = []
    for i in range(count):
        if pos + 4 > len(data):
            raise CorruptContainer(f"{path}: record {i} length missing at offset {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        if pos + 4 + n > len(data):
            raise CorruptContainer(f"{path}: record {i} at offset {pos} claims {n} bytes, "
                                   f"only {len(data) - pos - 4} remain")
        records.append(decode_record(data[pos + 4:pos + 4 + n], pos + 4))
        pos += 4 + n
    tail = data[pos:]
    if len(tail) < 12 or tail[-4:] != END_MAGIC:
        raise CorruptContainer(f"{path}: missing manifest trailer after offset {pos}")
    (mlen,) = struct.unpack("<Q", tail[-12:-4])
    if mlen != len(tail) - 12:
        raise CorruptContainer(f"{path}: manifest length {mlen} disagrees with "
                               f"{len(tail) - 12} bytes at offset {pos}")
    try:
        manifest = json.loads(tail[:mlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptContainer(f"{path}: unreadable manifest at offset {pos}: {e}") from None
    if manifest.get("count") != count:
        raise CorruptContainer(f"{path}: manifest count {manifest.get('count')} != {count} records")
    return records, manifest


def write_dataset(samples, path, extra: dict | None = None, validate: bool = True) -> dict:
    """Write samples to a CUXD container; returns the manifest.

    ``validate=False`` is for scene-only containers written before simulation.
    """
    for i, s in enumerate(samples):
        if validate and (why := validate_sample(s)):
            raise DatasetError(f"sample {i} ({s.sample_id}) invalid: {why}")
    manifest = {
        "shapes": sorted({"{}x{}".format(*s.building.shape) for s in samples}),
        "samples": [{"id": s.sample_id, "parent_id": s.parent_id, "crop": s.crop,
                     "seeds": s.seeds, "grids": sorted(k for k, v in _grids(s).items()
                                                       if v is not None)}
                    for s in samples],
        **(extra or {}),
    }
    return write_records(path, [_encode(s) for s in samples], manifest)


def read_manifest(path) -> dict:
    return read_records(path)[1]


def read_dataset(path, with_manifest: bool = False):
    records, manifest = read_records(path)
    samples = [_to_sample(m, g) for m, g in records]
    return (samples, manifest) if with_manifest else samples
