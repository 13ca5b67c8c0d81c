import functools
import time

import numpy as np
import pytest

from communext import geometry, scene
from communext.pipeline import generate_scenes, load_config, sample_sparse, simulate

_CRITERIA: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None or report.when == "teardown":
        return
    entry = _CRITERIA.setdefault(crit, {"ok": True, "tests": [], "seconds": 0.0, "notes": []})
    # fixtures may do the heavy lifting, so setup time counts too
    entry["seconds"] += report.duration
    if report.when == "setup" and report.passed:
        return
    entry["ok"] &= report.passed
    entry["tests"].append(report.nodeid.split("::")[-1])
    entry["notes"] += [ln for ln in report.capstdout.splitlines() if ln.startswith("  ")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        e = _CRITERIA[crit]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {crit}: {status} ({', '.join(e['tests'])}; {e['seconds']:.1f}s)")
        for note in e["notes"]:
            terminalreporter.write_line(note)


TINY = {
    "scene": {"n_parents": 3, "parent_size": 64, "patch_size": 32},
    "sampling": {"n_d": 50, "n_c": 300, "coverage_strategies": ["random", "nlos_guided", "blend"]},
    "model": {"variant": "partial", "coverage": "nlos_guided", "width": 4, "depth": 2},
    "train": {"epochs": 1, "batch": 4},
}


@functools.lru_cache(maxsize=None)
def _tiny_samples():
    cfg = load_config(TINY)
    kept, _ = sample_sparse(cfg, simulate(cfg, generate_scenes(cfg)))
    return tuple(kept)


@pytest.fixture
def tiny_samples():
    """Twelve simulated and sampled 32x32 samples (three parents); do not mutate."""
    return list(_tiny_samples())


def random_scene(rng, size=64, density=None) -> scene.BuildingMap:
    """Random rectangle scene with an open centre cell, independent of synth_scene."""
    h = np.zeros((size, size), dtype=np.float32)
    n = rng.integers(0, 25)
    for _ in range(n):
        r, c = rng.integers(0, size, 2)
        hh, ww = rng.integers(1, 9, 2)
        h[r:r + hh, c:c + ww] = rng.uniform(3, 40)
    if density is not None:
        h[rng.random((size, size)) < density] = 10.0
    h[size // 2, size // 2] = 0
    return scene.BuildingMap(h)


def tx_at(bmap, pos=None, height=None) -> scene.TxConfig:
    H, W = bmap.shape
    pos = pos if pos is not None else (H // 2, W // 2)
    return scene.TxConfig(pos, height if height is not None else float(bmap.heights.max()) + 5)


def masks_for(bmap, tx=None):
    return geometry.compute_masks(bmap, tx or tx_at(bmap))


@pytest.fixture
def timer():
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0
