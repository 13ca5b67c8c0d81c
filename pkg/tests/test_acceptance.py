"""Acceptance gates. Each test is tagged with the criterion it checks; the terminal
summary prints one PASS/FAIL line per criterion."""

import json
import time

import numpy as np
import pytest

import oracles
from communext import cli, geometry, models, sampling
from communext import evaluation as ev
from communext.datasetio import SplitSpec, split
from communext.geometry import BUILDING, LOS, NLOS
from communext.models import Batch, CommUNext, ModelConfig
from communext.nncore import (Tensor, add, affine, batchnorm, bce, concat_channels, conv2d,
                              maxpool2, mse_db, relu, scale, sigmoid, tconv2)
from communext.nncore.gradcheck import check_gradients
from communext.pipeline import (SEED_MODEL, SEED_SPLIT, SEED_TRAIN, derive_seed, generate_scenes,
                                load_config, sample_sparse, simulate)
from conftest import random_scene, tx_at

GRAD_TOL = 1e-4

# end-to-end settings; everything not listed here is the pipeline default
# (64x64 patches, N_d=200, N_c=1000, gamma=0.9, lambda_seg=0.3, lambda_cov=0.5)
E2E_PARENTS = 60
E2E_EPOCHS = 20
E2E_LR = 2e-3


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# --- criterion 1 -------------------------------------------------------------

def _op_cases(rng):
    n = rng.standard_normal
    x, w, b = T(n((2, 2, 5, 5))), T(n((3, 2, 3, 3))), T(n(3))
    g, be = T(n(2)), T(n(2))
    xt, wt, bt = T(n((2, 2, 4, 6))), T(n((2, 3, 2, 2))), T(n(3))
    y = T(n((2, 1, 4, 6)))
    z = n((2, 3, 4, 4))
    z[np.abs(z) < 1e-3] = 0.5
    zt = T(z)
    u, v = T(n((2, 3))), T(n((2, 3)))
    tgt = lambda shape: n(shape)
    p = T(n((2, 1, 3, 3)))
    lab = (rng.random((2, 1, 3, 3)) < 0.5).astype(float)
    t_conv, t_bn, t_pool = tgt((2, 3, 5, 5)), tgt((2, 2, 5, 5)), tgt((2, 2, 2, 3))
    t_tc, t_cat, t_z, t_uv = tgt((2, 3, 8, 12)), tgt((2, 3, 4, 6)), tgt(z.shape), tgt((2, 3))
    rm, rv = np.zeros(2), np.ones(2)
    return {
        "conv2d": (lambda: mse_db(conv2d(x, w, b), t_conv), [x, w, b]),
        "batchnorm_train": (lambda: mse_db(batchnorm(x, g, be, rm, rv, True), t_bn), [x, g, be]),
        "batchnorm_eval": (lambda: mse_db(batchnorm(x, g, be, np.array([0.2, -0.1]),
                                                    np.array([1.3, 0.7]), False), t_bn),
                           [x, g, be]),
        "maxpool2": (lambda: mse_db(maxpool2(xt), t_pool), [xt]),
        "tconv2": (lambda: mse_db(tconv2(xt, wt, bt), t_tc), [xt, wt, bt]),
        "concat": (lambda: mse_db(concat_channels(xt, y), t_cat), [xt, y]),
        "relu": (lambda: mse_db(relu(zt), t_z), [zt]),
        "sigmoid": (lambda: mse_db(sigmoid(zt), t_z), [zt]),
        "add_scale_affine": (lambda: mse_db(affine(add(u, scale(v, 0.7)), 1.3, -0.2), t_uv),
                             [u, v]),
        "bce_sigmoid": (lambda: bce(sigmoid(p), lab), [p]),
    }


def _tiny_model_case(variant, coverage, rng):
    cfg = ModelConfig(variant=variant, coverage=coverage, width=2, depth=1, directions=[0, 90])
    m = CommUNext(cfg, dtype=np.float64)
    n, H = 2, 4
    batch = Batch(rng.random((n, cfg.in_channels, H, H)), rng.uniform(-150, -40, (n, 8, H, H)),
                  (rng.random((n, 1, H, H)) < 0.5).astype(float),
                  rng.uniform(-150, -40, (n, 1, H, H)))
    return (lambda: models.model_loss(m, m(Tensor(batch.x)), batch)[0]), m.parameters()


@pytest.mark.criterion(1)
def test_gradcheck_all_ops_and_models():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cases = _op_cases(rng)
    cases["model_partial"] = _tiny_model_case("partial", "random", rng)
    cases["model_full_seg"] = _tiny_model_case("full_seg", "full", rng)
    errs = {k: check_gradients(f, ts, h=1e-5) for k, (f, ts) in cases.items()}
    elapsed = time.perf_counter() - t0
    for k, e in errs.items():
        print(f"  gradcheck {k}: max rel err {e:.2e}")
    assert max(errs.values()) < GRAD_TOL, errs
    assert elapsed < 120


# --- criterion 2 -------------------------------------------------------------

@pytest.mark.criterion(2)
def test_mask_partition_and_los_oracle():
    rng = np.random.default_rng(7)
    for i in range(200):
        b = random_scene(rng, 64)
        free = np.argwhere(~b.occupied)
        tx = tx_at(b, tuple(int(v) for v in free[rng.integers(len(free))]))
        mm = geometry.compute_masks(b, tx)
        los, nlos = mm.los.astype(bool), mm.nlos.astype(bool)
        bld = mm.classes == BUILDING
        assert np.array_equal(bld, b.occupied), i
        assert not (los & nlos).any() and not (los & bld).any() and not (nlos & bld).any()
        assert (los | nlos | bld).all()
        want = np.array(oracles.los_grid(b.heights.tolist(), tx.position), dtype=bool)
        assert np.array_equal(geometry.los_mask(b, tx).astype(bool), want), i


# --- criterion 3 -------------------------------------------------------------

@pytest.mark.criterion(3)
def test_sampling_contracts():
    rng = np.random.default_rng(11)
    n, n_c, gamma = 200, 1000, 0.9
    checked = 0
    for i in range(100):
        b = random_scene(rng, 64)
        mm = geometry.compute_masks(b, tx_at(b))
        cls = mm.classes
        src = rng.uniform(-150, -40, cls.shape).astype(np.float32)
        r = sampling.sample_random(src, n, seed=i)
        assert r.count == n
        assert np.array_equal(r.values[r.sample_mask == 1], src[r.sample_mask == 1])
        g = sampling.sample_nlos_guided(src, mm, n, gamma, seed=i)
        assert g.count == n
        m = g.sample_mask.astype(bool)
        n_nlos, n_los = int((cls == NLOS).sum()), int((cls == LOS).sum())
        q = int(np.floor(gamma * n))
        want = n_nlos if q > n_nlos else (n - n_los if n - q > n_los else q)
        assert int((cls[m] == NLOS).sum()) == want
        assert not (cls[m] == BUILDING).any()
        if n_nlos + n_los >= n_c:
            k = sampling.block_map(src, b.occupied, mm, n_c, seed=i)
            assert k.count == n_c
            km = k.sample_mask.astype(bool)
            assert not (cls[km] == BUILDING).any()
            blocks = sampling.top_nlos_blocks(mm)
            assert len(blocks) == sampling.N_BLOCKS
            inside = np.zeros(cls.shape, bool)
            for r0, c0 in blocks:
                inside[r0:r0 + 10, c0:c0 + 10] = True
            if (inside & ~b.occupied).sum() <= n_c:
                assert km[inside & ~b.occupied].all()
            checked += 1
    assert checked > 50
    assert sampling.n_candidate_blocks(128, 128) == 14161
    assert sampling.n_candidate_blocks(64, 64) == 55 * 55


# --- criterion 4 -------------------------------------------------------------

@pytest.mark.criterion(4)
def test_metrics_match_two_loop_oracles():
    rng = np.random.default_rng(12)
    for trial in range(5):
        p = rng.uniform(-160, -30, (8, 16, 16))
        t = rng.uniform(-160, -30, (8, 16, 16))
        region = ev.communicable_mask(t)
        assert abs(ev.mae(p, t, region) - oracles.mae(p, t, region)) < 1e-9
        assert abs(ev.rmse(p, t, region) - oracles.rmse(p, t, region)) < 1e-9
        assert abs(float(mse_db(Tensor(p), t).data) - oracles.mse(p, t)) < 1e-9
        prob = rng.random((2, 1, 16, 16))
        lab = (rng.random((2, 1, 16, 16)) < 0.4).astype(float)
        assert abs(float(bce(Tensor(prob), lab).data) - oracles.bce(prob, lab)) < 1e-9
        d = int(rng.integers(8))
        em = ev.error_map(p, t, d)
        for r in range(16):
            for c in range(16):
                assert abs(em[r, c] - abs(p[d, r, c] - t[d, r, c])) < 1e-9
        m3 = rng.random((16, 16)) < 0.3
        m7 = rng.random((8, 16, 16)) < 0.05
        br = ev.category_breakdown(p, t, m3, m7, region)
        assert sum(v["count"] for v in br.values()) == int(region.sum())
        for name in ev.CATEGORIES:
            sel = [[[bool(region[dd, r, c]) and oracles.category(m3[r, c], m7[:, r, c].any()) == name
                     for c in range(16)] for r in range(16)] for dd in range(8)]
            want = oracles.mae(p, t, sel)
            if want is None:
                assert br[name]["mae"] is None
            else:
                assert abs(br[name]["mae"] - want) < 1e-9
                assert abs(br[name]["rmse"] - oracles.rmse(p, t, sel)) < 1e-9
        res = ev.evaluate_map("m", p, t, m3, m7)
        assert res.mae <= res.rmse


@pytest.mark.criterion(4)
def test_mae_le_rmse_on_every_report(tmp_path):
    rng = np.random.default_rng(13)
    results = [ev.evaluate_map(f"m{i}", rng.uniform(-160, -30, (8, 16, 16)),
                               rng.uniform(-160, -30, (8, 16, 16)),
                               np.zeros((16, 16)), np.zeros((8, 16, 16))) for i in range(8)]
    summary = ev.write_report(results, tmp_path / "r.csv", tmp_path / "s.json")
    assert summary["mae_le_rmse"]
    assert all(r.mae <= r.rmse for r in results)


# --- criterion 5 -------------------------------------------------------------

@pytest.mark.criterion(5)
def test_zero_lambda_losses_are_mse_bitwise(tiny_samples):
    for variant, cov in (("partial", "random"), ("full_seg", "full"), ("full", "full")):
        cfg = ModelConfig(variant=variant, coverage=cov, width=4, depth=2)
        m = CommUNext(cfg)
        b = models.make_batch(tiny_samples[:3], cfg)
        pred = m(Tensor(b.x))
        ref = mse_db(pred["ss"], b.ss).data.tobytes()
        if variant == "partial":
            got, _ = models.loss_partial(pred, b, 0.0, 0.0)
        else:
            got, _ = models.loss_full(pred, b, 0.0)
        assert got.data.tobytes() == ref, variant


# --- criterion 6 -------------------------------------------------------------

@pytest.mark.criterion(6)
@pytest.mark.slow
def test_overfit_four_samples():
    t0 = time.perf_counter()
    cfg = load_config({"scene": {"n_parents": 1, "parent_size": 64, "patch_size": 32},
                       "sampling": {"n_c": 300, "coverage_strategies": ["random"]},
                       "model": {"variant": "full_seg", "coverage": "full", "width": 8,
                                 "depth": 2}})
    samples, _ = sample_sparse(cfg, simulate(cfg, generate_scenes(cfg)))
    assert len(samples) == 4
    res = models.train(samples, cfg.model, epochs=500, batch=4, seed=0, lr=3e-2, max_steps=500)
    steps = [r for r in res.trace if "ss" in r]
    elapsed = time.perf_counter() - t0
    print(f"  overfit: {len(steps)} steps, L_SS {steps[0]['ss']:.1f} -> {steps[-1]['ss']:.3f} "
          f"(min {min(r['ss'] for r in steps):.3f}), {elapsed:.0f}s")
    assert len(steps) <= 500
    assert elapsed < 300
    assert steps[-1]["ss"] < 1.0


# --- criterion 7 -------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    code = cli.main(["all", "--out", str(out), "--threads", "1",
                     "--set", f"scene.n_parents={E2E_PARENTS}",
                     "--set", f"train.epochs={E2E_EPOCHS}", "--set", f"train.lr={E2E_LR}"])
    return code, out, time.perf_counter() - t0


@pytest.mark.criterion(7)
@pytest.mark.slow
def test_partial_beats_idw_end_to_end(e2e_run):
    code, out, elapsed = e2e_run
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    model, idw = summary["mae_median"], summary["baseline"]["mae_median"]
    print(f"  e2e: partial median MAE {model:.3f} dB vs IDW {idw:.3f} dB "
          f"over {summary['maps']} test maps, {elapsed:.0f}s")
    assert summary["predictor"] == "partial"
    assert summary["mae_le_rmse"]
    assert elapsed < 1800
    assert model < idw


# --- criterion 8 (reported, not gating) ---------------------------------------

@pytest.mark.criterion(8)
@pytest.mark.slow
def test_variant_ordering_report():
    cfg = load_config({"scene": {"n_parents": 12}})
    samples, _ = sample_sparse(cfg, simulate(cfg, generate_scenes(cfg)))
    tr, va, te = split(samples, SplitSpec(tuple(cfg.split.ratios),
                                          derive_seed(cfg.seed, SEED_SPLIT)))
    pick = lambda idx: [samples[i] for i in idx]
    train, val, test = pick(tr), pick(va), pick(te)
    setups = {"full(S_c)": ("full", "full"), "partial(block)": ("partial", "block"),
              "partial(random)": ("partial", "random")}
    table = {}
    for name, (variant, cov) in setups.items():
        for seed in range(3):
            mc = ModelConfig(variant=variant, coverage=cov, width=8, depth=2,
                             seed=derive_seed(seed, SEED_MODEL))
            res = models.train(train, mc, epochs=15, batch=8, lr=2e-3,
                               seed=derive_seed(seed, SEED_TRAIN), val_samples=val)
            maes = [ev.mae(p.ss, s.directions, ev.communicable_mask(s.directions))
                    for p, s in zip(models.predict(res.model, test), test)]
            table.setdefault(name, []).append(float(np.median([v for v in maes if v is not None])))
    for name, vals in table.items():
        print(f"  {name}: median MAE per seed " + ", ".join(f"{v:.2f}" for v in vals))
    held = sum(table["full(S_c)"][k] <= table["partial(block)"][k] <= table["partial(random)"][k]
               for k in range(3))
    print(f"  ordering full <= partial(block) <= partial(random) held for {held}/3 seeds")
    assert all(np.isfinite(v) for vals in table.values() for v in vals)


# --- criterion 9 -------------------------------------------------------------

@pytest.mark.criterion(9)
def test_single_thread_reruns_are_byte_identical(tmp_path):
    conf = tmp_path / "tiny.json"
    conf.write_text(json.dumps({
        "scene": {"n_parents": 10, "parent_size": 64, "patch_size": 32},
        "sampling": {"n_d": 50, "n_c": 300,
                     "coverage_strategies": ["random", "nlos_guided", "blend"]},
        "model": {"width": 4, "depth": 2, "coverage": "nlos_guided"},
        "train": {"epochs": 2, "batch": 4}}))
    runs = [tmp_path / "a", tmp_path / "b"]
    for out in runs:
        assert cli.main(["all", "--config", str(conf), "--out", str(out), "--threads", "1"]) == 0
    for name in ("dataset.cuxd", "split.json", "model.cuxw", "predictions.cuxd", "report.csv",
                 "summary.json"):
        a, b = ((r / name).read_bytes() for r in runs)
        assert a == b, name
