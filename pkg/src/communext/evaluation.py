"""dB-domain metrics, box statistics, sampling-category breakdown, IDW baseline."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .propagation import FLOOR_DBM
from .sampling import COMMUNICABLE_DBM

CATEGORIES = ("both", "only_3g5", "only_7g", "neither")
QUANTILE_RULE = "linear interpolation at (n-1)*q on sorted data"


def communicable_mask(truth) -> np.ndarray:
    """Per-direction mask of ground-truth pixels >= -90 dBm."""
    return np.asarray(truth) >= COMMUNICABLE_DBM


def _errors(pred, truth, region):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} vs truth {truth.shape}")
    err = pred - truth
    if region is None:
        return err.ravel()
    return err[np.broadcast_to(np.asarray(region, dtype=bool), err.shape)]


def mae(pred, truth, region=None) -> float | None:
    """Mean absolute error in dB over region pixels of all directions; None if empty."""
    e = _errors(pred, truth, region)
    return float(np.mean(np.abs(e))) if e.size else None


def rmse(pred, truth, region=None) -> float | None:
    e = _errors(pred, truth, region)
    return float(np.sqrt(np.mean(e * e))) if e.size else None


def error_map(pred, truth, direction: int) -> np.ndarray:
    """|pred - truth| in dB for one direction index of (8, H, W) stacks."""
    return np.abs(np.asarray(pred, dtype=np.float64)[direction]
                  - np.asarray(truth, dtype=np.float64)[direction])


@dataclass
class BoxStats:
    q1: float
    median: float
    q3: float
    iqr: float
    lower_whisker: float
    upper_whisker: float
    n: int
    outliers: list


def box_stats(values) -> BoxStats:
    v = np.sort(np.asarray([x for x in values if x is not None], dtype=np.float64))
    if v.size < 4:
        raise ValueError(f"box statistics need at least 4 values, got {v.size}")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return BoxStats(float(q1), float(med), float(q3), float(iqr), float(inside.min()),
                    float(inside.max()), int(v.size), [float(x) for x in v if x < lo or x > hi])


def pixel_categories(sparse_3g5_mask, sparse_7g_masks) -> np.ndarray:
    """(H, W) category index into CATEGORIES.

    A pixel counts as 7 GHz-assisted when sampled in any directional map.
    """
    has3 = np.asarray(sparse_3g5_mask).astype(bool)
    m7 = np.asarray(sparse_7g_masks)
    has7 = m7.astype(bool).any(axis=0) if m7.size else np.zeros_like(has3)
    cat = np.full(has3.shape, 3, dtype=np.int8)
    cat[has3 & has7] = 0
    cat[has3 & ~has7] = 1
    cat[~has3 & has7] = 2
    return cat


def category_breakdown(pred, truth, sparse_3g5_mask, sparse_7g_masks, region) -> dict:
    """Per-category MAE / RMSE (and pixel-direction counts) for one map."""
    cat = pixel_categories(sparse_3g5_mask, sparse_7g_masks)
    region = np.asarray(region, dtype=bool)
    out = {}
    for i, name in enumerate(CATEGORIES):
        r = region & (cat == i)[None]
        out[name] = {"mae": mae(pred, truth, r), "rmse": rmse(pred, truth, r),
                     "count": int(r.sum())}
    return out


def idw_baseline(sparse_values, sparse_masks, building, power: float = 2.0):
    """Per-direction inverse-distance interpolation of sampled values.

    Samples on building pixels carry the sentinel, not a measurement, and are
    ignored. Returns (maps, empty_directions); an empty direction is filled with
    the mean of every direction's samples.
    """
    vals = np.asarray(sparse_values, dtype=np.float64)
    masks = np.asarray(sparse_masks).astype(bool)
    bld = np.asarray(building).astype(bool)
    D, H, W = vals.shape
    rows, cols = np.indices((H, W))
    qr, qc = rows[~bld].astype(np.float64), cols[~bld].astype(np.float64)
    out = np.full((D, H, W), FLOOR_DBM)
    usable = masks & ~bld[None]
    pooled = vals[usable]
    empty = []
    for d in range(D):
        sr, sc = np.nonzero(usable[d])
        if sr.size == 0:
            empty.append(d)
            out[d][~bld] = pooled.mean() if pooled.size else FLOOR_DBM
            continue
        sv = vals[d, sr, sc]
        dist2 = (qr[:, None] - sr[None]) ** 2 + (qc[:, None] - sc[None]) ** 2
        exact = dist2 == 0
        with np.errstate(divide="ignore"):
            w = dist2 ** (-power / 2)
        w[exact] = 0.0
        est = (w @ sv) / w.sum(axis=1).clip(min=np.finfo(float).tiny)
        hit = exact.any(axis=1)
        est[hit] = sv[exact[hit].argmax(axis=1)]
        out[d][~bld] = est
    return out.astype(np.float32), empty


# --- reports -----------------------------------------------------------------

@dataclass
class MapResult:
    map_id: str
    mae: float | None
    rmse: float | None
    region_size: int
    categories: dict


def evaluate_map(map_id, pred, truth, sparse_3g5_mask, sparse_7g_masks) -> MapResult:
    region = communicable_mask(truth)
    return MapResult(map_id, mae(pred, truth, region), rmse(pred, truth, region),
                     int(region.sum()),
                     category_breakdown(pred, truth, sparse_3g5_mask, sparse_7g_masks, region))


def summarize(results: list[MapResult]) -> dict:
    def stats(vals):
        vals = [v for v in vals if v is not None]
        return asdict(box_stats(vals)) if len(vals) >= 4 else None

    defined = [r for r in results if r.mae is not None]
    cat_medians = {}
    for name in CATEGORIES:
        m = [r.categories[name]["mae"] for r in results if r.categories[name]["mae"] is not None]
        s = [r.categories[name]["rmse"] for r in results if r.categories[name]["rmse"] is not None]
        cat_medians[name] = {"mae_median": float(np.median(m)) if m else None,
                             "rmse_median": float(np.median(s)) if s else None,
                             "maps": len(m)}
    return {
        "maps": len(results),
        "undefined_maps": [r.map_id for r in results if r.mae is None],
        "mae_median": float(np.median([r.mae for r in defined])) if defined else None,
        "rmse_median": float(np.median([r.rmse for r in defined])) if defined else None,
        "mae_box": stats([r.mae for r in results]),
        "rmse_box": stats([r.rmse for r in results]),
        "category_medians": cat_medians,
        "mae_le_rmse": all(r.mae <= r.rmse + 1e-12 for r in defined),
        "quantile_rule": QUANTILE_RULE,
    }


def _fmt(v):
    return "undefined" if v is None else f"{v:.6f}"


def write_report(results: list[MapResult], csv_path, json_path, extra: dict | None = None,
                 header: str | None = None) -> dict:
    cols = ["map_id", "mae", "rmse", "region_size"]
    for name in CATEGORIES:
        cols += [f"{name}_mae", f"{name}_rmse", f"{name}_count"]
    with open(csv_path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in results:
            row = [r.map_id, _fmt(r.mae), _fmt(r.rmse), r.region_size]
            for name in CATEGORIES:
                c = r.categories[name]
                row += [_fmt(c["mae"]), _fmt(c["rmse"]), c["count"]]
            w.writerow(row)
    summary = {**summarize(results), **(extra or {})}
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
