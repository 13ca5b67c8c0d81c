"""Grid line-of-sight and the LoS / NLoS / building classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import BuildingMap, TxConfig

LOS, NLOS, BUILDING = 0, 1, 2


class GeometryError(ValueError):
    pass


def bresenham_cells(p0: tuple[int, int], p1: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer line from p0 to p1, both ends included, in traversal order.

    Steps along the major axis; the minor axis advances when the error term
    turns positive, so exact half-way ties stay on the p0 side.
    """
    r0, c0 = p0
    r1, c1 = p1
    dr, dc = r1 - r0, c1 - c0
    sr, sc = (dr > 0) - (dr < 0), (dc > 0) - (dc < 0)
    ar, ac = abs(dr), abs(dc)
    if ar >= ac:
        major, minor, smaj, smin, row_major = ar, ac, sr, sc, True
    else:
        major, minor, smaj, smin, row_major = ac, ar, sc, sr, False
    cells = []
    a = b = 0
    err = 2 * minor - major
    for _ in range(major + 1):
        cells.append((r0 + a * smaj, c0 + b * smin) if row_major else (r0 + b * smin, c0 + a * smaj))
        if err > 0:
            b += 1
            err -= 2 * major
        err += 2 * minor
        a += 1
    return cells


def _line_offsets(dr: np.ndarray, dc: np.ndarray, k: int):
    """Cell offsets at step k of the Bresenham walk, for many targets at once."""
    ar, ac = np.abs(dr), np.abs(dc)
    row_major = ar >= ac
    major = np.where(row_major, ar, ac)
    minor = np.where(row_major, ac, ar)
    safe = np.maximum(major, 1)
    # closed form of the error-term walk: round half towards p0
    moff = (2 * k * minor + safe - 1) // (2 * safe)
    rr = np.where(row_major, k, moff) * np.sign(dr)
    cc = np.where(row_major, moff, k) * np.sign(dc)
    return rr, cc, k <= major


def blocking_counts(occupied: np.ndarray, tx: tuple[int, int]) -> np.ndarray:
    """Number of occupied cells on the line Tx -> pixel, Tx cell excluded, per pixel."""
    H, W = occupied.shape
    r0, c0 = tx
    rows, cols = np.indices((H, W))
    dr, dc = rows - r0, cols - c0
    counts = np.zeros((H, W), dtype=np.int32)
    n_max = int(max(np.abs(dr).max(), np.abs(dc).max()))
    for k in range(1, n_max + 1):
        rr, cc, live = _line_offsets(dr, dc, k)
        hit = occupied[np.clip(r0 + rr, 0, H - 1), np.clip(c0 + cc, 0, W - 1)] & live
        counts += hit
    return counts


def los_mask(bmap: BuildingMap, tx: TxConfig) -> np.ndarray:
    """Binary LoS map: 1 where no building cell (Tx excluded) lies on the line."""
    r, c = tx.position
    H, W = bmap.shape
    if not (0 <= r < H and 0 <= c < W):
        raise GeometryError(f"Tx {tx.position} outside grid {H}x{W}")
    if bmap.heights[r, c] > 0:
        raise GeometryError(f"Tx {tx.position} is on a building cell")
    return (blocking_counts(bmap.occupied, tx.position) == 0).astype(np.uint8)


@dataclass
class MaskMap:
    classes: np.ndarray

    @property
    def los(self) -> np.ndarray:
        return (self.classes == LOS).astype(np.uint8)

    @property
    def nlos(self) -> np.ndarray:
        return (self.classes == NLOS).astype(np.uint8)

    @property
    def building(self) -> np.ndarray:
        return (self.classes == BUILDING).astype(np.uint8)


def classify(bmap: BuildingMap, los: np.ndarray) -> MaskMap:
    if los.shape != bmap.shape:
        raise GeometryError(f"LoS shape {los.shape} != building map {bmap.shape}")
    classes = np.where(los.astype(bool), LOS, NLOS).astype(np.uint8)
    classes[bmap.occupied] = BUILDING
    return MaskMap(classes)


def compute_masks(bmap: BuildingMap, tx: TxConfig) -> MaskMap:
    return classify(bmap, los_mask(bmap, tx))
