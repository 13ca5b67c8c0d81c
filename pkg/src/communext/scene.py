"""Procedural urban scenes: building-height maps, crops, and Tx placement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_SIDE = 32
MAX_SIDE = 128
# Parent scenes are cropped before they reach a model, so they may be larger.
MAX_PARENT_SIDE = 512
TX_HEIGHT_MARGIN = 5.0


class SceneError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class BuildingMap:
    heights: np.ndarray
    resolution: float = 4.0
    parent_id: str = ""

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float32)
        if self.heights.ndim != 2:
            raise SceneError(f"heights must be 2-D, got shape {self.heights.shape}")
        if np.any(self.heights < 0) or not np.all(np.isfinite(self.heights)):
            raise SceneError("building heights must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def occupied(self) -> np.ndarray:
        return self.heights > 0

    def check_model_grid(self) -> None:
        """Raise unless H and W are powers of two in [32, 128]."""
        for side in self.shape:
            if not (_is_pow2(side) and MIN_SIDE <= side <= MAX_SIDE):
                raise SceneError(
                    f"grid side {side} must be a power of two in [{MIN_SIDE}, {MAX_SIDE}]")


@dataclass(frozen=True)
class TxConfig:
    position: tuple[int, int]
    height: float
    gain_3g5: float = 0.0
    gain_7g: float = 6.0


@dataclass
class SceneParams:
    height: int = 128
    width: int = 128
    density: float = 0.3
    footprint: tuple[int, int] = (4, 10)
    building_height: tuple[float, float] = (10.0, 40.0)
    seed: int = 0
    # half-width of the open square kept around each Tx site
    clearance: int = 2
    max_attempts: int = 20000
    extra_sites: list = field(default_factory=list)

    def validate(self) -> list[str]:
        errs = []
        if not (0 <= self.density < 1):
            errs.append(f"density must be in [0, 1), got {self.density}")
        lo, hi = self.footprint
        if lo < 1 or hi < lo:
            errs.append(f"footprint range {self.footprint} invalid (min >= 1, max >= min)")
        hlo, hhi = self.building_height
        if hlo <= 0 or hhi < hlo:
            errs.append(f"building height range {self.building_height} invalid")
        for side in (self.height, self.width):
            if not (_is_pow2(side) and MIN_SIDE <= side <= MAX_PARENT_SIDE):
                errs.append(f"grid side {side} must be a power of two in "
                            f"[{MIN_SIDE}, {MAX_PARENT_SIDE}]")
        if self.clearance < 0:
            errs.append("clearance must be >= 0")
        return errs


def quadrant_centers(height: int, width: int) -> list[tuple[int, int]]:
    """The four designated Tx sites of a parent map, row-major by quadrant."""
    rs = (height // 4, 3 * height // 4)
    cs = (width // 4, 3 * width // 4)
    return [(r, c) for r in rs for c in cs]


def synth_scene(params: SceneParams) -> BuildingMap:
    """Scatter axis-aligned rectangular buildings until the density target is met.

    The grid centre and the four quadrant centres are kept open (with
    ``params.clearance`` pixels of margin) so that Tx sites on the parent and on
    every crop land on open ground.
    """
    errs = params.validate()
    if errs:
        raise SceneError("; ".join(errs))
    H, W = params.height, params.width
    heights = np.zeros((H, W), dtype=np.float32)
    pid = f"scene-{params.seed}-{H}x{W}"
    if params.density == 0:
        return BuildingMap(heights, parent_id=pid)

    keep_open = np.zeros((H, W), dtype=bool)
    sites = [(H // 2, W // 2), *quadrant_centers(H, W), *map(tuple, params.extra_sites)]
    k = params.clearance
    for r, c in sites:
        keep_open[max(r - k, 0):r + k + 1, max(c - k, 0):c + k + 1] = True

    rng = np.random.default_rng(params.seed)
    lo, hi = params.footprint
    hlo, hhi = params.building_height
    target = params.density
    ceiling = target + 0.05
    filled = 0
    total = H * W
    for _ in range(params.max_attempts):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        r0 = int(rng.integers(0, H - h + 1))
        c0 = int(rng.integers(0, W - w + 1))
        bh = float(np.round(rng.uniform(hlo, hhi), 1))
        block = (slice(r0, r0 + h), slice(c0, c0 + w))
        if keep_open[block].any():
            continue
        new = np.count_nonzero(heights[block] == 0)
        if (filled + new) / total > ceiling:
            continue
        heights[block] = np.maximum(heights[block], bh)
        filled += new
        if filled / total >= target:
            return BuildingMap(heights, parent_id=pid)
    raise SceneError(
        f"density target {target} not reached after {params.max_attempts} placement "
        f"attempts (reached {filled / total:.3f}); lower the density or footprint size")


def crop_patches(bmap: BuildingMap, patch_size: int) -> list[BuildingMap]:
    """Cut four patch_size squares centred on the quadrant centres."""
    H, W = bmap.shape
    half = patch_size // 2
    out = []
    for r, c in quadrant_centers(H, W):
        r0, c0 = r - half, c - half
        if patch_size <= 0 or r0 < 0 or c0 < 0 or r0 + patch_size > H or c0 + patch_size > W:
            raise SceneError(f"patch {patch_size} centred at {(r, c)} exceeds map {H}x{W}")
        out.append(BuildingMap(bmap.heights[r0:r0 + patch_size, c0:c0 + patch_size].copy(),
                               resolution=bmap.resolution, parent_id=bmap.parent_id))
    return out


def downsample(bmap: BuildingMap, factor: int) -> BuildingMap:
    """Block-max pooling by an integer factor (thin blockers survive)."""
    H, W = bmap.shape
    if factor < 1 or H % factor or W % factor:
        raise SceneError(f"map {H}x{W} not divisible by factor {factor}")
    pooled = bmap.heights.reshape(H // factor, factor, W // factor, factor).max(axis=(1, 3))
    return BuildingMap(pooled, resolution=bmap.resolution * factor, parent_id=bmap.parent_id)


def place_tx(bmap: BuildingMap, gain_3g5: float = 0.0, gain_7g: float = 6.0) -> TxConfig:
    """Tx at the grid centre, mounted 5 m above the tallest building."""
    H, W = bmap.shape
    pos = (H // 2, W // 2)
    if bmap.heights[pos] > 0:
        raise SceneError(f"Tx site {pos} is inside a building")
    return TxConfig(position=pos, height=float(bmap.heights.max()) + TX_HEIGHT_MARGIN,
                    gain_3g5=gain_3g5, gain_7g=gain_7g)
