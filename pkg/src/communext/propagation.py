"""Deterministic stand-in for the ray tracer.

RSS = tx_power + gain - FSPL(d3D) - wall_loss * walls - nlos_offset * [NLoS]
      - directional attenuation - optional log-normal shadowing,
clamped at the -160 dBm floor; building pixels hold the floor exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MaskMap, blocking_counts
from .scene import BuildingMap, TxConfig

FLOOR_DBM = -160.0
CANONICAL_ANGLES = tuple(range(0, 360, 45))
F_3G5 = 3.5e9
F_7G = 7.0e9
# unnormalised integer direction vectors (col, up) per canonical angle
_BORESIGHT = {a: (int(round(np.cos(np.radians(a)))), int(round(np.sin(np.radians(a)))))
              for a in CANONICAL_ANGLES}


class PropagationError(ValueError):
    pass


@dataclass(frozen=True)
class PropagationParams:
    frequency: float = F_3G5
    tx_gain: float = 0.0
    tx_power: float = 30.0
    ue_height: float = 1.5
    wall_loss: float = 8.0
    nlos_offset: float = 10.0
    floor: float = FLOOR_DBM
    shadow_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if self.frequency <= 0:
            errs.append("frequency must be > 0")
        if self.wall_loss < 0:
            errs.append("wall_loss must be >= 0")
        if self.floor != FLOOR_DBM:
            errs.append(f"floor must be {FLOOR_DBM}")
        if self.shadow_sigma < 0:
            errs.append("shadow_sigma must be >= 0")
        return errs


@dataclass(frozen=True)
class AntennaPattern:
    boresight: int = 0
    hpbw: float = 65.0
    max_attenuation: float = 30.0
    peak_gain: float = 6.0

    def __post_init__(self):
        if self.boresight not in CANONICAL_ANGLES:
            raise PropagationError(f"boresight {self.boresight} not one of {CANONICAL_ANGLES}")
        if self.hpbw <= 0:
            raise PropagationError("hpbw must be > 0")


@dataclass
class SignalMap:
    values: np.ndarray
    band: str = "3.5GHz"
    direction: str = "omni"


def fspl(distance, frequency):
    """Free-space path loss in dB; distance in metres (0 clamped to 2 m), frequency in Hz."""
    if np.any(np.asarray(frequency) <= 0):
        raise PropagationError("frequency must be > 0")
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0):
        raise PropagationError("distance must be >= 0")
    d = np.where(d == 0, 2.0, d)
    out = 20 * np.log10(d) + 20 * np.log10(frequency) - 147.55
    return float(out) if out.ndim == 0 else out


def _wrap(offset):
    """Wrap degrees into (-180, 180]."""
    w = np.mod(np.asarray(offset, dtype=np.float64) + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


def directional_attenuation(pattern: AntennaPattern, azimuth):
    off = _wrap(np.asarray(azimuth, dtype=np.float64) - pattern.boresight)
    att = np.minimum(12.0 * (off / pattern.hpbw) ** 2, pattern.max_attenuation)
    return float(att) if att.ndim == 0 else att


def _pattern_attenuation(shape, tx: tuple[int, int], pattern: AntennaPattern) -> np.ndarray:
    # angle between boresight and pixel via atan2(cross, dot): rotation-exact on the grid
    rows, cols = np.indices(shape)
    x = (cols - tx[1]).astype(np.float64)
    y = (tx[0] - rows).astype(np.float64)
    bx, by = _BORESIGHT[pattern.boresight]
    off = np.degrees(np.arctan2(bx * y - by * x, bx * x + by * y))
    off[tx] = 0.0
    return np.minimum(12.0 * (off / pattern.hpbw) ** 2, pattern.max_attenuation)


def _rss(bmap, tx, params, masks, gain, extra_loss=None):
    if params.validate():
        raise PropagationError("; ".join(params.validate()))
    if masks.classes.shape != bmap.shape:
        raise PropagationError(f"mask shape {masks.classes.shape} != map {bmap.shape}")
    H, W = bmap.shape
    rows, cols = np.indices((H, W))
    horiz = np.hypot(rows - tx.position[0], cols - tx.position[1]) * bmap.resolution
    d3 = np.hypot(horiz, tx.height - params.ue_height)
    walls = blocking_counts(bmap.occupied, tx.position)
    rss = (params.tx_power + gain - fspl(d3, params.frequency)
           - params.wall_loss * walls - params.nlos_offset * (masks.nlos == 1))
    if extra_loss is not None:
        rss = rss - extra_loss
    if params.shadow_sigma > 0:
        rng = np.random.default_rng(params.seed)
        rss = rss - rng.normal(0.0, params.shadow_sigma, size=(H, W))
    rss = np.maximum(rss, FLOOR_DBM)
    rss[bmap.occupied] = FLOOR_DBM
    return rss.astype(np.float32)


def simulate_coverage(bmap: BuildingMap, tx: TxConfig, params: PropagationParams,
                      masks: MaskMap) -> SignalMap:
    """Omnidirectional coverage map at params.frequency with gain params.tx_gain."""
    return SignalMap(_rss(bmap, tx, params, masks, params.tx_gain),
                     band=f"{params.frequency / 1e9:g}GHz")


def simulate_directional(bmap: BuildingMap, tx: TxConfig, params: PropagationParams,
                         pattern: AntennaPattern, masks: MaskMap) -> SignalMap:
    att = _pattern_attenuation(bmap.shape, tx.position, pattern)
    return SignalMap(_rss(bmap, tx, params, masks, pattern.peak_gain, extra_loss=att),
                     band=f"{params.frequency / 1e9:g}GHz", direction=str(pattern.boresight))
