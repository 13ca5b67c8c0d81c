"""Sparse and densified observation maps drawn from ground-truth SS maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MaskMap
from .propagation import FLOOR_DBM

COMMUNICABLE_DBM = -90.0
BLOCK = 10
N_BLOCKS = 10
STRATEGIES = ("random", "nlos_guided", "blend", "block")


class SamplingError(ValueError):
    pass


@dataclass
class SamplingConfig:
    n_samples: int
    gamma: float = 0.9
    strategy: str = "random"
    seed: int = 0
    blend_policy: str = "mean_priority"

    def validate(self) -> list[str]:
        errs = []
        if self.n_samples < 0:
            errs.append("n_samples must be >= 0")
        if not 0 <= self.gamma <= 1:
            errs.append("gamma must be in [0, 1]")
        if self.strategy not in STRATEGIES:
            errs.append(f"strategy must be one of {STRATEGIES}")
        if self.blend_policy not in ("mean_priority", "max"):
            errs.append("blend_policy must be 'mean_priority' or 'max'")
        return errs


@dataclass
class SparseMap:
    values: np.ndarray
    sample_mask: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sample_mask.sum())


def _from_indices(src: np.ndarray, flat_idx: np.ndarray) -> SparseMap:
    values = np.full(src.shape, FLOOR_DBM, dtype=np.float32)
    mask = np.zeros(src.shape, dtype=np.uint8)
    if len(flat_idx):
        values.flat[flat_idx] = src.flat[flat_idx]
        mask.flat[flat_idx] = 1
    return SparseMap(values, mask)


def sample_random(src: np.ndarray, n: int, seed) -> SparseMap:
    """n pixels uniformly without replacement over the whole grid."""
    src = np.asarray(src, dtype=np.float32)
    if not 0 <= n <= src.size:
        raise SamplingError(f"cannot draw {n} samples from {src.size} pixels")
    rng = np.random.default_rng(seed)
    return _from_indices(src, rng.choice(src.size, size=n, replace=False))


def nlos_guided_indices(masks: MaskMap, n: int, gamma: float, rng) -> np.ndarray:
    """floor(gamma*n) NLoS pixels plus the remainder from LoS, with spillover."""
    nlos_pool = np.flatnonzero(masks.nlos)
    los_pool = np.flatnonzero(masks.los)
    if n > len(nlos_pool) + len(los_pool):
        raise SamplingError(f"{n} samples requested but only "
                            f"{len(nlos_pool) + len(los_pool)} non-building pixels")
    q_nlos = int(np.floor(gamma * n))
    q_los = n - q_nlos
    if q_nlos > len(nlos_pool):
        q_los += q_nlos - len(nlos_pool)
        q_nlos = len(nlos_pool)
    elif q_los > len(los_pool):
        q_nlos += q_los - len(los_pool)
        q_los = len(los_pool)
    a = rng.choice(nlos_pool, size=q_nlos, replace=False)
    b = rng.choice(los_pool, size=q_los, replace=False)
    return np.concatenate([a, b]).astype(np.int64)


def sample_nlos_guided(src: np.ndarray, masks: MaskMap, n: int, gamma: float, seed) -> SparseMap:
    src = np.asarray(src, dtype=np.float32)
    rng = np.random.default_rng(seed)
    return _from_indices(src, nlos_guided_indices(masks, n, gamma, rng))


def blend_map(src: np.ndarray, building: np.ndarray, masks: MaskMap, n: int, gamma: float,
              seed, policy: str = "mean_priority") -> SparseMap:
    """Nine-patch copy of NLoS-guided seeds with overlap resolution.

    ``mean_priority`` averages the contributors >= -90 dBm when any exist, else
    all contributors; ``max`` keeps the strongest contributor. The returned
    mask marks every written non-building cell.
    """
    src = np.asarray(src, dtype=np.float32)
    H, W = src.shape
    rng = np.random.default_rng(seed)
    seeds = nlos_guided_indices(masks, n, gamma, rng)
    total = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    strong_total = np.zeros((H, W))
    strong_count = np.zeros((H, W), dtype=np.int64)
    best = np.full((H, W), -np.inf)
    for idx in seeds:
        r, c = divmod(int(idx), W)
        v = float(src[r, c])
        win = (slice(max(r - 1, 0), r + 2), slice(max(c - 1, 0), c + 2))
        total[win] += v
        count[win] += 1
        best[win] = np.maximum(best[win], v)
        if v >= COMMUNICABLE_DBM:
            strong_total[win] += v
            strong_count[win] += 1
    written = count > 0
    out = np.full((H, W), FLOOR_DBM)
    if policy == "max":
        out[written] = best[written]
    else:
        strong = strong_count > 0
        out[written] = total[written] / count[written]
        out[strong] = strong_total[strong] / strong_count[strong]
    bld = np.asarray(building).astype(bool)
    out[bld] = FLOOR_DBM
    return SparseMap(out.astype(np.float32), (written & ~bld).astype(np.uint8))


def n_candidate_blocks(H: int, W: int, size: int = BLOCK) -> int:
    return max(H - size + 1, 0) * max(W - size + 1, 0)


def top_nlos_blocks(masks: MaskMap, k: int = N_BLOCKS, size: int = BLOCK) -> list[tuple[int, int]]:
    """Origins of the k sliding size x size windows with the highest NLoS ratio.

    Ties go to the earlier origin in row-major order.
    """
    nl = masks.nlos.astype(np.int64)
    H, W = nl.shape
    integral = np.zeros((H + 1, W + 1), dtype=np.int64)
    integral[1:, 1:] = nl.cumsum(0).cumsum(1)
    sums = (integral[size:, size:] - integral[:-size, size:]
            - integral[size:, :-size] + integral[:-size, :-size])
    flat = sums.ravel()
    # stable sort on -score keeps row-major order among equal scores
    order = np.argsort(-flat, kind="stable")[:k]
    nw = W - size + 1
    return [(int(i) // nw, int(i) % nw) for i in order]


def block_map(src: np.ndarray, building: np.ndarray, masks: MaskMap, n: int, seed,
              k: int = N_BLOCKS, size: int = BLOCK) -> SparseMap:
    src = np.asarray(src, dtype=np.float32)
    H, W = src.shape
    if H < size or W < size:
        raise SamplingError(f"grid {H}x{W} smaller than a {size}x{size} block")
    if n < k * size * size:
        raise SamplingError(f"n={n} below the {k}x{size * size} block budget")
    open_ = ~np.asarray(building).astype(bool)
    if n > open_.sum():
        raise SamplingError(f"{n} samples requested but only {open_.sum()} non-building pixels")
    in_block = np.zeros((H, W), dtype=bool)
    for r, c in top_nlos_blocks(masks, k, size):
        in_block[r:r + size, c:c + size] = True
    chosen = np.flatnonzero(in_block & open_)
    rest = np.flatnonzero(~in_block & open_)
    need = n - len(chosen)
    if need > len(rest):
        raise SamplingError(f"only {len(rest)} non-building pixels outside the blocks, "
                            f"{need} needed")
    rng = np.random.default_rng(seed)
    extra = rng.choice(rest, size=max(need, 0), replace=False)
    if need < 0:
        # selected blocks alone exceed the budget; keep a seeded subset
        chosen = rng.choice(chosen, size=n, replace=False)
    return _from_indices(src, np.concatenate([chosen, extra]).astype(np.int64))


def sample(src, building, masks, cfg: SamplingConfig) -> SparseMap:
    """Dispatch on cfg.strategy."""
    errs = cfg.validate()
    if errs:
        raise SamplingError("; ".join(errs))
    if cfg.strategy == "random":
        return sample_random(src, cfg.n_samples, cfg.seed)
    if cfg.strategy == "nlos_guided":
        return sample_nlos_guided(src, masks, cfg.n_samples, cfg.gamma, cfg.seed)
    if cfg.strategy == "blend":
        return blend_map(src, building, masks, cfg.n_samples, cfg.gamma, cfg.seed, cfg.blend_policy)
    return block_map(src, building, masks, cfg.n_samples, cfg.seed)
