"""Pipeline configuration and the stage functions behind the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry, propagation, sampling, scene
from .datasetio import Sample, validate_sample
from .models import ModelConfig
from .propagation import CANONICAL_ANGLES, F_3G5, F_7G, AntennaPattern, PropagationParams

# stream ids for derived seeds
SEED_SCENE, SEED_SD7, SEED_SCOV, SEED_SPLIT, SEED_MODEL, SEED_TRAIN, SEED_SHADOW = range(1, 8)


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, *keys]).generate_state(1, np.uint32)[0])


@dataclass
class SceneSection:
    n_parents: int = 12
    parent_size: int = 128
    patch_size: int = 64
    downsample: int = 1
    resolution: float = 4.0
    density: float = 0.3
    footprint: list = field(default_factory=lambda: [4, 10])
    building_height: list = field(default_factory=lambda: [10.0, 40.0])
    clearance: int = 2


@dataclass
class PropagationSection:
    tx_power: float = 30.0
    ue_height: float = 1.5
    wall_loss: float = 8.0
    nlos_offset: float = 10.0
    shadow_sigma: float = 0.0
    gain_3g5: float = 0.0
    gain_7g: float = 6.0
    hpbw: float = 65.0
    max_attenuation: float = 30.0


@dataclass
class SamplingSection:
    n_d: int = 200
    n_c: int = 1000
    gamma: float = 0.9
    strategy_7g: str = "random"
    coverage_strategies: list = field(default_factory=lambda: list(sampling.STRATEGIES))
    blend_policy: str = "mean_priority"


@dataclass
class SplitSection:
    ratios: list = field(default_factory=lambda: [7, 2, 1])


@dataclass
class TrainSection:
    epochs: int = 10
    batch: int = 8
    lr: float = 1e-3
    max_steps: int | None = None


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    scene: SceneSection = field(default_factory=SceneSection)
    propagation: PropagationSection = field(default_factory=PropagationSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        body = self.to_dict()
        body.pop("threads")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> list[str]:
        errs = []
        sc = self.scene
        if sc.n_parents < 1:
            errs.append("scene.n_parents must be >= 1")
        if sc.downsample < 1 or sc.patch_size % sc.downsample:
            errs.append("scene.patch_size must be divisible by scene.downsample")
        else:
            g = sc.patch_size // sc.downsample
            if not (scene._is_pow2(g) and scene.MIN_SIDE <= g <= scene.MAX_SIDE):
                errs.append(f"sample grid {g} must be a power of two in "
                            f"[{scene.MIN_SIDE}, {scene.MAX_SIDE}]")
            errs += [f"model.{e}" for e in self.model.validate(g)]
        if sc.patch_size * 2 > sc.parent_size:
            errs.append("scene.patch_size must be at most half of scene.parent_size")
        errs += [f"scene.{e}" for e in self.scene_params(0).validate()]
        sp = self.sampling
        if sp.strategy_7g not in ("random", "nlos_guided"):
            errs.append("sampling.strategy_7g must be 'random' or 'nlos_guided'")
        bad = [s for s in sp.coverage_strategies if s not in sampling.STRATEGIES]
        if bad:
            errs.append(f"sampling.coverage_strategies has unknown entries {bad}")
        if not 0 <= sp.gamma <= 1:
            errs.append("sampling.gamma must be in [0, 1]")
        budget = sampling.N_BLOCKS * sampling.BLOCK ** 2
        if "block" in sp.coverage_strategies and sp.n_c < budget:
            errs.append(f"sampling.n_c={sp.n_c} is below the block strategy budget {budget}")
        if sp.blend_policy not in ("mean_priority", "max"):
            errs.append("sampling.blend_policy must be 'mean_priority' or 'max'")
        if self.model.coverage not in ("full", *sp.coverage_strategies):
            errs.append(f"model.coverage {self.model.coverage!r} not produced by "
                        f"sampling.coverage_strategies")
        if len(self.split.ratios) != 3 or sum(self.split.ratios) != 10:
            errs.append("split.ratios must be three integers summing to 10")
        if self.train.batch < 2:
            errs.append("train.batch must be >= 2")
        if self.train.epochs < 1:
            errs.append("train.epochs must be >= 1")
        if self.threads < 1:
            errs.append("threads must be >= 1")
        return errs

    def scene_params(self, parent: int) -> scene.SceneParams:
        sc = self.scene
        return scene.SceneParams(
            height=sc.parent_size, width=sc.parent_size, density=sc.density,
            footprint=tuple(sc.footprint), building_height=tuple(sc.building_height),
            seed=derive_seed(self.seed, SEED_SCENE, parent), clearance=sc.clearance)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _build(cls, data: dict, path: str, problems: list[str]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in fields:
            problems.append(f"unknown key {path}{k}")
            continue
        f = fields[k]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            if not isinstance(v, dict):
                problems.append(f"{path}{k} must be a mapping")
                continue
            kwargs[k] = _build(sub, v, f"{path}{k}.", problems)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def load_config(data: dict | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Strictly parse a config mapping; collects every problem before raising."""
    data = json.loads(json.dumps(data or {}))
    problems: list[str] = []
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {key}: {p} is not a section")
                break
        else:
            node[leaf] = value
    try:
        cfg = _build(PipelineConfig, data, "", problems)
    except TypeError as e:
        problems.append(str(e))
        raise ConfigError(problems) from None
    try:
        cfg.scene.footprint = list(cfg.scene.footprint)
        cfg.model.directions = [int(d) for d in cfg.model.directions]
        problems += cfg.validate()
    except (TypeError, ValueError) as e:
        problems.append(f"bad value type: {e}")
    if problems:
        raise ConfigError(problems)
    return cfg


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


# --- stages ------------------------------------------------------------------

def generate_scenes(cfg: PipelineConfig) -> list[Sample]:
    """Parent scenes -> four crops each, Tx at every crop centre."""
    sc = cfg.scene
    parent_res = sc.resolution / sc.downsample
    out = []
    for i in range(sc.n_parents):
        parent = scene.synth_scene(cfg.scene_params(i))
        parent = scene.BuildingMap(parent.heights, parent_res, f"p{i:04d}")
        for k, patch in enumerate(scene.crop_patches(parent, sc.patch_size)):
            bmap = scene.downsample(patch, sc.downsample)
            bmap.check_model_grid()
            tx = scene.place_tx(bmap, cfg.propagation.gain_3g5, cfg.propagation.gain_7g)
            out.append(Sample(bmap, tx, None, {}, None, crop=k,
                              seeds={"scene": cfg.scene_params(i).seed}))
    return out


def propagation_params(cfg: PipelineConfig, frequency: float, gain: float,
                       seed: int) -> PropagationParams:
    p = cfg.propagation
    return PropagationParams(frequency=frequency, tx_gain=gain, tx_power=p.tx_power,
                             ue_height=p.ue_height, wall_loss=p.wall_loss,
                             nlos_offset=p.nlos_offset, shadow_sigma=p.shadow_sigma, seed=seed)


def _parent_index(s: Sample) -> int:
    return int(s.parent_id.lstrip("p"))


def simulate(cfg: PipelineConfig, samples: list[Sample]) -> list[Sample]:
    p = cfg.propagation

    def one(s: Sample) -> Sample:
        masks = geometry.compute_masks(s.building, s.tx)
        shadow = derive_seed(cfg.seed, SEED_SHADOW, _parent_index(s), s.crop)
        cov = propagation.simulate_coverage(
            s.building, s.tx, propagation_params(cfg, F_3G5, s.tx.gain_3g5, shadow), masks)
        p7 = propagation_params(cfg, F_7G, s.tx.gain_7g, shadow)
        dirs = {}
        for a in CANONICAL_ANGLES:
            pat = AntennaPattern(a, p.hpbw, p.max_attenuation, s.tx.gain_7g)
            dirs[a] = propagation.simulate_directional(s.building, s.tx, p7, pat, masks).values
        return dataclasses.replace(s, coverage=cov.values, directional=dirs,
                                   classes=masks.classes, seeds={**s.seeds, "shadow": shadow})
    return _map(one, samples, cfg.threads)


def sample_sparse(cfg: PipelineConfig, samples: list[Sample]) -> tuple[list[Sample], dict]:
    """Attach sparse 7 GHz maps (all eight directions) and sampled coverage maps.

    Returns the kept samples and rejection statistics.
    """
    sp = cfg.sampling

    def one(s: Sample):
        masks = geometry.MaskMap(s.classes)
        pi = _parent_index(s)
        seeds = dict(s.seeds)
        sd7 = {}
        for a in CANONICAL_ANGLES:
            sd = derive_seed(cfg.seed, SEED_SD7, pi, s.crop, a)
            seeds[f"sd7/{a}"] = sd
            if sp.strategy_7g == "random":
                sd7[a] = sampling.sample_random(s.directional[a], sp.n_d, sd)
            else:
                sd7[a] = sampling.sample_nlos_guided(s.directional[a], masks, sp.n_d, sp.gamma, sd)
        scov = {}
        bld = s.building.occupied
        for j, name in enumerate(sp.coverage_strategies):
            sd = derive_seed(cfg.seed, SEED_SCOV, pi, s.crop, j)
            seeds[f"sc/{name}"] = sd
            scov[name] = sampling.sample(s.coverage, bld, masks, sampling.SamplingConfig(
                sp.n_c, sp.gamma, name, sd, sp.blend_policy))
        out = dataclasses.replace(s, sparse_7g=sd7, sparse_cov=scov, seeds=seeds)
        return out, validate_sample(out)

    def guarded(s):
        try:
            return one(s)
        except sampling.SamplingError as e:
            return s, f"sampling failed: {e}"

    kept, rejected = [], []
    for s, why in _map(guarded, samples, cfg.threads):
        if why is None:
            kept.append(s)
        else:
            rejected.append({"id": s.sample_id, "reason": why})
    return kept, {"input": len(samples), "kept": len(kept), "rejected": rejected}


def manifest_extra(cfg: PipelineConfig, stage: str, **more) -> dict:
    sp = cfg.sampling
    return {
        "stage": stage, "config_hash": cfg.hash(), "master_seed": cfg.seed,
        "simulator": {**dataclasses.asdict(cfg.propagation), "f_3g5": F_3G5, "f_7g": F_7G,
                      "floor_dbm": propagation.FLOOR_DBM},
        "strategies": {"sparse_7g": sp.strategy_7g, "n_d": sp.n_d, "n_c": sp.n_c,
                       "gamma": sp.gamma, "coverage": list(sp.coverage_strategies),
                       "blend_policy": sp.blend_policy},
        **more,
    }
