"""Full / Partial CommUNext on top of nncore, plus training and prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasetio import Sample
from .geometry import NLOS
from .nncore import (Adam, BatchNorm2d, Conv2d, ConvTranspose2, Module, Tensor, affine, bce,
                     concat_channels, load_checkpoint, maxpool2, mse_db, relu, save_checkpoint,
                     sigmoid)
from .propagation import CANONICAL_ANGLES, FLOOR_DBM

log = logging.getLogger(__name__)

DBM_OFFSET = 160.0
DBM_SCALE = 130.0
HEIGHT_SCALE = 100.0
VARIANTS = ("full", "full_seg", "partial")
COVERAGE_SOURCES = ("full", "random", "nlos_guided", "blend", "block")


class NumericError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    variant: str = "partial"
    directions: list = field(default_factory=lambda: list(CANONICAL_ANGLES))
    coverage: str = "block"
    width: int = 16
    depth: int = 3
    lambda_seg: float = 0.3
    lambda_cov: float = 0.5
    seed: int = 0

    @property
    def seg(self) -> bool:
        return self.variant in ("full_seg", "partial")

    @property
    def in_channels(self) -> int:
        return 2 + len(self.directions) + int(self.seg)

    def validate(self, grid: int | None = None) -> list[str]:
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant must be one of {VARIANTS}")
        if self.coverage not in COVERAGE_SOURCES:
            errs.append(f"coverage must be one of {COVERAGE_SOURCES}")
        if self.variant == "partial" and self.coverage == "full":
            errs.append("partial variant needs a sampled coverage map (coverage != 'full')")
        if self.variant != "partial" and self.coverage != "full":
            log.debug("full variant fed with sampled coverage %r", self.coverage)
        bad = [d for d in self.directions if d not in CANONICAL_ANGLES]
        if bad or len(set(self.directions)) != len(self.directions):
            errs.append(f"directions {self.directions} must be distinct canonical angles")
        if self.lambda_seg < 0 or self.lambda_cov < 0:
            errs.append("lambda weights must be >= 0")
        if self.width < 1 or self.depth < 1:
            errs.append("width and depth must be >= 1")
        if grid is not None and self.depth > math.log2(grid) - 2:
            errs.append(f"depth {self.depth} exceeds log2({grid}) - 2")
        return errs


# --- input / target encoding ----------------------------------------------

def norm_dbm(v):
    return np.clip((np.asarray(v, dtype=np.float32) + DBM_OFFSET) / DBM_SCALE, 0.0, 1.0)


def norm_height(h):
    return np.clip(np.asarray(h, dtype=np.float32) / HEIGHT_SCALE, 0.0, 1.0)


def channel_layout(cfg: ModelConfig) -> list[str]:
    cov = "S_c" if cfg.coverage == "full" else f"S~c[{cfg.coverage}]"
    return ["B", cov, *(f"S~d{a}" for a in cfg.directions)] + (["M_NLoS"] if cfg.seg else [])


def encode_inputs(sample: Sample, cfg: ModelConfig) -> np.ndarray:
    """(C, H, W) float32 input planes in ``channel_layout`` order."""
    planes = [norm_height(sample.building.heights)]
    if cfg.coverage == "full":
        if sample.coverage is None:
            raise ValueError(f"{sample.sample_id}: coverage map missing")
        planes.append(norm_dbm(sample.coverage))
    else:
        if cfg.coverage not in sample.sparse_cov:
            raise ValueError(f"{sample.sample_id}: no sampled coverage {cfg.coverage!r}")
        planes.append(norm_dbm(sample.sparse_cov[cfg.coverage].values))
    for a in cfg.directions:
        if a not in sample.sparse_7g:
            raise ValueError(f"{sample.sample_id}: no sparse 7 GHz map for direction {a}")
        planes.append(norm_dbm(sample.sparse_7g[a].values))
    if cfg.seg:
        planes.append((sample.classes == NLOS).astype(np.float32))
    return np.stack(planes).astype(np.float32)


@dataclass
class Batch:
    x: np.ndarray
    ss: np.ndarray
    nlos: np.ndarray
    coverage: np.ndarray


def make_batch(samples, cfg: ModelConfig, dtype=np.float32) -> Batch:
    return Batch(
        x=np.stack([encode_inputs(s, cfg) for s in samples]).astype(dtype),
        ss=np.stack([s.directions for s in samples]).astype(dtype),
        nlos=np.stack([(s.classes == NLOS)[None] for s in samples]).astype(dtype),
        coverage=np.stack([s.coverage[None] for s in samples]).astype(dtype),
    )


# --- network ----------------------------------------------------------------

class ConvBlock(Module):
    def __init__(self, cin, cout, rng, dtype, n=2):
        self.convs = [Conv2d(cin if i == 0 else cout, cout, 3, rng, dtype, bias=False)
                      for i in range(n)]
        self.norms = [BatchNorm2d(cout, dtype=dtype) for _ in range(n)]

    def __call__(self, x):
        for conv, bn in zip(self.convs, self.norms):
            x = relu(bn(conv(x)))
        return x


class Encoder(Module):
    def __init__(self, cin, width, depth, rng, dtype):
        chans = [width * 2 ** i for i in range(depth + 1)]
        self.blocks = [ConvBlock(cin if i == 0 else chans[i - 1], chans[i], rng, dtype)
                       for i in range(depth)]
        self.bottleneck = ConvBlock(chans[depth - 1], chans[depth], rng, dtype)

    def __call__(self, x):
        skips = []
        for blk in self.blocks:
            x = blk(x)
            skips.append(x)
            x = maxpool2(x)
        return self.bottleneck(x), skips


class Decoder(Module):
    def __init__(self, width, depth, rng, dtype):
        chans = [width * 2 ** i for i in range(depth + 1)]
        self.ups = [ConvTranspose2(chans[i + 1], chans[i], rng, dtype) for i in range(depth)]
        self.blocks = [ConvBlock(2 * chans[i], chans[i], rng, dtype) for i in range(depth)]

    def __call__(self, x, skips):
        for i in reversed(range(len(self.blocks))):
            x = self.blocks[i](concat_channels(self.ups[i](x), skips[i]))
        return x


def to_dbm(t: Tensor) -> Tensor:
    return affine(sigmoid(t), DBM_SCALE, -DBM_OFFSET)


class CommUNext(Module):
    """U-Net with an 8-direction SS head, optional seg head, optional coverage decoder."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        w, d = cfg.width, cfg.depth
        self.encoder = Encoder(cfg.in_channels, w, d, rng, dtype)
        self.decoder = Decoder(w, d, rng, dtype)
        head_in = w
        if cfg.variant == "partial":
            self.cov_decoder = Decoder(w, d, rng, dtype)
            self.cov_head = Conv2d(w, 1, 1, rng, dtype)
            # reconstructed coverage joins the SS path at full resolution
            self.fuse = ConvBlock(w + 1, w, rng, dtype, n=1)
        self.ss_head = Conv2d(head_in, len(CANONICAL_ANGLES), 1, rng, dtype)
        if cfg.seg:
            self.seg_head = Conv2d(head_in, 1, 1, rng, dtype)

    def __call__(self, x: Tensor) -> dict[str, Tensor]:
        H, W = x.shape[2:]
        k = 2 ** self.cfg.depth
        if H % k or W % k:
            raise ValueError(f"input {H}x{W} not divisible by 2^{self.cfg.depth}")
        z, skips = self.encoder(x)
        out = {}
        feat = self.decoder(z, skips)
        if self.cfg.variant == "partial":
            cov_norm = sigmoid(self.cov_head(self.cov_decoder(z, skips)))
            out["coverage"] = affine(cov_norm, DBM_SCALE, -DBM_OFFSET)
            feat = self.fuse(concat_channels(feat, cov_norm))
        out["ss"] = to_dbm(self.ss_head(feat))
        if self.cfg.seg:
            out["seg"] = sigmoid(self.seg_head(feat))
        return out


def full_forward(model: CommUNext, x) -> dict[str, Tensor]:
    return model(x if isinstance(x, Tensor) else Tensor(x))


partial_forward = full_forward


# --- losses -----------------------------------------------------------------

def loss_full(pred: dict, batch: Batch, lambda_seg: float) -> tuple[Tensor, dict]:
    l_ss = mse_db(pred["ss"], batch.ss)
    parts = {"ss": float(l_ss.data)}
    total = l_ss
    if "seg" in pred:
        l_seg = bce(pred["seg"], batch.nlos)
        parts["seg"] = float(l_seg.data)
        total = total + lambda_seg * l_seg
    return total, parts


def loss_partial(pred: dict, batch: Batch, lambda_seg: float, lambda_cov: float):
    total, parts = loss_full(pred, batch, lambda_seg)
    l_cov = mse_db(pred["coverage"], batch.coverage)
    parts["cov"] = float(l_cov.data)
    return total + lambda_cov * l_cov, parts


def model_loss(model: CommUNext, pred: dict, batch: Batch):
    cfg = model.cfg
    if cfg.variant == "partial":
        return loss_partial(pred, batch, cfg.lambda_seg, cfg.lambda_cov)
    return loss_full(pred, batch, cfg.lambda_seg)


# --- training / prediction -------------------------------------------------

@dataclass
class TrainResult:
    model: CommUNext
    trace: list[dict]
    best_epoch: int
    best_val: float


def _check_finite(parts: dict, where: str):
    bad = {k: v for k, v in parts.items() if not np.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss at {where}: {bad}")


def evaluate_loss(model: CommUNext, samples, batch_size: int = 8) -> float:
    model.eval()
    tot, n = 0.0, 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        b = make_batch(chunk, model.cfg)
        loss, _ = model_loss(model, model(Tensor(b.x)), b)
        tot += float(loss.data) * len(chunk)
        n += len(chunk)
    model.train()
    return tot / max(n, 1)


def train(train_samples, cfg: ModelConfig, epochs: int = 10, batch: int = 8, seed: int = 0,
          lr: float = 1e-3, val_samples=None, max_steps: int | None = None,
          callback=None) -> TrainResult:
    """Adam on shuffled mini-batches; keeps the best-validation weights.

    Without validation samples the final weights are kept.
    """
    if batch < 2:
        raise ValueError("batch size must be >= 2 (batch norm)")
    if len(train_samples) < 2:
        raise ValueError("need at least 2 training samples")
    errs = cfg.validate(min(train_samples[0].building.shape))
    if errs:
        raise ValueError("; ".join(errs))
    model = CommUNext(cfg)
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    trace = []
    best_val, best_epoch, best_state = math.inf, -1, None
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_samples))
        # a trailing singleton batch would break batch norm; fold it into the previous one
        starts = list(range(0, len(order), batch))
        if len(order) - starts[-1] < 2 and len(starts) > 1:
            starts.pop()
        for j, s0 in enumerate(starts):
            end = starts[j + 1] if j + 1 < len(starts) else len(order)
            b = make_batch([train_samples[i] for i in order[s0:end]], cfg)
            opt.zero_grad()
            pred = model(Tensor(b.x))
            loss, parts = model_loss(model, pred, b)
            parts["total"] = float(loss.data)
            _check_finite(parts, f"epoch {epoch} step {step}")
            loss.backward()
            opt.step()
            trace.append({"epoch": epoch, "step": step, **parts})
            if callback:
                callback(trace[-1])
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        if val_samples:
            v = evaluate_loss(model, val_samples)
            _check_finite({"val": v}, f"epoch {epoch} validation")
            trace.append({"epoch": epoch, "step": step, "val": v})
            log.info("epoch %d val loss %.4f", epoch, v)
            if v < best_val:
                best_val, best_epoch = v, epoch
                best_state = {k: np.array(a) for k, a in model.state_dict().items()}
        if max_steps is not None and step >= max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, trace, best_epoch, best_val)


@dataclass
class Prediction:
    ss: np.ndarray
    seg: np.ndarray | None = None
    coverage: np.ndarray | None = None


def predict(model: CommUNext, samples, batch_size: int = 8) -> list[Prediction]:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        x = np.stack([encode_inputs(s, model.cfg) for s in samples[i:i + batch_size]])
        res = model(Tensor(x))
        for j in range(x.shape[0]):
            out.append(Prediction(
                ss=np.maximum(res["ss"].data[j], FLOOR_DBM).astype(np.float32),
                seg=res["seg"].data[j, 0] if "seg" in res else None,
                coverage=res["coverage"].data[j, 0] if "coverage" in res else None))
    model.train(was_training)
    return out


def save_model(path, model: CommUNext, extra: dict | None = None) -> None:
    meta = {"model": asdict(model.cfg), "channels": channel_layout(model.cfg),
            "normalization": {"dbm_offset": DBM_OFFSET, "dbm_scale": DBM_SCALE,
                              "height_scale": HEIGHT_SCALE}, **(extra or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[CommUNext, dict]:
    state, meta = load_checkpoint(path)
    model = CommUNext(ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta
