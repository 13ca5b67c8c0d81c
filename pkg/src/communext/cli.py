"""communext command line: gen -> simulate -> sample -> split -> train -> predict -> eval -> render.

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import models, plotting
from .datasetio import (DatasetError, SplitSpec, encode_record, read_dataset, read_records,
                        split, write_dataset, write_records)
from .models import NumericError
from .pipeline import (SEED_MODEL, SEED_SPLIT, SEED_TRAIN, ConfigError, PipelineConfig,
                       derive_seed, generate_scenes, load_config, manifest_extra, sample_sparse,
                       simulate)
from .propagation import CANONICAL_ANGLES, FLOOR_DBM

log = logging.getLogger("communext")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

ARTIFACTS = {
    "scenes.cuxd": "gen",
    "simulated.cuxd": "simulate",
    "dataset.cuxd": "sample",
    "split.json": "split",
    "model.cuxw": "train",
    "train_trace.json": "train",
    "predictions.cuxd": "predict",
    "summary.json": "eval",
}
SUBCOMMANDS = ("gen", "simulate", "sample", "split", "train", "predict", "eval", "render", "all")


class MissingArtifact(RuntimeError):
    pass


def _need(out: Path, name: str) -> Path:
    p = out / name
    if not p.exists():
        raise MissingArtifact(f"missing {p}; run `communext {ARTIFACTS[name]}` first")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# --- stages -------------------------------------------------------------------

def cmd_gen(cfg: PipelineConfig, out: Path) -> None:
    samples = generate_scenes(cfg)
    write_dataset(samples, out / "scenes.cuxd", manifest_extra(cfg, "gen"), validate=False)
    log.info("gen: %d crops from %d parent scenes", len(samples), cfg.scene.n_parents)


def cmd_simulate(cfg: PipelineConfig, out: Path) -> None:
    samples = simulate(cfg, read_dataset(_need(out, "scenes.cuxd")))
    write_dataset(samples, out / "simulated.cuxd", manifest_extra(cfg, "simulate"))
    log.info("simulate: %d samples", len(samples))


def cmd_sample(cfg: PipelineConfig, out: Path) -> None:
    samples, stats = sample_sparse(cfg, read_dataset(_need(out, "simulated.cuxd")))
    if not samples:
        raise DatasetError(f"every sample was rejected, first reason: "
                           f"{stats['rejected'][0]['reason']}")
    write_dataset(samples, out / "dataset.cuxd", manifest_extra(cfg, "sample", rejection=stats))
    log.info("sample: kept %d of %d", stats["kept"], stats["input"])


def cmd_split(cfg: PipelineConfig, out: Path) -> None:
    samples = read_dataset(_need(out, "dataset.cuxd"))
    seed = derive_seed(cfg.seed, SEED_SPLIT)
    tr, va, te = split(samples, SplitSpec(tuple(cfg.split.ratios), seed))
    ids = [s.sample_id for s in samples]
    _write_json(out / "split.json", {
        "config_hash": cfg.hash(), "seed": seed, "ratios": cfg.split.ratios,
        "train": [ids[i] for i in tr], "val": [ids[i] for i in va], "test": [ids[i] for i in te],
        "parents": {k: sorted({samples[i].parent_id for i in idx})
                    for k, idx in (("train", tr), ("val", va), ("test", te))},
    })
    log.info("split: %d / %d / %d samples", len(tr), len(va), len(te))


def _load_split(out: Path):
    samples = read_dataset(_need(out, "dataset.cuxd"))
    sp = json.loads(_need(out, "split.json").read_text())
    by_id = {s.sample_id: s for s in samples}
    try:
        return {k: [by_id[i] for i in sp[k]] for k in ("train", "val", "test")}
    except KeyError as e:
        raise DatasetError(f"split.json references unknown sample {e}") from None


def _model_config(cfg: PipelineConfig) -> models.ModelConfig:
    return dataclasses.replace(cfg.model, seed=derive_seed(cfg.seed, SEED_MODEL, cfg.model.seed))


def cmd_train(cfg: PipelineConfig, out: Path) -> None:
    parts = _load_split(out)
    mc = _model_config(cfg)
    tseed = derive_seed(cfg.seed, SEED_TRAIN)
    t = cfg.train
    res = models.train(parts["train"], mc, epochs=t.epochs, batch=t.batch, seed=tseed, lr=t.lr,
                       val_samples=parts["val"], max_steps=t.max_steps)
    models.save_model(out / "model.cuxw", res.model,
                      {"config_hash": cfg.hash(), "train_seed": tseed,
                       "best_epoch": res.best_epoch})
    _write_json(out / "train_trace.json", {
        "config_hash": cfg.hash(), "train_seed": tseed, "init_seed": mc.seed,
        "best_epoch": res.best_epoch, "best_val": res.best_val, "trace": res.trace})
    log.info("train: best epoch %d, val loss %.4f", res.best_epoch, res.best_val)


def cmd_predict(cfg: PipelineConfig, out: Path) -> None:
    model, meta = models.load_model(_need(out, "model.cuxw"))
    test = _load_split(out)["test"]
    records = []
    for s, p in zip(test, models.predict(model, test)):
        grids = {f"pred/S_d{a}": p.ss[i] for i, a in enumerate(CANONICAL_ANGLES)}
        if p.seg is not None:
            grids["pred/seg"] = p.seg
        if p.coverage is not None:
            grids["pred/coverage"] = p.coverage
        records.append(encode_record({"id": s.sample_id, "parent_id": s.parent_id}, grids))
    write_records(out / "predictions.cuxd", records, {
        "stage": "predict", "config_hash": cfg.hash(), "model": meta["model"],
        "checkpoint_hash": _file_hash(out / "model.cuxw"),
        "ids": [s.sample_id for s in test]})
    log.info("predict: %d test maps", len(records))


def _load_predictions(out: Path):
    records, manifest = read_records(_need(out, "predictions.cuxd"))
    preds = {m["id"]: np.stack([g[f"pred/S_d{a}"] for a in CANONICAL_ANGLES]) for m, g in records}
    return preds, manifest


def _assist_masks(s, mc: models.ModelConfig):
    m3 = (np.ones_like(s.classes) if mc.coverage == "full"
          else s.sparse_cov[mc.coverage].sample_mask)
    m7 = np.stack([s.sparse_7g[a].sample_mask for a in mc.directions]) if mc.directions \
        else np.zeros((0, *s.classes.shape))
    return m3, m7


def idw_for_sample(s, directions):
    """IDW over the 7 GHz directions the model also sees; others get no samples."""
    vals = np.full((len(CANONICAL_ANGLES), *s.classes.shape), FLOOR_DBM, dtype=np.float32)
    masks = np.zeros(vals.shape, dtype=np.uint8)
    for i, a in enumerate(CANONICAL_ANGLES):
        if a in directions:
            vals[i] = s.sparse_7g[a].values
            masks[i] = s.sparse_7g[a].sample_mask
    return ev.idw_baseline(vals, masks, s.building.occupied)


def cmd_eval(cfg: PipelineConfig, out: Path) -> None:
    preds, pman = _load_predictions(out)
    test = _load_split(out)["test"]
    mc = models.ModelConfig(**pman["model"])
    rows, base_rows, flagged = [], [], {}
    for s in test:
        m3, m7 = _assist_masks(s, mc)
        truth = s.directions
        rows.append(ev.evaluate_map(s.sample_id, preds[s.sample_id], truth, m3, m7))
        base, empty = idw_for_sample(s, mc.directions)
        if empty:
            flagged[s.sample_id] = [CANONICAL_ANGLES[d] for d in empty]
        base_rows.append(ev.evaluate_map(s.sample_id, base, truth, m3, m7))
    tag = f"config_hash={cfg.hash()}"
    base_summary = ev.write_report(base_rows, out / "baseline_report.csv",
                                   out / "baseline_summary.json",
                                   {"config_hash": cfg.hash(), "predictor": "idw",
                                    "idw_power": 2.0, "empty_directions": flagged}, tag)
    ev.write_report(rows, out / "report.csv", out / "summary.json",
                    {"config_hash": cfg.hash(), "predictor": mc.variant,
                     "model": pman["model"],
                     "baseline": {"predictor": "idw", "mae_median": base_summary["mae_median"],
                                  "rmse_median": base_summary["rmse_median"]}}, tag)
    log.info("eval: %d maps", len(rows))


def cmd_render(cfg: PipelineConfig, out: Path, n_maps: int = 3) -> None:
    preds, _ = _load_predictions(out)
    summary_path = _need(out, "summary.json")
    test = _load_split(out)["test"]
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    tag = f"config_hash={cfg.hash()}"
    for s in test[:n_maps]:
        stem = s.sample_id.replace("/", "_")
        truth = s.directions
        plotting.render_scene(s.building.heights, s.classes, s.coverage,
                              fig_dir / f"scene_{stem}.png", s.tx.position, tag)
        plotting.render_ss_maps(truth, fig_dir / f"truth_{stem}.png", f"{s.sample_id} truth", tag)
        plotting.render_ss_maps(preds[s.sample_id], fig_dir / f"pred_{stem}.png",
                                f"{s.sample_id} prediction", tag)
        err = np.stack([ev.error_map(preds[s.sample_id], truth, i)
                        for i in range(len(CANONICAL_ANGLES))])
        err[~ev.communicable_mask(truth)] = 0.0
        plotting.render_error_maps(err, fig_dir / f"error_{stem}.png",
                                   f"{s.sample_id} |error| (communicable region)", tag)
    rows = _read_report(out / "report.csv")
    base = _read_report(out / "baseline_report.csv") if (out / "baseline_report.csv").exists() \
        else None
    for metric in ("mae", "rmse"):
        groups = {json.loads(summary_path.read_text())["predictor"]: [r[metric] for r in rows]}
        if base:
            groups["idw"] = [r[metric] for r in base]
        plotting.render_boxplot(groups, fig_dir / f"box_{metric}.png", metric.upper(), tag)
    trace = json.loads(_need(out, "train_trace.json").read_text())["trace"]
    plotting.render_loss_trace(trace, fig_dir / "loss_trace.png", tag)
    log.info("render: figures in %s", fig_dir)


def _read_report(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    head = lines[0].split(",")
    out = []
    for ln in lines[1:]:
        row = dict(zip(head, ln.split(",")))
        out.append({k: (None if v == "undefined" else float(v)) if k in ("mae", "rmse") else v
                    for k, v in row.items()})
    return out


STAGES = {"gen": cmd_gen, "simulate": cmd_simulate, "sample": cmd_sample, "split": cmd_split,
          "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "render": cmd_render}


def run(subcommand: str, cfg: PipelineConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=cfg.threads):
        for name in (STAGES if subcommand == "all" else [subcommand]):
            STAGES[name](cfg, out)


# --- argument handling --------------------------------------------------------

def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="communext", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="JSON pipeline configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
    p.add_argument("--threads", type=int, help="worker threads; 1 forces the deterministic path")
    p.add_argument("--split", help="train:val:test ratios, e.g. 7:2:1")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set train.epochs=3")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        data = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(data, dict):
            raise ConfigError(["config file must hold a JSON object"])
        overrides = _parse_set(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.split is not None:
            try:
                overrides["split.ratios"] = [int(x) for x in args.split.split(":")]
            except ValueError:
                raise ConfigError([f"--split expects integers like 7:2:1, got {args.split!r}"])
        cfg = load_config(data, overrides)
    except ConfigError as e:
        for prob in e.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run(args.subcommand, cfg, args.out)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
