"""Experiment harness: config loading, subcommands, artifact emission.

Subcommands: ``simulate`` (write a synthetic world to disk), ``train`` (fit a
model and emit metrics/checkpoint/history), ``sweep`` (one training run per
parameter value), ``audit-pseudo`` (run the pseudo-labeler alone and score
its quality). Every subcommand is deterministic given its config file; all
resolved settings are materialized next to the outputs as
``effective-config.json``.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
"""

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np
import yaml

from . import damp as damp_mod
from . import evaluation
from .core import ConfigError, DampConfig, GprConfig, SpmlLabError
from .scorers import MapScorer
from .trainer import (
    METHODS,
    Trainer,
    TrainSettings,
    load_world,
    save_checkpoint,
    save_world,
    simulate_world,
)

SWEEPABLE = ("grid_size", "delta_neg_pct")


@dataclasses.dataclass(frozen=True)
class WorldSettings:
    source: str = "synthetic"
    dir: str | None = None
    class_count: int = 20
    instances: int = 2000
    map_size: int = 32
    objects_min: int = 1
    objects_max: int = 4
    feature_dim: int = 32
    feature_noise: float = 0.1
    score_noise_sigma: float = 0.3
    seed: int = 1

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError("world.source must be 'synthetic' or 'files'")
        if self.source == "files" and not self.dir:
            raise ConfigError("world.dir is required when world.source is 'files'")
        if self.source == "synthetic":
            if self.class_count < 2:
                raise ConfigError("world.class_count must be >= 2")
            if self.instances < 1:
                raise ConfigError("world.instances must be >= 1")
            if self.map_size < 4:
                raise ConfigError("world.map_size must be >= 4")
        if self.score_noise_sigma < 0.0:
            raise ConfigError("world.score_noise_sigma must be nonnegative")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSettings
    gpr: GprConfig
    damp: DampConfig
    train: TrainSettings
    output_dir: str

    def to_dict(self) -> dict:
        out = {
            "world": dataclasses.asdict(self.world),
            "gpr": dataclasses.asdict(self.gpr),
            "damp": dataclasses.asdict(self.damp),
            "train": dataclasses.asdict(self.train),
            "output_dir": self.output_dir,
        }
        if out["gpr"]["m"] is None:
            out["gpr"]["m"] = "auto"
        return out


def _coerce(section: str, key: str, value, target_type):
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, target_type) or isinstance(value, bool) and target_type is not bool:
        raise ConfigError(f"{section}.{key}: expected {target_type.__name__}, got {value!r}")
    return value


def _build_section(data: dict, section: str, cls, special=()):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{key}' in section '{section}'")
        if key in special:
            kwargs[key] = value
            continue
        ftype = fields[key].type
        if ftype in ("int", int):
            kwargs[key] = _coerce(section, key, value, int)
        elif ftype in ("float", float):
            kwargs[key] = _coerce(section, key, value, float)
        elif ftype in ("str", str):
            kwargs[key] = _coerce(section, key, value, str)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def parse_config(path: str) -> ExperimentConfig:
    """Load and strictly validate a YAML experiment config."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")

    known = {"world", "gpr", "damp", "train", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    gpr_data = dict(raw.get("gpr") or {})
    if gpr_data.get("m") == "auto":
        gpr_data["m"] = None
    try:
        world = _build_section(dict(raw.get("world") or {}), "world", WorldSettings, special=("dir",))
        gpr = _build_section(gpr_data, "gpr", GprConfig, special=("m",))
        damp = _build_section(dict(raw.get("damp") or {}), "damp", DampConfig)
        train = _build_section(dict(raw.get("train") or {}), "train", TrainSettings)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    output_dir = raw.get("output_dir", "runs/out")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(world=world, gpr=gpr, damp=damp, train=train, output_dir=output_dir)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _prepare_out(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "effective-config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return cfg.output_dir


def _build_world(cfg: ExperimentConfig):
    w = cfg.world
    if w.source == "files":
        return load_world(w.dir)
    return simulate_world(
        class_count=w.class_count,
        instance_count=w.instances,
        map_size=w.map_size,
        objects_per_image=(w.objects_min, w.objects_max),
        feature_noise=w.feature_noise,
        seed=w.seed,
        feature_dim=w.feature_dim,
    )


def _metric_rows(history) -> list:
    report = history.pseudo_report
    rows = []
    prec_running, rec_running = [], []
    for i, rec in enumerate(history.records):
        prec = report.per_epoch_precision[i]
        recall = report.per_epoch_recall[i]
        if prec is not None:
            prec_running.append(prec)
        if recall is not None:
            rec_running.append(recall)
        confidence = math.exp(rec.log_confidence) if rec.log_confidence is not None else None
        cases = rec.per_case_sums or (None, None, None, None)
        rows.append(
            {
                "epoch": rec.epoch,
                "loss_total": rec.loss_total,
                "loss_L1": cases[0],
                "loss_L2": cases[1],
                "loss_L3": cases[2],
                "loss_L4": cases[3],
                "regularizer": rec.regularizer,
                "mAP_val": rec.val_map,
                "precision_avg": float(np.mean(prec_running)) if prec_running else None,
                "recall_avg": float(np.mean(rec_running)) if rec_running else None,
                "precision_acc": report.accumulated_precision_by_epoch[i],
                "recall_acc": report.accumulated_recall_by_epoch[i],
                "confidence_CM": confidence,
                "gate_active": rec.gate_active,
            }
        )
    return rows


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    if cfg.world.source != "synthetic":
        raise ConfigError("simulate requires world.source == 'synthetic'")
    out = _prepare_out(cfg)
    world = _build_world(cfg)
    save_world(world, out)
    print(f"simulated {world.instance_count} instances over {world.class_count} classes -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    if cfg.train.method == "gpr_file_scorer" and cfg.world.source != "files":
        raise ConfigError("method gpr_file_scorer requires world.source == 'files'")
    out = _prepare_out(cfg)
    world = _build_world(cfg)
    trainer = Trainer(world, cfg.gpr, cfg.damp, cfg.train, score_noise_sigma=cfg.world.score_noise_sigma)
    model, history = trainer.fit()

    evaluation.write_metrics_csv(os.path.join(out, "metrics.csv"), _metric_rows(history))
    save_checkpoint(model, os.path.join(out, "checkpoint.txt"))
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(history.to_dict(), fh, indent=2, sort_keys=True)

    from .trainer import forward

    val_preds = forward(model, world.feature_matrix(trainer.val_indices))
    hist = evaluation.probability_histogram(val_preds, world.truth_matrix(trainer.val_indices))
    evaluation.write_histogram_csv(os.path.join(out, "histogram.csv"), hist)

    print(f"mAP={history.best_val_map}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    if args.param not in SWEEPABLE:
        raise ConfigError(f"parameter {args.param!r} is not sweepable; choose from {SWEEPABLE}")
    values = []
    for chunk in args.values.split(","):
        chunk = chunk.strip()
        try:
            values.append(int(chunk) if args.param == "grid_size" else float(chunk))
        except ValueError as exc:
            raise ConfigError(f"bad sweep value {chunk!r}") from exc
    if not values:
        raise ConfigError("empty sweep value list")

    out = _prepare_out(cfg)
    world = _build_world(cfg)
    rows = []
    for value in values:
        damp_cfg = dataclasses.replace(cfg.damp, **{args.param: value})
        trainer = Trainer(world, cfg.gpr, damp_cfg, cfg.train, score_noise_sigma=cfg.world.score_noise_sigma)
        _, history = trainer.fit()
        rows.append((value, history.best_val_map))
        print(f"{args.param}={value} mAP={history.best_val_map}")

    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        fh.write("value,mAP\n")
        for value, val_map in rows:
            fh.write(f"{value},{val_map!r}\n")
    return 0


def cmd_audit_pseudo(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    out = _prepare_out(cfg)
    world = _build_world(cfg)
    maps = {inst.image_id: inst.score_map for inst in world.instances}
    scorer = MapScorer(maps, tau=cfg.damp.tau, noise_sigma=cfg.world.score_noise_sigma)
    annotations = world.annotation_matrix()
    truths = world.truth_matrix()
    image_ids = [inst.image_id for inst in world.instances]
    positives = [inst.annotation_class for inst in world.instances]

    epoch_labels = []
    for epoch in range(cfg.train.epochs):
        epoch_out = damp_mod.generate_epoch(
            image_ids,
            positives,
            scorer,
            cfg.damp,
            cfg.gpr,
            epoch=epoch,
            master_seed=cfg.train.seed,
        )
        epoch_labels.append(epoch_out.labels)
    report = evaluation.pseudo_quality(epoch_labels, truths, annotations)

    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(os.path.join(out, "audit.csv"), "w", newline="") as fh:
        fh.write("kind,epoch,precision,recall\n")
        for e in range(cfg.train.epochs):
            fh.write(
                f"per_epoch,{e},{fmt(report.per_epoch_precision[e])},{fmt(report.per_epoch_recall[e])}\n"
            )
        fh.write(f"average,,{fmt(report.average_precision)},{fmt(report.average_recall)}\n")
        fh.write(
            f"accumulated,,{fmt(report.accumulated_precision)},{fmt(report.accumulated_recall)}\n"
        )
    print(
        "audit: "
        f"avg_precision={fmt(report.average_precision)} avg_recall={fmt(report.average_recall)} "
        f"acc_precision={fmt(report.accumulated_precision)} acc_recall={fmt(report.accumulated_recall)}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spml-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the YAML experiment config")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("simulate", help="write a synthetic world (SSM1 maps + manifest)")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help=f"train a model; methods: {', '.join(METHODS)}")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="one training run per parameter value")
    common(p)
    p.add_argument("--param", required=True, help=f"sweepable parameter: {', '.join(SWEEPABLE)}")
    p.add_argument("--values", required=True, help="comma-separated value list")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit-pseudo", help="run the pseudo-labeler alone and score it")
    common(p)
    p.set_defaults(func=cmd_audit_pseudo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpmlLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
