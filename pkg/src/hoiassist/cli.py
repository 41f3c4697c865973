"""Command-line entry point: dataset generation, training, evaluation and scenario runs."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import scenario as sc
from .mpm import checkpoint
from .mpm.training import TrainingConfig, accuracy, confusion_matrix, train_mpm

log = logging.getLogger("hoiassist")

DEFAULT_CONFIG = {
    "dataset": {"seed": 0, "frames": 2000, "samples_per_class": 250, "window_stride": 10, "smoothing": 5,
                "jitter": ds.GeneratorConfig.jitter},
    "training": {"epochs": 100, "learning_rate": 2.5e-4, "batch_size": 512, "seed": 0, "optimizer": "adam",
                 "train_fraction": 0.8, "split_seed": 0},
}
BUILTIN_SCENARIOS = {"ring": "ring_scenario.json", "disturbance": "disturbance_scenario.json"}


class CliError(Exception):
    pass


def load_config(path) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return config
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    for section, values in user.items():
        if section not in config:
            raise CliError(f"unknown config section {section!r}")
        unknown = set(values) - set(config[section])
        if unknown:
            raise CliError(f"unknown {section} keys: {sorted(unknown)}")
        config[section].update(values)
    return config


def data_path(name: str) -> Path:
    return Path(str(resources.files("hoiassist") / "data" / name))


def resolve_scenario(arg: str) -> sc.ScenarioScript:
    path = data_path(BUILTIN_SCENARIOS[arg]) if arg in BUILTIN_SCENARIOS else Path(arg)
    try:
        return sc.load_script(path)
    except OSError as exc:
        raise CliError(f"cannot read scenario {arg}: {exc}") from None


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)["dataset"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    # fail before writing anything if the recipe cannot be cut from these trajectories
    ds.window_offsets(cfg["frames"], cfg["samples_per_class"], cfg["window_stride"])
    manifest = ds.DatasetManifest(seed=cfg["seed"], frames=cfg["frames"], jitter=cfg["jitter"],
                                  window_stride=cfg["window_stride"], samples_per_class=cfg["samples_per_class"],
                                  smoothing=cfg["smoothing"])
    try:
        trajectories = ds.generate_default_trajectories(cfg["seed"], cfg["frames"],
                                                        config=ds.GeneratorConfig(jitter=cfg["jitter"]))
    except ValueError as exc:
        raise CliError(f"cannot generate dataset: {exc}") from None
    try:
        out = ds.save_dataset(args.out, manifest, trajectories)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(trajectories)} trajectories, {manifest.total_windows} windows to {out}")
    return 0


def _load_data(path):
    try:
        return ds.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}") from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)["training"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    manifest, data = _load_data(args.dataset)
    if data.windows.shape[1:] != (10, 63):
        raise CliError(f"dataset windows have shape {data.windows.shape[1:]}, expected (10, 63)")
    train, val = ds.stratified_split(data, cfg.pop("train_fraction"), cfg.pop("split_seed"))
    try:
        config = TrainingConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from None
    start = time.perf_counter()
    net, trace = train_mpm(train, val, config)
    elapsed = time.perf_counter() - start
    ckpt = Path(args.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(net, ckpt, manifest.classes)
    report = {"checkpoint": str(ckpt), "config": asdict(config), "train_windows": len(train),
              "validation_windows": len(val), "final_validation_accuracy": trace.final_val_accuracy,
              "final_train_loss": trace.train_loss[-1], "train_loss": trace.train_loss,
              "validation_accuracy": trace.val_accuracy, "seconds": elapsed}
    report_path = Path(args.out) / "train_report.json" if args.out else ckpt.with_suffix(".report.json")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"validation accuracy {trace.final_val_accuracy:.4f}, final loss {trace.train_loss[-1]:.4f}, "
          f"{elapsed:.1f} s; checkpoint {ckpt}")
    return 0


def _load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    net, names = _load_checkpoint(args.checkpoint)
    manifest, data = _load_data(args.dataset)
    if tuple(names) != tuple(manifest.classes):
        raise CliError(f"checkpoint classes {list(names)} do not match dataset classes {list(manifest.classes)}")
    cm = confusion_matrix(net, data)
    acc = accuracy(net, data)
    per_class = cm.diagonal() / np.maximum(cm.sum(axis=1), 1)
    print(f"accuracy {acc:.4f} on {len(data)} windows")
    for name, a in zip(names, per_class):
        print(f"  {name:<5} {a:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "confusion.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *names])
            for name, row in zip(names, cm):
                w.writerow([name, *row.tolist()])
        with (out / "per_class.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "samples", "accuracy"])
            for name, row, a in zip(names, cm, per_class):
                w.writerow([name, int(row.sum()), repr(float(a))])
        (out / "eval.json").write_text(json.dumps({"accuracy": acc, "confusion": cm.tolist(),
                                                   "classes": list(names)}, indent=2) + "\n")
    return 0


def cmd_run_scenario(args) -> int:
    script = resolve_scenario(args.scenario)
    net, names = (None, None)
    if args.checkpoint:
        net, names = _load_checkpoint(args.checkpoint)
    try:
        run = sc.run_scenario(script, net, class_names=names)
    except sc.ScriptError as exc:
        raise CliError(str(exc)) from None
    if args.out:
        try:
            sc.write_outputs(run, args.out)
        except OSError as exc:
            raise CliError(f"cannot write run outputs to {args.out}: {exc}") from None
    print(f"scenario {script.name}")
    print(run.report.summary(script.thresholds), end="")
    return 0 if run.report.passed(script.thresholds) else 1


def cmd_replay(args) -> int:
    if not args.out:
        raise CliError("replay needs --out pointing at a finished run directory")
    script = resolve_scenario(args.scenario) if args.scenario else None
    try:
        report = sc.replay(args.out, script)
        script = script or sc.load_script(Path(args.out) / "scenario.json")
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot replay {args.out}: {exc}") from None
    print(f"replay of scenario {script.name}")
    print(report.summary(script.thresholds), end="")
    return 0 if report.passed(script.thresholds) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoiassist", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic gesture dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the classifier on a generated dataset")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for train_report.json (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix on a dataset")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-scenario", help="run a scripted scenario on the simulated clock")
    p.add_argument("--scenario", default="ring", help="script path or one of: " + ", ".join(BUILTIN_SCENARIOS))
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("replay", help="recompute metrics from a finished run's traces")
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", help="override the thresholds with another script")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ds.InsufficientData) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
