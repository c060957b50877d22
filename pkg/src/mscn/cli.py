"""Command-line entry point: ``mscn <command> [options] [key=value ...]``.

Commands: gen-data, train, expand-train, eval, sweep, cross-res, export-plots.
Config precedence is key=value overrides > --config file > defaults. The seed
comes from --seed, then the resolved config, then ``MSCN_SEED``, then 0.

Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from .expansion import DivergenceError, ExpansionConfig, progressive_train, save_expansion
from .geometry import GeometryError, Placement, Transform
from .harness import (ExperimentConfig, ToySpec, baseline_pointwise, cross_resolution_eval,
                      evaluate, load_split, perturbation_sweep, plot_sweeps, resolution_set,
                      train_source, write_csv, write_toy_benchmark)
from .layers import ConfigError, load_checkpoint, save_checkpoint

log = logging.getLogger("mscn")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# config resolution

def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Set dotted ``key=value`` pairs in a nested dict; unknown keys are errors."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(value)
    return doc


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def merge_known(defaults: dict, doc: dict, what: str) -> dict:
    out = dict(defaults)
    for k, v in doc.items():
        if k not in defaults:
            raise UsageError(f"unknown {what} key {k!r}")
        if isinstance(defaults[k], dict) and isinstance(v, dict):
            out[k] = merge_known(defaults[k], v, f"{what}.{k}")
        else:
            out[k] = v
    return out


def resolve_seed(args, doc: dict, explicit: bool) -> int:
    if args.seed is not None:
        return args.seed
    if explicit:
        return int(doc["seed"])
    env = os.environ.get("MSCN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise UsageError(f"MSCN_SEED must be an integer, got {env!r}") from e
    return int(doc.get("seed", 0))


def resolve(args, defaults: dict, what: str) -> dict:
    file_doc = read_config(args.config)
    doc = apply_overrides(merge_known(defaults, file_doc, what), args.overrides)
    explicit = "seed" in file_doc or any(o.split("=", 1)[0] == "seed" for o in args.overrides)
    if "seed" in doc:
        doc["seed"] = resolve_seed(args, doc, explicit)
    return doc


def experiment_config(args) -> ExperimentConfig:
    doc = resolve(args, ExperimentConfig().to_json(), "experiment")
    if getattr(args, "data", None):
        data = Path(args.data)
        doc["train_manifest"] = str(data / "train" / "manifest.json")
        doc["test_manifest"] = str(data / "test" / "manifest.json")
    return ExperimentConfig.from_json(doc)


def toy_spec(doc: dict) -> ToySpec:
    doc = dict(doc)
    placement = doc.pop("placement")
    return ToySpec(**doc, placement=None if placement is None else Placement(**placement))


def version_string() -> str:
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


# --------------------------------------------------------------------------
# output directories

class OutputDir:
    """Build into a hidden sibling directory and move it to ``path`` on success.

    An existing target is replaced only if it holds a previous ``run.json``.
    """

    def __init__(self, path):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()) and not (self.path / "run.json").exists():
            raise UsageError(f"output directory {self.path} is not empty and is not a previous run")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))

    def commit(self):
        if self.path.exists():
            shutil.rmtree(self.path)
        os.replace(self.tmp, self.path)

    def abort(self):
        """Keep whatever was written as ``<out>.partial``; returns its path or None."""
        if not any(self.tmp.iterdir()):
            self.tmp.rmdir()
            return None
        partial = self.path.with_name(self.path.name + ".partial")
        if partial.exists():
            shutil.rmtree(partial)
        os.replace(self.tmp, partial)
        return partial


def write_run_json(out: Path, command: str, argv, config: dict, seed: int, extra=None) -> None:
    doc = {"command": command, "argv": list(argv), "config": config, "seed": seed,
           "version": version_string()}
    doc.update(extra or {})
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def open_model(path):
    if not (Path(path) / "meta.json").exists():
        raise UsageError(f"no checkpoint at {path}")
    model, _ = load_checkpoint(path)
    return model


def load_test_clouds(cfg: ExperimentConfig, manifest=None):
    path = manifest or cfg.test_manifest
    if not path:
        raise UsageError("no test manifest (use --data, --manifest or test_manifest=...)")
    return load_split(path)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args, out: Path):
    doc = resolve(args, {**asdict(ToySpec()), "seed": 0}, "gen-data")
    seed = doc.pop("seed")
    spec = toy_spec(doc)
    paths = write_toy_benchmark(out, spec, seed)
    config = {**asdict(spec), "seed": seed}
    return config, seed, {"manifests": {k: str(Path(v).relative_to(out)) for k, v in paths.items()}}


def cmd_train(args, out: Path):
    cfg = experiment_config(args)
    if not cfg.train_manifest:
        raise UsageError("no train manifest (use --data or train_manifest=...)")
    train = load_split(cfg.train_manifest)
    torch.manual_seed(cfg.seed)
    epochs = []
    if args.model == "mscn":
        model, history = train_source(train, cfg, epochs.append)
    else:
        model, history = baseline_pointwise(train, cfg, args.model == "pointwise", epochs.append)
    save_checkpoint(out / "model", model, {"seed": cfg.seed, "history": history})
    extra = {"epochs": len(history), "model": args.model}
    if cfg.test_manifest:
        row = evaluate(model, load_split(cfg.test_manifest), seed=0, scenario="test")
        write_csv(out / "metrics.csv", [row])
        extra["test_accuracy"] = row.accuracy
        print(f"test accuracy {row.accuracy:.4f}")
    return cfg.to_json(), cfg.seed, extra


def cmd_expand_train(args, out: Path):
    if not args.checkpoint or not (Path(args.checkpoint) / "meta.json").exists():
        raise UsageError(f"missing pretrained checkpoint {args.checkpoint!r}")
    if not args.data:
        raise UsageError("expand-train needs --data")
    doc = resolve(args, asdict(ExpansionConfig()), "expansion")
    if args.cycles is not None:
        doc["cycles"] = args.cycles
    if args.epochs_per_cycle is not None:
        doc["epochs_per_cycle"] = args.epochs_per_cycle
    cfg = ExpansionConfig(**doc)
    cfg.validate()
    model = open_model(args.checkpoint)
    train = load_split(Path(args.data) / "train" / "manifest.json")

    def on_epoch(row):
        if row["phase"] == "model":
            print(f"cycle {row['cycle']} epoch {row['epoch']} loss {row['loss']:.4f}", flush=True)

    model, proj, state = progressive_train(model, train, cfg, on_epoch, dump_dir=out)
    save_expansion(out, model, proj, state, write_pools=not args.no_pools)
    return asdict(cfg), cfg.seed, {"epochs": state.epoch, "cycles": state.cycle,
                                   "encoder_hash": state.encoder_hash}


def cmd_eval(args, out: Path):
    cfg = experiment_config(args)
    model = open_model(args.checkpoint)
    clouds = load_test_clouds(cfg, args.manifest)
    transform = Transform()
    if args.transform:
        kind, _, value = args.transform.partition(":")
        kinds = {"rotation": "rotate_z", "shift": "shift_random", "scale": "scale"}
        if kind not in kinds:
            raise UsageError(f"unknown transform {kind!r}; expected one of {sorted(kinds)}")
        transform = Transform(kinds[kind], float(value or 0.0), cfg.seed)
    row = evaluate(model, clouds, transform, seed=0, scenario="eval", param=transform.value)
    write_csv(out / "metrics.csv", [row])
    print(f"accuracy {row.accuracy:.4f} latency {row.latency_ms:.2f} ms")
    return cfg.to_json(), cfg.seed, {"accuracy": row.accuracy}


def cmd_sweep(args, out: Path):
    cfg = experiment_config(args)
    model = open_model(args.checkpoint)
    clouds = load_test_clouds(cfg, args.manifest)
    grids = {"rotation": cfg.rotations, "shift": cfg.shifts, "scale": cfg.scales}
    kinds = list(grids) if args.kind == "all" else [args.kind]
    produced = {}
    for kind in kinds:
        path = out / f"sweep_{kind}.csv"
        rows = perturbation_sweep(model, clouds, kind, grids[kind], path, seed=cfg.seed)
        produced[kind] = [r.accuracy for r in rows]
        print(kind, " ".join(f"{r.param:g}:{r.accuracy:.3f}" for r in rows))
        if args.plot:
            plot_sweeps({kind: path}, out / f"sweep_{kind}.png")
    return cfg.to_json(), cfg.seed, {"sweeps": produced}


def cmd_cross_res(args, out: Path):
    cfg = experiment_config(args)
    clouds = load_test_clouds(cfg, args.manifest)
    models = {}
    for item in args.checkpoint:
        name, _, path = item.rpartition("=")
        models[name or cfg.resolutions[0]["name"]] = open_model(path)
    sets = {spec["name"]: resolution_set(clouds, spec) for spec in cfg.resolutions}
    rows, drop = cross_resolution_eval(models, sets)
    write_csv(out / "cross_res.csv", rows)
    (out / "drop.json").write_text(json.dumps(drop, indent=2, sort_keys=True))
    for r in rows:
        print(f"{r.scenario} {r.accuracy:.4f}")
    return cfg.to_json(), cfg.seed, {"drop": drop}


def cmd_export_plots(args, out: Path):
    csvs = {}
    for item in args.csv:
        label, _, path = item.rpartition("=")
        if not Path(path).exists():
            raise UsageError(f"no such CSV {path}")
        csvs[label or Path(path).stem] = path
    if not csvs:
        raise UsageError("export-plots needs at least one CSV")
    plot_sweeps(csvs, out / args.name)
    return {"csv": csvs, "name": args.name}, 0, {}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "expand-train": cmd_expand_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "cross-res": cmd_cross_res,
            "export-plots": cmd_export_plots}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mscn", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_, overrides=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        if overrides:
            p.add_argument("overrides", nargs="*", metavar="key=value")
        return p

    common("gen-data", "write the synthetic train/test benchmark")
    p = common("train", "train a classifier from scratch")
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--model", choices=["mscn", "pointwise", "pointwise-raw"], default="mscn")
    p = common("expand-train", "progressive domain expansion from a pretrained checkpoint")
    p.add_argument("--checkpoint", help="pretrained model checkpoint directory")
    p.add_argument("--data")
    p.add_argument("--cycles", type=int)
    p.add_argument("--epochs-per-cycle", type=int)
    p.add_argument("--no-pools", action="store_true", help="do not write generated clouds")
    for name, help_ in (("eval", "evaluate a checkpoint"), ("sweep", "perturbation sweeps"),
                        ("cross-res", "cross-resolution accuracy drop matrix")):
        p = common(name, help_)
        p.add_argument("--data")
        p.add_argument("--manifest", help="test manifest (overrides --data)")
        if name == "cross-res":
            p.add_argument("--checkpoint", action="append", required=True,
                           help="[train_density=]path, repeatable")
        else:
            p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--transform", help="rotation:DEG, shift:RADIUS or scale:FACTOR")
        if name == "sweep":
            p.add_argument("--kind", choices=["rotation", "shift", "scale", "all"], default="all")
            p.add_argument("--plot", action="store_true")
    p = common("export-plots", "line plots from sweep CSVs", overrides=False)
    p.add_argument("csv", nargs="+", metavar="[label=]path.csv")
    p.add_argument("--name", default="sweeps.png")
    p.set_defaults(overrides=[])
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = OutputDir(args.out)
        config, seed, extra = COMMANDS[args.command](args, out.tmp)
        write_run_json(out.tmp, args.command, argv, config, seed, extra)
        out.commit()
        return 0
    except (UsageError, ConfigError, GeometryError, FileNotFoundError, TypeError, ValueError) as e:
        code, message = 1, f"error: {e}"
    except (DivergenceError, FloatingPointError, RuntimeError, OSError) as e:
        code, message = 2, f"runtime error: {e}"
    partial = out.abort() if out is not None else None
    if partial is not None:
        print(f"partial output kept in {partial}", file=sys.stderr)
    print(f"mscn: {message}", file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
