"""Command-line entry point wiring every module into reproducible commands.

Configuration precedence: CLI flag > --set override > config file > built-in
default. Overrides use dotted section keys (train.epochs=50, model.expansion=3,
pipeline.window=128, synth.n_per_class=512); unknown sections or keys are
rejected. Every artifact embeds the effective configuration and the package
version, so re-running a command from an artifact's embedded config reproduces
it bit-for-bit (benchmarks excepted).

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__, bench as bench_mod
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .errors import ConfigError, NumericalError
from .models import PRESETS, ModelConfig, build_model, count_params, memory_bits, param_table, preset
from .pipeline import (
    PipelineConfig,
    build_chunkset,
    read_shards,
    read_trials_dir,
    synth_dataset,
    write_shards,
)
from .training import TrainConfig, ablation_suite, evaluate, profile_config, split_train_val, train
from .ops import LossConfig

SECTIONS = {
    "train": TrainConfig,
    "model": ModelConfig,
    "pipeline": PipelineConfig,
    "synth": None,  # plain dict: {"n_per_class": int}
}
SYNTH_KEYS = {"n_per_class": int}


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        suffix = f"+{rev.stdout.strip()}" if rev.returncode == 0 and rev.stdout.strip() else ""
    except (OSError, subprocess.SubprocessError):
        suffix = ""
    return f"eegnet3d {__version__}{suffix}"


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    if typ in (tuple, list) or str(typ).startswith("tuple"):
        return tuple(int(v) for v in value.split(",") if v)
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {value!r} as {typ}: {exc}") from None


def _field_types(section: str) -> dict:
    cls = SECTIONS[section]
    if cls is None:
        return SYNTH_KEYS
    out = {}
    for f in dataclasses.fields(cls):
        typ = f.type
        if isinstance(typ, str):
            typ = {"int": int, "float": float, "bool": bool, "str": str}.get(
                typ.split("|")[0].strip(), None
            ) or (tuple if "tuple" in typ else str)
        out[f.name] = typ
    return out


def _validate_section(section: str, entries: dict) -> dict:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(SECTIONS)}")
    known = _field_types(section)
    for key in entries:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}; known keys: {sorted(known)}")
    return entries


def load_config(path: str | None, sets: list[str]) -> dict[str, dict]:
    cfg: dict[str, dict] = {s: {} for s in SECTIONS}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object of sections")
        for section, entries in raw.items():
            if not isinstance(entries, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            cfg[section] = dict(_validate_section(section, entries))
    for item in sets or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _validate_section(section, {key: value})
        types = _field_types(section)
        cfg.setdefault(section, {})[key] = _coerce(value, types[key])
    return cfg


def _apply_overrides(base, overrides: dict):
    return dataclasses.replace(base, **overrides) if overrides else base


def effective_config(args, cfg: dict, model_cfg=None, train_cfg=None, pipe_cfg=None) -> dict:
    out = {
        "command": args.command,
        "version": version_string(),
        "seed": getattr(args, "seed", None),
    }
    for name, obj in (("model", model_cfg), ("train", train_cfg), ("pipeline", pipe_cfg)):
        if obj is not None:
            out[name] = dataclasses.asdict(obj)
    if cfg.get("synth"):
        out["synth"] = cfg["synth"]
    return out


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    pipe = _apply_overrides(PipelineConfig(label_kind=args.label), cfg["pipeline"])
    n = int(cfg["synth"].get("n_per_class", args.n_per_class))
    chunks = synth_dataset(n, seed=args.seed, cfg=pipe)
    extra = {"provenance": effective_config(args, cfg, pipe_cfg=pipe)}
    write_shards(args.out, chunks, pipe, extra_meta=extra)
    print(f"synth: wrote {len(chunks)} chunks ({n} per class) to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, args.set)
    pipe = _apply_overrides(PipelineConfig(label_kind=args.label), cfg["pipeline"])
    trials = read_trials_dir(args.data)
    chunks = build_chunkset(trials, pipe)
    extra = {"provenance": effective_config(args, cfg, pipe_cfg=pipe)}
    write_shards(args.out, chunks, pipe, extra_meta=extra)
    print(f"preprocess: {len(trials)} trials -> {len(chunks)} chunks in {args.out}")
    return 0


def _build_configs(args, cfg):
    binary_model = bool(args.binary)
    model_over = dict(cfg["model"])
    model_over.setdefault("binary", binary_model)
    model_cfg = _apply_overrides(preset(args.arch, binary_model), {k: v for k, v in model_over.items() if k != "binary"})
    model_cfg = dataclasses.replace(model_cfg, binary=model_over["binary"])
    train_over = dict(cfg["train"])
    train_cfg = profile_config(args.profile, model_cfg.binary, seed=args.seed)
    if "epochs" in train_over and "lr_milestones" not in train_over:
        # profile milestones that no longer fit the shortened run are dropped
        train_over["lr_milestones"] = tuple(
            m for m in train_cfg.lr_milestones if m < int(train_over["epochs"])
        )
    train_cfg = _apply_overrides(train_cfg, train_over)
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    model_cfg, train_cfg = _build_configs(args, cfg)
    chunks, manifest = read_shards(args.data)
    labels = chunks.labels(args.label)
    (xt, yt), (xv, yv) = split_train_val(chunks.data, labels, 0.2, train_cfg.seed)
    graph = build_model(model_cfg, seed=train_cfg.seed)
    graph.meta["arch"] = args.arch
    result = train(graph, (xt, yt), (xv, yv), train_cfg)
    result.restore_best()

    os.makedirs(args.out, exist_ok=True)
    echo = effective_config(args, cfg, model_cfg=model_cfg, train_cfg=train_cfg)
    echo["label"] = args.label
    echo["data_manifest"] = {k: manifest[k] for k in ("config", "count") if k in manifest}
    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(graph, ckpt_path, extra=echo)
    with open(os.path.join(args.out, "epoch_log.jsonl"), "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    real, bin_ = count_params(graph)
    best = result.log[result.best_epoch]
    report = {
        "effective_config": echo,
        "real_params": real,
        "binary_params": bin_,
        "memory_mbits": memory_bits(real, bin_),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "best_val_metrics": {k: v for k, v in best.items() if k.startswith("val_")},
        "epochs": train_cfg.epochs,
    }
    _write_json(os.path.join(args.out, "report.json"), report)
    print(
        f"train[{args.arch}{'/binary' if model_cfg.binary else ''}]: "
        f"best val acc {result.best_val_accuracy:.4f} at epoch {result.best_epoch}; "
        f"artifacts in {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    graph = load_checkpoint(args.ckpt)
    chunks, _ = read_shards(args.data)
    labels = chunks.labels(args.label)
    metrics, loss = evaluate(graph, chunks.data, labels, loss_cfg=LossConfig())
    payload = {
        "checkpoint": os.path.abspath(args.ckpt),
        "count": len(chunks),
        "label": args.label,
        "loss": loss,
        **metrics.as_dict(),
        "version": version_string(),
    }
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    model_cfg, train_cfg = _build_configs(args, cfg)
    if not model_cfg.binary:
        model_cfg = dataclasses.replace(model_cfg, binary=True)
    chunks, _ = read_shards(args.data)
    labels = chunks.labels(args.label)
    (xt, yt), (xv, yv) = split_train_val(chunks.data, labels, 0.2, train_cfg.seed)
    rows = ablation_suite(model_cfg, (xt, yt), (xv, yv), train_cfg, model_seed=train_cfg.seed)
    payload = {
        "effective_config": effective_config(args, cfg, model_cfg=model_cfg, train_cfg=train_cfg),
        "rows": rows,
    }
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "ablation.json"), payload)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  val_acc  delta")
    for r in rows:
        delta = "-" if r["delta_vs_plain"] is None else f"{r['delta_vs_plain']:+.4f}"
        print(f"{r['variant']:<{width}}  {r['val_accuracy']:.4f}   {delta}")
    return 0


def cmd_bench(args) -> int:
    reports = bench_mod.canonical_kernel_suite(iterations=args.iterations)
    payload = {"version": version_string(), "kernel_suite": reports, "models": []}
    for arch in args.model or []:
        graph = build_model(preset(arch), seed=0)
        graph.meta["arch"] = arch
        payload["models"].append(bench_mod.bench_model(graph))
        bi = build_model(preset(arch, binary_model=True), seed=0)
        bi.meta["arch"] = f"bi-{arch}"
        payload["models"].append(bench_mod.bench_model(bi, use_packed=True))
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "bench.json"), payload)
    if args.csv:
        rows = [r[side] for r in reports for side in ("reference", "candidate")]
        rows += payload["models"]
        cols = ("case", "kernel", "median_ms", "p10_ms", "p90_ms", "ops_per_second",
                "speedup_vs_reference", "memory_mbits")
        with open(os.path.join(args.out, "bench.csv"), "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join("" if r.get(c) is None else str(r.get(c)) for c in cols) + "\n")
    for row in reports:
        print(f"{row['case']}: f32 {row['reference']['median_ms']:.2f} ms, "
              f"xnor {row['candidate']['median_ms']:.2f} ms, speedup {row['speedup']:.2f}x")
    return 0


def cmd_inspect(args) -> int:
    manifest = read_manifest(args.ckpt)
    graph = load_checkpoint(args.ckpt)
    real, bin_ = count_params(graph)
    rows = param_table(graph)
    payload = {
        "checkpoint": os.path.abspath(args.ckpt),
        "deploy": manifest.get("deploy", False),
        "model_config": manifest["model_config"],
        "real_params": real,
        "binary_params": bin_,
        "memory_mbits": memory_bits(real, bin_),
        "layers": rows,
        "version": version_string(),
    }
    if args.json:
        _write_json(args.json, payload)
    print(f"{'layer':<20} {'kind':<12} {'param':<8} {'shape':<22} {'count':>8}  precision")
    for r in rows:
        print(f"{r['layer']:<20} {r['kind']:<12} {r['param']:<8} "
              f"{str(r['shape']):<22} {r['count']:>8}  {r['precision']}")
    print(f"total: {real} real + {bin_} binary parameters, "
          f"{memory_bits(real, bin_):.4f} Mbits")
    return 0


def cmd_export(args) -> int:
    graph = load_checkpoint(args.ckpt)
    save_checkpoint(graph, args.out, deploy=True)
    print(f"export: wrote inference-only checkpoint to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(sub, data=False, out=True, arch=False):
    sub.add_argument("--config", help="JSON config file with train/model/pipeline sections")
    sub.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="config override, e.g. train.epochs=50")
    sub.add_argument("--seed", type=int, default=0)
    if data:
        sub.add_argument("--data", required=True, help="input directory")
    if out:
        sub.add_argument("--out", required=True, help="output directory")
    if arch:
        sub.add_argument("--arch", choices=sorted(PRESETS), default="v1")
        sub.add_argument("--binary", action="store_true", help="binarized variant")
        sub.add_argument("--profile", choices=("paper", "desk"), default="desk")
    sub.add_argument("--label", choices=("valence", "arousal"), default="valence")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eegnet3d", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic chunk shards")
    _common(s)
    s.add_argument("--n-per-class", type=int, default=512)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("preprocess", help="convert raw trials (NTF + ratings) to chunk shards")
    _common(s, data=True)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on chunk shards")
    _common(s, data=True, arch=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on chunk shards")
    _common(s, data=True, out=False)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", help="optional metrics JSON path")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train all technique combinations (binary model)")
    _common(s, data=True, arch=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("bench", help="kernel and model benchmarks")
    _common(s, out=True)
    s.add_argument("--iterations", type=int, default=30)
    s.add_argument("--model", action="append", choices=sorted(PRESETS),
                   help="also bench end-to-end latency for this preset (repeatable)")
    s.add_argument("--csv", action="store_true", help="also write bench.csv for plotting")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("inspect", help="print layer table, parameter counts, memory budget")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--json", help="optional JSON output path")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("export", help="write an inference-only (deploy) checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        print(f'error kind=config reason="{exc}"', file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError, PermissionError, OSError) as exc:
        print(f'error kind=io reason="{exc}"', file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f'error kind=numerical reason="{exc}"', file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
