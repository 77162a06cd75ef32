"""Command line entry point: ``fusion collect|train|eval|analyze-attention``.

Configuration is a JSON file (sections ``dataset``, ``model``, ``trainer``,
``rollout`` plus top-level ``seed``) merged over the defaults, then dotted
``--set section.key=value`` overrides.  Unknown keys are rejected.  Every
command writes ``run.json`` (resolved config, input checksums, versions)
into its output directory before doing any work.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import platform
import sys
import zlib
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import dataset as D
from .model import ModelConfig, attention_entropy, entropy_windows, mean_attention_maps
from .policies import DEFAULT_POLICY_MIX
from .rollout import RolloutConfig, evaluate
from .trainer import ABLATIONS, TrainConfig, fit, load_model

ENV_RUN_DIR = "FUSION_RUN_DIR"


class ConfigError(Exception):
    pass


def default_config() -> dict:
    return {
        "seed": 0,
        "dataset": {"episodes": 200, "split": "train", "policy_mix": [list(m) for m in DEFAULT_POLICY_MIX]},
        "model": asdict(ModelConfig()),
        "trainer": TrainConfig().to_dict(),
        "rollout": {"R0": None, "C0": 1.0, "H": None, "episode_cap": 1000, "deterministic": True},
    }


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge that refuses keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if path:
        try:
            cfg = merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        cfg = merge(cfg, parse_override(item))
    return cfg


def build_train_config(cfg: dict) -> tuple[TrainConfig, ModelConfig]:
    try:
        return TrainConfig(**cfg["trainer"]), ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def crc32_file(path: Path) -> str:
    return f"{zlib.crc32(path.read_bytes()) & 0xFFFFFFFF:08x}"


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"fusion": pkg, "python": platform.python_version(), "numpy": np.__version__}


def write_run_record(out: Path, command: str, argv: list[str], config: dict, inputs: dict[str, Path]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {name: {"path": str(p), "crc32": crc32_file(p)} for name, p in sorted(inputs.items())},
        "versions": versions(),
    }
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True))


def output_dir(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(ENV_RUN_DIR)
    if not root:
        raise ConfigError(f"--out is required when {ENV_RUN_DIR} is not set")
    return Path(root) / default_name


def checkpoint_stem(arg: str) -> Path:
    p = Path(arg)
    if p.is_dir():
        p = p / "best"
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise FileNotFoundError(f"no checkpoint at {p}.json")
    return p


def recorded_dataset(stem: Path) -> Path | None:
    """Dataset directory named in the training run record next to a checkpoint."""
    record = stem.parent / "run.json"
    if not record.exists():
        return None
    inputs = json.loads(record.read_text()).get("inputs", {})
    if "manifest.json" not in inputs:
        return None
    return Path(inputs["manifest.json"]["path"]).parent


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma separated list of integers, got {text!r}") from exc


# ----------------------------------------------------------------------------
# commands


def cmd_collect(args, argv) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.episodes is not None:
        cfg["dataset"]["episodes"] = args.episodes
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.split is not None:
        cfg["dataset"]["split"] = args.split
    ds_cfg = cfg["dataset"]
    if ds_cfg["split"] not in ("train", "test"):
        raise ConfigError(f"unknown split {ds_cfg['split']!r}")
    out = output_dir(args.out, "data")
    write_run_record(out, "collect", argv, cfg, {})
    mix = tuple((str(n), float(w), float(z)) for n, w, z in ds_cfg["policy_mix"])
    ds = D.collect(int(ds_cfg["episodes"]), ds_cfg["split"], mix, int(cfg["seed"]), out)
    print(json.dumps(ds.manifest(), indent=1, sort_keys=True))
    return 0


def cmd_train(args, argv) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.ablation is not None:
        cfg["trainer"]["ablation"] = args.ablation
    if args.steps is not None:
        cfg["trainer"]["steps"] = args.steps
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["trainer"]["seed"] = cfg["seed"]
    tcfg, mcfg = build_train_config(cfg)
    cfg["trainer"] = tcfg.to_dict()
    data = Path(args.data)
    out = output_dir(args.out, f"train_{tcfg.ablation}")
    inputs = {"manifest.json": data / "manifest.json", "episodes.jsonl": data / "episodes.jsonl"}
    missing = [str(p) for p in inputs.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"dataset files missing: {', '.join(missing)}")
    write_run_record(out, "train", argv, cfg, inputs)
    ds = D.load(data)
    result = fit(ds, tcfg, mcfg, out, resume=args.resume)
    from .report import loss_curve

    loss_curve(result.log, out / "loss_curve.png")
    last = [r for r in result.log if "losses" in r][-1]
    print(json.dumps({"steps": last["step"], "final_losses": last["losses"], "best_success": result.best_success,
                      "checkpoint": str(out / "final")}, indent=1, sort_keys=True))
    return 0


def cmd_eval(args, argv) -> int:
    cfg = resolve_config(args.config, args.set)
    seeds = parse_seeds(args.seeds)
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    stem = checkpoint_stem(args.checkpoint)
    model, hyper = load_model(stem)
    rc = dict(cfg["rollout"])
    rc["R0"] = hyper.get("return_p90", 0.0) if rc["R0"] is None else rc["R0"]
    rc["H"] = model.cfg.context_len if rc["H"] is None else rc["H"]
    try:
        rcfg = RolloutConfig(**rc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg["rollout"] = rc
    out = output_dir(args.out, f"eval_{args.setting}")
    write_run_record(out, "eval", argv, cfg, {"checkpoint.json": stem.with_suffix(".json"), "checkpoint.bin": stem.with_suffix(".bin")})
    report = evaluate(model, args.setting, args.episodes, seeds, rcfg)
    report.write(out)
    from .report import radar_plot

    radar_plot({"overall": report.categories["overall"], **report.categories["per_layout"]}, out / "radar.png",
               title=f"{args.setting} setting")
    sys.stdout.write(report.to_json() + "\n")
    sys.stdout.write("--- categories.csv ---\n" + report.categories_csv())
    return 0


def cmd_analyze(args, argv) -> int:
    cfg = resolve_config(args.config, args.set)
    stem = checkpoint_stem(args.checkpoint)
    model, hyper = load_model(stem)
    data = Path(args.data) if args.data else recorded_dataset(stem)
    if data is None or not (data / "manifest.json").exists():
        raise ConfigError("no dataset given (--data) and none recorded in the checkpoint")
    out = output_dir(args.out, "attention")
    write_run_record(out, "analyze-attention", argv, cfg, {"checkpoint.json": stem.with_suffix(".json"),
                                                           "manifest.json": data / "manifest.json"})
    ds = D.load(data)
    batch = entropy_windows(ds, args.episodes, model.cfg.context_len)
    per_layer = attention_entropy(model, batch)
    maps = mean_attention_maps(model, batch)
    result = {"episodes": int(batch.size), "per_layer_entropy": per_layer, "mean_entropy": float(np.mean(per_layer))}
    (out / "attention.json").write_text(json.dumps({**result, "maps": [m.tolist() for m in maps]}, sort_keys=True))
    from .report import attention_heatmaps

    attention_heatmaps(maps, out / "attention.png")
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fusion", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")

    p = sub.add_parser("collect", help="run scripted drivers and write an offline corpus")
    common(p)
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "test"))
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the sequence model on a corpus")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="run directory")
    p.add_argument("--ablation", choices=sorted(set(ABLATIONS) | {a.replace("_", "-") for a in ABLATIONS}))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpoint and write an evaluation report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--setting", required=True, choices=("policy", "dynamics"))
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-attention", help="per-layer attention entropy of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--data", help="dataset directory (defaults to the one used for training)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"fusion {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"fusion {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
