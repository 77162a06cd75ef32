"""Offline training: world-model updates alternating with encoder updates.

Every iteration samples one window batch, takes an Adam step on the
trajectory loss over all parameters, then (unless disabled) an Adam step on
``beta * bisim_loss`` over the encoder only.  Batching, pairing and dropout
draw from separate seeded streams so switching the bisimulation update off
does not perturb the other two.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .cbl import BisimConfig, bisim_loss, bisim_target, encoder_update, pairs_from_batch
from .dataset import DatasetError, OfflineDataset
from .model import LOSS_TERMS, CausalTransformer, ModelConfig, traj_loss
from .optim import OptimState, adam_step, clip_grad_norm, collect_grads

ABLATIONS = ("full", "short", "no_cewm", "no_cbl")
SHORT_CONTEXT = 5


def canonical_ablation(name: str) -> str:
    key = name.replace("-", "_")
    if key not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}")
    return key


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_model: float = 1e-3
    lr_encoder: float = 1e-4  # Adam undoes beta, so this sets the CBL strength
    beta: float = 0.5  # weight of the bisimulation loss
    ablation: str = "full"
    eval_interval: int = 1000  # 0 disables periodic evaluation
    eval_episodes: int = 4
    checkpoint_interval: int = 500
    seed: int = 0
    grad_clip: float = 1.0
    bisim: BisimConfig = field(default_factory=BisimConfig)

    def __post_init__(self):
        if isinstance(self.bisim, dict):
            self.bisim = BisimConfig(**self.bisim)
        self.ablation = canonical_ablation(self.ablation)
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    @property
    def terms(self) -> tuple[str, ...]:
        return ("act",) if self.ablation == "no_cewm" else LOSS_TERMS

    @property
    def use_cbl(self) -> bool:
        return self.ablation != "no_cbl"

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return replace(base, context_len=SHORT_CONTEXT) if self.ablation == "short" else base

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainState:
    model_opt: OptimState
    enc_opt: OptimState
    rng_batch: np.random.Generator
    rng_pair: np.random.Generator
    rng_dropout: np.random.Generator
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        streams = np.random.SeedSequence(cfg.seed).spawn(3)
        return cls(
            OptimState(lr=cfg.lr_model),
            OptimState(lr=cfg.lr_encoder),
            *(np.random.default_rng(s) for s in streams),
        )


def _finite_or_raise(value: float, what: str, step: int, breakdown: dict, batch) -> None:
    if not math.isfinite(value):
        dump = {"step": step, "term": what, "breakdown": breakdown, "batch_index": batch.index.tolist()}
        raise TrainingDiverged(f"non-finite {what} loss at step {step}", dump)


def train_step(model: CausalTransformer, batch, cfg: TrainConfig, state: TrainState) -> dict:
    """One world-model update and, unless ``no_cbl``, one encoder update."""
    terms = cfg.terms
    out = model(batch, training=True, rng=state.rng_dropout, with_dynamics="dyn" in terms)
    loss, br = traj_loss(model, out, batch, terms)
    _finite_or_raise(br["total"], "trajectory", state.step, br, batch)
    model.zero_grad()
    loss.backward()
    grads = collect_grads(model.params)
    br["grad_norm"] = clip_grad_norm(grads, cfg.grad_clip)
    adam_step(model.params, grads, state.model_opt)
    model.zero_grad()
    if cfg.use_cbl:
        pair = pairs_from_batch(model, batch, out.dyn, state.rng_pair)
        lb = bisim_loss(model, pair, bisim_target(pair, cfg.bisim))
        br["bisim"] = lb.item()
        _finite_or_raise(br["bisim"], "bisimulation", state.step, br, batch)
        encoder_update(model, lb * cfg.beta, state.enc_opt, cfg.grad_clip)
    state.step += 1
    return br


# ----------------------------------------------------------------------------
# checkpoints


def model_hyperparameters(model: CausalTransformer, cfg: TrainConfig, dataset: OfflineDataset) -> dict:
    return {
        **model.hyperparameters(),
        "train": cfg.to_dict(),
        "return_p90": dataset.stats.get("return_p90", 0.0),
    }


def save_model(stem, model: CausalTransformer, hyper: dict) -> None:
    ckpt.save_arrays(stem, model.state_dict(), hyper)


def load_model(stem) -> tuple[CausalTransformer, dict]:
    arrays, hyper = ckpt.load_arrays(stem)
    model = CausalTransformer(ModelConfig(**hyper["model"]), norm=hyper.get("norm"))
    model.load_state_dict(arrays)
    return model, hyper


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    g = np.random.default_rng()
    g.bit_generator.state = state
    return g


def save_train_state(stem, model: CausalTransformer, state: TrainState, hyper: dict, extra: dict) -> None:
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    for tag, opt in (("model", state.model_opt), ("enc", state.enc_opt)):
        for k in opt.m:
            arrays[f"opt.{tag}.m.{k}"] = opt.m[k]
            arrays[f"opt.{tag}.v.{k}"] = opt.v[k]
    meta = {
        **hyper,
        "resume": {
            "step": state.step,
            "opt_steps": {"model": state.model_opt.step, "enc": state.enc_opt.step},
            "rng": {n: _rng_state(getattr(state, n)) for n in ("rng_batch", "rng_pair", "rng_dropout")},
            **extra,
        },
    }
    ckpt.save_arrays(stem, arrays, meta)


def load_train_state(stem, model: CausalTransformer, cfg: TrainConfig) -> tuple[TrainState, dict]:
    arrays, meta = ckpt.load_arrays(stem)
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    res = meta["resume"]
    state = TrainState(
        OptimState(lr=cfg.lr_model, step=res["opt_steps"]["model"]),
        OptimState(lr=cfg.lr_encoder, step=res["opt_steps"]["enc"]),
        *(_restore_rng(res["rng"][n]) for n in ("rng_batch", "rng_pair", "rng_dropout")),
        step=res["step"],
    )
    for tag, opt in (("model", state.model_opt), ("enc", state.enc_opt)):
        for key, arr in arrays.items():
            prefix = f"opt.{tag}.m."
            if key.startswith(prefix):
                name = key[len(prefix):]
                opt.m[name] = arr.copy()
                opt.v[name] = arrays[f"opt.{tag}.v.{name}"].copy()
    return state, res


# ----------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    model: CausalTransformer
    log: list[dict]
    best_success: float | None
    out_dir: Path | None


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in rows if r["step"] <= upto]


def fit(
    dataset: OfflineDataset,
    cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    out_dir: str | os.PathLike | None = None,
    resume: bool = False,
    progress=None,
    meta: dict | None = None,
) -> FitResult:
    """Train for ``cfg.steps`` iterations.

    With ``out_dir`` set, writes ``train_log.jsonl``, ``config.json``,
    ``final``/``best`` model checkpoints and a ``last`` resumable state.
    ``resume`` continues from ``last`` when present.  ``meta`` is merged
    into the checkpoint hyperparameters.
    """
    if len(dataset) == 0 or dataset.total_steps == 0:
        raise DatasetError("cannot train on an empty dataset")
    from .rollout import RolloutConfig, evaluate  # deferred: rollout imports this module

    mcfg = cfg.model_config(model_cfg)
    norm = {k: dataset.stats[k] for k in ("rtg_mean", "rtg_std", "ctg_mean", "ctg_std")}
    norm["rtg_std"] = max(norm["rtg_std"], 1e-6)
    norm["ctg_std"] = max(norm["ctg_std"], 1e-6)
    model = CausalTransformer(mcfg, seed=cfg.seed, norm=norm)
    hyper = {**model_hyperparameters(model, cfg, dataset), **(meta or {})}
    state = TrainState.fresh(cfg)
    out = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    best = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"train": cfg.to_dict(), "model": asdict(mcfg)}, indent=1, sort_keys=True))
        log_path = out / "train_log.jsonl"
        if resume and (out / "last.json").exists():
            state, res = load_train_state(out / "last", model, cfg)
            best = res.get("best_success")
            log = _read_log(log_path, state.step)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))

    def emit(row: dict) -> None:
        log.append(row)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if progress is not None:
            progress(row)

    rcfg = RolloutConfig(R0=hyper["return_p90"], H=mcfg.context_len)
    t0 = time.perf_counter()
    while state.step < cfg.steps:
        batch = dataset.sample_windows(cfg.batch_size, mcfg.context_len, state.rng_batch)
        try:
            br = train_step(model, batch, cfg, state)
        except TrainingDiverged as exc:
            if out is not None:
                (out / "nan_dump.json").write_text(json.dumps(exc.dump, indent=1, sort_keys=True))
            raise
        emit({"step": state.step, "losses": br, "wall": time.perf_counter() - t0})
        if cfg.eval_interval and state.step % cfg.eval_interval == 0:
            report = evaluate(model, "policy", cfg.eval_episodes, [cfg.seed], rcfg)
            success = report.aggregates["success_rate"]
            emit({"step": state.step, "eval": report.aggregates, "wall": time.perf_counter() - t0})
            if out is not None and (best is None or success > best):
                save_model(out / "best", model, {**hyper, "step": state.step, "success_rate": success})
            if best is None or success > best:
                best = success
        if out is not None and (state.step % cfg.checkpoint_interval == 0 or state.step == cfg.steps):
            save_train_state(out / "last", model, state, hyper, {"best_success": best})
    if out is not None:
        save_model(out / "final", model, {**hyper, "step": state.step})
        if best is None:
            save_model(out / "best", model, {**hyper, "step": state.step})
    return FitResult(model, log, best, out)


__all__ = [
    "ABLATIONS", "TrainConfig", "TrainState", "TrainingDiverged", "train_step", "fit", "FitResult",
    "save_model", "load_model", "smoothed", "canonical_ablation",
]
