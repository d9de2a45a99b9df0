"""Training loop, evaluation and checkpoint persistence.

The objective is the batch-mean squared error of the forecast and nothing
else: no routing entropy or load-balancing terms.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import WindowDataset
from .errors import CheckpointError, ConfigError, DivergenceError, ShapeError
from .metrics import EvalReport, entropy, evaluate_forecasts, utilization
from .moe import GateTS, GateTSConfig, LSTMConfig, build_model, config_from_dict, count_parameters
from .nncore import OptimizerState, ScheduleState, Tensor, adamw_step, cosine_lr, mse_loss, no_grad

FORMAT_VERSION = 1
MAGIC = b"GATETSCK"
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.05
    seed: int = 0
    checkpoint_every: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight_decay must be non-negative, eps positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 when set")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        valid = [f.name for f in dataclasses.fields(cls)]
        unknown = sorted(set(data) - set(valid))
        if unknown:
            raise ConfigError(f"unknown TrainConfig key(s) {', '.join(unknown)}; valid keys: {', '.join(valid)}")
        return cls(**data)


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]
    opt_step: int = 0
    opt_skipped: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    best_val: float | None = None
    meta: dict = field(default_factory=dict)

    def config(self) -> GateTSConfig | LSTMConfig:
        return config_from_dict(self.model_config)

    def model(self):
        return build_model(self.config(), self.params)


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    last: Checkpoint | None = None

    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]


# -- checkpoint I/O ---------------------------------------------------------
def _rng_state_to_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__uint64__": [int(x) for x in v]}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


def _rng_state_from_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, dict) and "__uint64__" in v:
            return np.asarray(v["__uint64__"], dtype=np.uint64)
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


def _tensor_groups(ckpt: Checkpoint):
    yield "param", ckpt.params
    yield "adam_m", ckpt.first_moment
    yield "adam_v", ckpt.second_moment


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    payload = bytearray()
    for group, tensors in _tensor_groups(ckpt):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            manifest.append({
                "name": f"{group}/{name}",
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            })
            payload += raw
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "optimizer": {"step": ckpt.opt_step, "skipped": ckpt.opt_skipped},
        "schedule": ckpt.schedule,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "best_val": ckpt.best_val,
        "meta": ckpt.meta,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + bytes(payload)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path, expect_config: GateTSConfig | LSTMConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    With ``expect_config`` the stored tensors must fit a model built from it.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    if blob[:8] != MAGIC or len(blob) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    payload = blob[16 + hlen:]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for tensor {entry['name']!r}")
        group, _, name = entry["name"].partition("/")
        groups[group][name] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    ckpt = Checkpoint(
        model_config=header["model_config"],
        train_config=header["train_config"],
        params=groups["param"],
        opt_step=header["optimizer"]["step"],
        opt_skipped=header["optimizer"].get("skipped", 0),
        first_moment=groups["adam_m"],
        second_moment=groups["adam_v"],
        schedule=header["schedule"],
        rng_state=header["rng_state"],
        epoch=header["epoch"],
        best_val=header["best_val"],
        meta=header.get("meta", {}),
    )
    if expect_config is not None:
        build_model(expect_config, ckpt.params)  # raises ShapeError on mismatch
    return ckpt


# -- training ---------------------------------------------------------------
def _snapshot(model, cfg_dict, tcfg: TrainConfig, opt: OptimizerState, sched: ScheduleState,
              rng: np.random.Generator, epoch: int, best_val, meta) -> Checkpoint:
    return Checkpoint(
        model_config=cfg_dict,
        train_config=tcfg.to_dict(),
        params=model.state_dict(),
        opt_step=opt.step,
        opt_skipped=opt.skipped,
        first_moment={k: v.copy() for k, v in opt.first_moment.items()},
        second_moment={k: v.copy() for k, v in opt.second_moment.items()},
        schedule={"warmup_steps": sched.warmup_steps, "total_steps": sched.total_steps, "base_lr": sched.base_lr},
        rng_state=_rng_state_to_json(rng.bit_generator.state),
        epoch=epoch,
        best_val=best_val,
        meta=dict(meta),
    )


def predict(model, contexts: np.ndarray, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode forecasts (normalized units) and per-token selected experts."""
    preds, selected = [], []
    with no_grad():
        for lo in range(0, len(contexts), batch_size):
            y, decision = model(contexts[lo:lo + batch_size], train=False)
            preds.append(y.data)
            if decision is not None:
                selected.append(decision.selected)
    return np.concatenate(preds), (np.concatenate(selected) if selected else None)


def validation_loss(model, data: WindowDataset, batch_size: int = 1024) -> tuple[float, np.ndarray | None]:
    preds, selected = predict(model, data.contexts, batch_size)
    return float(np.mean((preds - data.targets) ** 2)), selected


def train(
    model_config: GateTSConfig | LSTMConfig,
    train_config: TrainConfig,
    data: Mapping[str, WindowDataset],
    *,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
    on_step: Callable[[dict], None] | None = None,
    on_epoch: Callable[[dict, Checkpoint], None] | None = None,
    meta: Mapping | None = None,
) -> tuple[Checkpoint, History]:
    """Minimize forecast MSE with AdamW under a warm-up cosine schedule.

    Returns the best-validation checkpoint and the history; ``history.last``
    holds the final state for resuming. ``until_epoch`` stops early (used to
    split a run across processes).
    """
    train_set, val_set = data["train"], data.get("val")
    if len(train_set) == 0:
        raise ConfigError("training split has no windows")
    if (train_set.context, train_set.horizon) != (model_config.context, model_config.horizon):
        raise ShapeError(
            f"dataset windows are T={train_set.context}, H={train_set.horizon} but the model expects "
            f"T={model_config.context}, H={model_config.horizon}"
        )
    tcfg = train_config
    cfg_dict = model_config.to_dict()
    meta = dict(meta or {})
    n = len(train_set)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total = tcfg.epochs * steps_per_epoch
    sched = ScheduleState(int(tcfg.warmup_fraction * total), total, tcfg.lr)
    opt = OptimizerState(tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay, tcfg.lr)
    rng = np.random.Generator(np.random.Philox(tcfg.seed))
    model = build_model(model_config)
    history = History()
    start_epoch, best_val, best = 0, math.inf, None

    if resume is not None:
        if resume.model_config != cfg_dict:
            raise ConfigError("resume checkpoint was produced with a different model config")
        model.load_state_dict(resume.params)
        opt.step, opt.skipped = resume.opt_step, resume.opt_skipped
        opt.first_moment = {k: v.copy() for k, v in resume.first_moment.items()}
        opt.second_moment = {k: v.copy() for k, v in resume.second_moment.items()}
        rng.bit_generator.state = _rng_state_from_json(resume.rng_state)
        start_epoch = resume.epoch
        best_val = math.inf if resume.best_val is None else resume.best_val
        meta = {**resume.meta, **meta}

    params = model.parameters()
    arrays = {k: p.data for k, p in params.items()}
    initial_loss = resume.meta.get("initial_loss") if resume is not None else None
    last_good = resume
    since_best = 0
    stop = tcfg.epochs if until_epoch is None else min(until_epoch, tcfg.epochs)
    is_moe = isinstance(model, GateTS)

    for epoch in range(start_epoch, stop):
        order = rng.permutation(n)
        epoch_loss, lr = 0.0, 0.0
        for b in range(steps_per_epoch):
            idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            model.zero_grad()
            pred, _ = model(train_set.contexts[idx], train=True, rng=rng)
            loss = mse_loss(pred, Tensor(train_set.targets[idx]))
            value = float(loss.data)
            if initial_loss is None:
                initial_loss = value
                meta["initial_loss"] = value
            if not math.isfinite(value) or value > DIVERGENCE_FACTOR * max(initial_loss, 1e-12):
                raise DivergenceError(
                    f"loss {value!r} at epoch {epoch + 1}, step {opt.step + 1} (initial {initial_loss!r})",
                    checkpoint=last_good,
                    history=history,
                )
            loss.backward()
            lr = cosine_lr(min(opt.step + 1, total), sched)
            adamw_step(arrays, {k: p.grad for k, p in params.items()}, opt, lr)
            epoch_loss += value * len(idx)
            record = {"epoch": epoch + 1, "step": opt.step, "lr": lr, "loss": value}
            history.steps.append(record)
            if on_step:
                on_step(record)

        row = {"epoch": epoch + 1, "train_loss": epoch_loss / n, "lr": lr}
        if val_set is not None and len(val_set):
            val, selected = validation_loss(model, val_set)
            row["val_loss"] = val
            if is_moe and selected is not None:
                freqs, distinct = utilization(selected, model_config.experts)
                row["utilization"] = [float(f) for f in freqs]
                row["distinct_sets"] = distinct
        else:
            val = row["train_loss"]
        improved = val < best_val
        if improved:
            best_val, since_best = val, 0
        else:
            since_best += 1
        row["best_val"] = best_val
        history.epochs.append(row)
        last_good = _snapshot(model, cfg_dict, tcfg, opt, sched, rng, epoch + 1, best_val, meta)
        if improved or best is None:
            best = last_good
        if on_epoch:
            on_epoch(row, last_good)
        if tcfg.patience is not None and since_best >= tcfg.patience:
            break

    if last_good is None:  # resumed at or beyond the final epoch
        last_good = _snapshot(model, cfg_dict, tcfg, opt, sched, rng, start_epoch, best_val, meta)
    history.last = last_good
    return (best if best is not None else last_good), history


# -- evaluation -------------------------------------------------------------
def evaluate_forecaster(
    forecast: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray | None]],
    data: WindowDataset,
    n_experts: int | None = None,
) -> EvalReport:
    """Score any normalized-space forecaster on a window set in natural units."""
    preds, selected = forecast(data.contexts)
    report = evaluate_forecasts(
        data.targets_raw,
        data.denormalize(preds),
        scale=data.mase_scale,
        split=data.split,
        zero_share=data.zero_share,
    )
    if selected is not None and n_experts is not None:
        freqs, distinct = utilization(selected, n_experts)
        report.utilization = [float(f) for f in freqs]
        report.distinct_sets = distinct
        report.utilization_entropy = entropy(freqs)
    return report


def evaluate(checkpoint: Checkpoint, data: WindowDataset | Mapping[str, WindowDataset], split: str = "test") -> EvalReport:
    """Eval-mode metrics of a checkpoint on one split, with routing diagnostics."""
    if not isinstance(data, WindowDataset):
        data = data[split]
    cfg = checkpoint.config()
    if (data.context, data.horizon) != (cfg.context, cfg.horizon):
        raise ShapeError(
            f"checkpoint expects T={cfg.context}, H={cfg.horizon}; dataset has T={data.context}, H={data.horizon}"
        )
    model = checkpoint.model()
    report = evaluate_forecaster(
        lambda ctx: predict(model, ctx),
        data,
        n_experts=getattr(cfg, "experts", None),
    )
    report.params_total, report.params_active = count_parameters(cfg)
    return report
