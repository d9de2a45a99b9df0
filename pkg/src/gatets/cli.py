"""Command-line entry point: ``gatets <command> [options]``.

Exit codes: 0 success, 2 usage/config error, 3 data or checkpoint error,
4 numerical failure (divergence, failed self-check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import SYNTH_KINDS, PreparedSeries, load_series, make_windows, prepare_series, synth_series
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .gating import ROUTERS
from .moe import GateTSConfig, LSTMConfig, count_parameters
from .trainer import TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "GATETS_OUTPUT_ROOT"

# flag name -> model config key
MODEL_FLAGS = {
    "router": "router",
    "experts": "experts",
    "active": "active",
    "context": "context",
    "horizon": "horizon",
    "seed": "seed",
}


class UsageError(ConfigError):
    pass


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, command: str, config: dict, seed, dataset: Path | None, outputs: Sequence[Path]) -> Path:
    manifest = {
        "command": command,
        "code_version": __version__,
        "seed": seed,
        "resolved_config": config,
        "dataset": None if dataset is None else str(dataset),
        "dataset_sha256": None if dataset is None else _sha256(dataset),
        "outputs": sorted(p.name for p in outputs),
    }
    return _write_json(out / "manifest.json", manifest)


def _parse_split(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--split expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--split expects three comma-separated numbers, got {text!r}")
    return parts


def _load_prepared(path) -> tuple[PreparedSeries, Path]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: prepared dataset not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a prepared-series JSON document: {exc}") from None
    return PreparedSeries.from_dict(doc), path


# -- prepare ----------------------------------------------------------------
def cmd_prepare(args) -> int:
    if args.synthetic:
        raw = synth_series(args.synthetic, args.length, args.seed)
    elif args.dataset:
        raw = load_series(args.dataset, args.format, args.series)
    else:
        raise UsageError("prepare needs --dataset PATH or --synthetic KIND")
    ratios = _parse_split(args.split)
    prepared = prepare_series(raw, args.aggregate, ratios, args.context or 0, args.horizon or 0)
    out = _out_dir(args, "prepare")
    doc = prepared.to_dict()
    doc["provenance"].update({
        "source": args.dataset or f"synthetic:{args.synthetic}",
        "raw_length": len(raw),
        "split_ratios": list(ratios),
    })
    target = _write_json(out / "prepared.json", doc)
    write_manifest(out, "prepare", {"aggregate": args.aggregate, "split": list(ratios)}, args.seed,
                   Path(args.dataset) if args.dataset else None, [target])
    print(f"prepared {prepared.name}: {len(raw)} raw -> {len(prepared.values)} points, "
          f"imputed={prepared.imputed}, aggregation={prepared.aggregation}, splits={prepared.splits}")
    print(f"wrote {target}")
    return EXIT_OK


# -- configuration ----------------------------------------------------------
def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    if value.lower() in ("none", "null"):
        return None
    return value


def resolve_configs(args) -> tuple[GateTSConfig | LSTMConfig, TrainConfig, int]:
    """Merge defaults, the JSON config file, dedicated flags and ``--set`` overrides."""
    model: dict = {}
    train_cfg: dict = {}
    stride = 1
    arch = args.arch
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"{path}: config file not found")
        doc = json.loads(path.read_text())
        model.update(doc.get("model", {}))
        train_cfg.update(doc.get("train", {}))
        stride = int(doc.get("data", {}).get("stride", stride))
        arch = arch or model.get("arch")
    arch = arch or "gatets"
    model.pop("arch", None)
    model_cls = LSTMConfig if arch == "lstm" else GateTSConfig
    model_keys = {f for f in model_cls.__dataclass_fields__}
    train_keys = set(TrainConfig.__dataclass_fields__)

    for flag, key in MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None and key in model_keys:
            model[key] = value
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    for flag in ("epochs", "batch_size", "lr"):
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg[flag] = value

    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        section, _, name = key.rpartition(".")
        value = _coerce(raw)
        if section in ("", "model") and name in model_keys:
            model[name] = value
        elif section in ("", "train") and name in train_keys:
            train_cfg[name] = value
        elif section in ("", "data") and name == "stride":
            stride = int(value)
        else:
            valid = sorted({f"model.{k}" for k in model_keys} | {f"train.{k}" for k in train_keys} | {"data.stride"})
            raise UsageError(f"invalid override key {key!r}; valid keys: {', '.join(valid)}")
    return model_cls.from_dict(model), TrainConfig.from_dict(train_cfg), stride


# -- train ------------------------------------------------------------------
def cmd_train(args) -> int:
    if not args.dataset:
        raise UsageError("train needs --dataset prepared.json (run `gatets prepare` first)")
    prepared, data_path = _load_prepared(args.dataset)
    model_cfg, train_cfg, stride = resolve_configs(args)
    windows = make_windows(prepared, model_cfg.context, model_cfg.horizon, stride)
    out = _out_dir(args, "train")
    resume = load_checkpoint(args.resume) if args.resume else None
    total, active = count_parameters(model_cfg)
    print(f"# model={model_cfg.to_dict()} params_total={total} params_active={active}", flush=True)
    print(f"# windows train={len(windows['train'])} val={len(windows['val'])} test={len(windows['test'])}", flush=True)

    def on_step(rec):
        print(f"epoch={rec['epoch']} step={rec['step']} lr={rec['lr']:.6g} loss={rec['loss']:.6g}", flush=True)

    def on_epoch(row, ckpt):
        if train_cfg.checkpoint_every and row["epoch"] % train_cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, out / f"epoch{row['epoch']:04d}.gck")

    meta = {"dataset_sha256": _sha256(data_path), "stride": stride}
    t0 = time.perf_counter()
    try:
        best, history = train(model_cfg, train_cfg, windows, resume=resume, on_step=on_step,
                              on_epoch=on_epoch, meta=meta)
    except NumericError as exc:
        if getattr(exc, "checkpoint", None) is not None:
            save_checkpoint(exc.checkpoint, out / "last_good.gck")
        raise
    outputs = [
        save_checkpoint(best, out / "checkpoint.gck"),
        save_checkpoint(history.last, out / "last.gck"),
    ]
    hist_path = out / "history.jsonl"
    hist_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history.epochs))
    outputs.append(hist_path)
    if history.epochs:
        from .plotting import history_figure

        outputs.append(history_figure(history.epochs, out / "history.svg"))
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": {"stride": stride}}
    outputs.append(_write_json(out / "config.json", config))
    write_manifest(out, "train", config, train_cfg.seed, data_path, outputs)
    print(f"# done in {time.perf_counter() - t0:.1f}s best_val={best.best_val!r} -> {out / 'checkpoint.gck'}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------
def _checkpoint_and_windows(args):
    for flag, value in (("--checkpoint", args.checkpoint), ("--dataset", args.dataset)):
        if not value:
            raise UsageError(f"{flag} is required")
    ckpt = load_checkpoint(args.checkpoint)
    prepared, data_path = _load_prepared(args.dataset)
    cfg = ckpt.config()
    stride = int(ckpt.meta.get("stride", 1)) if getattr(args, "stride", None) is None else args.stride
    windows = make_windows(prepared, cfg.context, cfg.horizon, stride)
    return ckpt, cfg, prepared, windows, data_path


def cmd_evaluate(args) -> int:
    ckpt, cfg, prepared, windows, data_path = _checkpoint_and_windows(args)
    data = windows[args.split]
    report = evaluate(ckpt, data)
    out = _out_dir(args, "evaluate")
    flat = report.flat()
    txt = out / "report.txt"
    txt.write_text(report.to_text())
    js = _write_json(out / "report.json", flat)
    outputs = [txt, js]
    from .plotting import forecast_figure

    preds, _ = predict(ckpt.model(), data.contexts)
    outputs.append(forecast_figure(data.targets_raw, data.denormalize(preds), out / "forecast.svg",
                                   title=f"{prepared.name} ({args.split})"))
    write_manifest(out, "evaluate", {"model": ckpt.model_config, "split": args.split}, ckpt.model_config.get("seed"),
                   data_path, outputs)
    sys.stdout.write(report.to_text())
    return EXIT_OK


# -- forecast ---------------------------------------------------------------
def cmd_forecast(args) -> int:
    ckpt, cfg, prepared, windows, data_path = _checkpoint_and_windows(args)
    context = prepared.standardized()[-cfg.context:]
    preds, _ = predict(ckpt.model(), context[None, :])
    values = prepared.inverse(preds[0])
    out = _out_dir(args, "forecast")
    path = out / "forecast.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon_step", "forecast"])
        for i, v in enumerate(values, start=1):
            w.writerow([i, repr(float(v))])
    write_manifest(out, "forecast", {"model": ckpt.model_config}, ckpt.model_config.get("seed"), data_path, [path])
    for i, v in enumerate(values, start=1):
        print(f"{i}\t{float(v)!r}")
    return EXIT_OK


# -- route trace ------------------------------------------------------------
def route_trace_rows(ckpt, data, start: int, stop: int) -> list[dict]:
    """One row per window: first-step forecast and the last context token's routing."""
    model = ckpt.model()
    preds, selected = predict(model, data.contexts[start:stop])
    if selected is None:
        raise UsageError("route-trace needs a mixture-of-experts checkpoint")
    from .nncore import no_grad

    with no_grad():
        _, decision = model(data.contexts[start:stop])
    weights = decision.weights.data[:, -1, :]
    rows = []
    for n, i in enumerate(range(start, stop)):
        ids = [int(e) for e in selected[n, -1]]
        rows.append({
            "step": int(data.starts[i] + data.context),
            "actual": float(data.targets_raw[i, 0]),
            "forecast": float(data.denormalize(preds[n, 0])),
            "expert_ids": ids,
            "weights": [float(weights[n, e]) for e in ids],
        })
    return rows


def cmd_route_trace(args) -> int:
    ckpt, cfg, prepared, windows, data_path = _checkpoint_and_windows(args)
    data = windows[args.split]
    start = args.start
    stop = len(data) if args.stop is None else args.stop
    if not 0 <= start < stop <= len(data):
        raise UsageError(f"window range [{start}, {stop}) out of bounds for {len(data)} {args.split} windows")
    rows = route_trace_rows(ckpt, data, start, stop)
    out = _out_dir(args, "route-trace")
    path = out / "route_trace.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "actual", "forecast", "expert_ids", "weights"])
        for r in rows:
            w.writerow([r["step"], repr(r["actual"]), repr(r["forecast"]),
                        ";".join(map(str, r["expert_ids"])), ";".join(repr(x) for x in r["weights"])])
    from .plotting import route_trace_figure

    svg = route_trace_figure([r["step"] for r in rows], [r["actual"] for r in rows],
                             [r["forecast"] for r in rows], [tuple(r["expert_ids"]) for r in rows],
                             out / "route_trace.svg")
    write_manifest(out, "route-trace", {"model": ckpt.model_config, "split": args.split, "start": start,
                                        "stop": stop}, ckpt.model_config.get("seed"), data_path, [path, svg])
    distinct = len({tuple(sorted(r["expert_ids"])) for r in rows})
    print(f"wrote {path} and {svg} ({len(rows)} rows, {distinct} distinct expert sets)")
    return EXIT_OK


# -- selfcheck --------------------------------------------------------------
def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    t0 = time.perf_counter()
    results = run_all(perturb=1e-2 if args.inject_gradient_fault else 0.0,
                      seeds=range(1) if args.quick else range(5))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser -----------------------------------------------------------------
def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with optional 'model', 'train' and 'data' sections")
    p.add_argument("--arch", choices=("gatets", "lstm"), help="model family (default gatets)")
    p.add_argument("--router", choices=ROUTERS)
    p.add_argument("--experts", type=int)
    p.add_argument("--active", type=int, help="experts kept per token (top-k)")
    p.add_argument("--context", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. model.d_model=32 or train.weight_decay=0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatets", description="Sparse mixture-of-experts time-series forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>, else runs/<command>)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare", help="clean, aggregate and split a raw series")
    common(p)
    p.add_argument("--dataset", help="raw CSV or TSF file")
    p.add_argument("--format", choices=("csv", "tsf"))
    p.add_argument("--series", help="series name inside a TSF file")
    p.add_argument("--synthetic", choices=SYNTH_KINDS, help="generate a synthetic stream instead")
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--aggregate", type=int, default=1, help="mean over non-overlapping blocks of this size")
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--context", type=int, help="validate that every split fits a window")
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared series")
    common(p)
    p.add_argument("--dataset", help="prepared.json from `gatets prepare`")
    p.add_argument("--resume", help="continue from a last.gck checkpoint")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "metrics report for a checkpoint"),
        ("forecast", cmd_forecast, "forecast the horizon after the end of the series"),
        ("route-trace", cmd_route_trace, "per-window routing trace (CSV + SVG)"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--dataset")
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--stride", type=int)
        if name == "route-trace":
            p.add_argument("--start", type=int, default=0)
            p.add_argument("--stop", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("selfcheck", help="gradient, routing and equivalence checks")
    p.add_argument("--quick", action="store_true", help="one seed instead of five")
    p.add_argument("--inject-gradient-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gatets {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"gatets {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"gatets {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
