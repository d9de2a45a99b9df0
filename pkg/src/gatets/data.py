"""Series ingestion, cleaning, splitting, scaling and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")


@dataclass
class RawSeries:
    """Ordered observations; missing values are NaN."""

    timestamps: list
    values: np.ndarray
    name: str = "series"
    native_resolution: str | None = None

    def __len__(self) -> int:
        return len(self.values)

    @property
    def missing(self) -> int:
        return int(np.isnan(self.values).sum())


@dataclass
class PreparedSeries:
    """Gap-free values in natural units with train-split scaling statistics."""

    values: np.ndarray
    mean: float
    std: float
    splits: dict[str, tuple[int, int]]
    name: str = "series"
    imputed: int = 0
    aggregation: int = 1

    def standardized(self) -> np.ndarray:
        return (self.values - self.mean) / self.std

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def segment(self, split: str) -> np.ndarray:
        lo, hi = self.splits[split]
        return self.values[lo:hi]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "values": [float(v) for v in self.values],
            "mean": self.mean,
            "std": self.std,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "provenance": {"imputed": self.imputed, "aggregation": self.aggregation},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreparedSeries":
        try:
            return cls(
                values=np.asarray(d["values"], dtype=np.float64),
                mean=float(d["mean"]),
                std=float(d["std"]),
                splits={k: (int(v[0]), int(v[1])) for k, v in d["splits"].items()},
                name=d.get("name", "series"),
                imputed=int(d.get("provenance", {}).get("imputed", 0)),
                aggregation=int(d.get("provenance", {}).get("aggregation", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed prepared-series document: {exc}") from exc


@dataclass
class WindowDataset:
    """(context, target) pairs from one split, in normalized and natural units.

    ``mase_scale`` is the mean absolute one-step change over the training
    split (natural units); ``zero_share`` is the fraction of exact zeros among
    this split's raw values.
    """

    split: str
    contexts: np.ndarray
    targets: np.ndarray
    targets_raw: np.ndarray
    starts: np.ndarray
    context: int
    horizon: int
    stride: int
    mean: float
    std: float
    mase_scale: float
    zero_share: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.contexts)

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def contexts_raw(self) -> np.ndarray:
        return self.denormalize(self.contexts)


# -- loading ----------------------------------------------------------------
def _parse_timestamp(text: str):
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise ValueError(f"unrecognized timestamp {text!r}") from None


def _parse_value(text: str) -> float:
    text = text.strip()
    if text == "" or text == "?":
        return math.nan
    return float(text)


def load_csv(path) -> RawSeries:
    """Two-column CSV (timestamp, value); a header row is optional.

    A single-column file is read as values with implicit integer timestamps.
    """
    path = Path(path)
    timestamps: list = []
    values: list[float] = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) == 1:
                    ts, val = len(values), _parse_value(row[0])
                else:
                    ts, val = _parse_timestamp(row[0]), _parse_value(row[1])
            except ValueError as exc:
                if lineno == 1 and not values:
                    continue  # header
                raise DataError(f"{path}:{lineno}: cannot parse row {row!r}: {exc}") from None
            if timestamps and not _increasing(timestamps[-1], ts):
                raise DataError(f"{path}:{lineno}: timestamp {row[0]!r} does not increase")
            timestamps.append(ts)
            values.append(val)
    if not values:
        raise DataError(f"{path}: no observations found")
    return RawSeries(timestamps, np.asarray(values, dtype=np.float64), name=path.stem)


def _increasing(prev, cur) -> bool:
    try:
        return cur > prev
    except TypeError:
        raise DataError(f"mixed timestamp types {prev!r} and {cur!r}") from None


def load_tsf(path, series: str | None = None) -> RawSeries:
    """Monash ``.tsf`` archive file; ``?`` marks a missing value.

    Picks the series named ``series`` or, by default, the first one.
    """
    path = Path(path)
    attributes: list[str] = []
    frequency = None
    in_data = False
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data:
                low = line.lower()
                if low.startswith("@attribute"):
                    parts = line.split()
                    if len(parts) < 3:
                        raise DataError(f"{path}:{lineno}: malformed @attribute line")
                    attributes.append(parts[1])
                elif low.startswith("@frequency"):
                    frequency = line.split(maxsplit=1)[1] if " " in line else None
                elif low.startswith("@data"):
                    in_data = True
                continue
            fields = line.split(":")
            if len(fields) != len(attributes) + 1:
                raise DataError(
                    f"{path}:{lineno}: expected {len(attributes)} attribute fields before the values"
                )
            name = fields[0] if attributes else f"series_{lineno}"
            if series is not None and name != series:
                continue
            try:
                vals = np.asarray([_parse_value(v) for v in fields[-1].split(",")], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            return RawSeries(list(range(len(vals))), vals, name=name, native_resolution=frequency)
    if series is not None:
        raise DataError(f"{path}: series {series!r} not found")
    raise DataError(f"{path}: no @data section with series")


def load_series(path, format: str | None = None, series: str | None = None) -> RawSeries:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    fmt = format or ("tsf" if path.suffix.lower() == ".tsf" else "csv")
    if fmt == "csv":
        return load_csv(path)
    if fmt == "tsf":
        return load_tsf(path, series)
    raise ConfigError(f"unknown format {fmt!r}; expected csv or tsf")


# -- cleaning ---------------------------------------------------------------
def locf_impute(values) -> np.ndarray:
    """Replace each NaN with the most recent observed value."""
    if isinstance(values, RawSeries):
        values = values.values
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    missing = np.isnan(v)
    if missing[0]:
        raise DataError("series starts with a missing value; nothing to carry forward")
    idx = np.where(missing, 0, np.arange(v.size))
    np.maximum.accumulate(idx, out=idx)
    return v[idx]


def aggregate(values, factor: int, reducer: str = "mean") -> np.ndarray:
    """Non-overlapping block means; a trailing partial block is dropped."""
    if factor < 1:
        raise ConfigError(f"aggregation factor must be >= 1, got {factor}")
    if reducer != "mean":
        raise ConfigError(f"unsupported reducer {reducer!r}")
    v = np.asarray(values, dtype=np.float64)
    if factor == 1:
        return v.copy()
    n = len(v) // factor
    return v[: n * factor].reshape(n, factor).mean(axis=1)


def chronological_split(
    n: int, ratios=(0.8, 0.1, 0.1), context: int = 0, horizon: int = 0
) -> dict[str, tuple[int, int]]:
    """Contiguous train/val/test index ranges; floors go to train and val, the remainder to test.

    With ``context``/``horizon`` given, every split must hold at least one window.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    bounds = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, n),
    }
    need = max(context + horizon, 1)
    for name, (lo, hi) in bounds.items():
        if hi - lo < need:
            raise DataError(
                f"{name} split has {hi - lo} points but needs at least {need} (context {context} + horizon {horizon})"
            )
    return bounds


def standardize(values, train_range: tuple[int, int]) -> tuple[np.ndarray, float, float]:
    """z-score with mean/std of ``values[train_range]``. Returns (z, mean, std)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = train_range
    seg = v[lo:hi]
    if seg.size == 0:
        raise DataError("empty training segment")
    mu = float(seg.mean())
    sd = float(seg.std())
    if not sd > 0:
        raise DataError("training segment is constant (zero standard deviation); cannot standardize")
    return (v - mu) / sd, mu, sd


def prepare_series(
    raw: RawSeries | np.ndarray,
    aggregation: int = 1,
    ratios=(0.8, 0.1, 0.1),
    context: int = 0,
    horizon: int = 0,
) -> PreparedSeries:
    """LOCF, optional block aggregation, chronological split, train-only scaling stats."""
    name = raw.name if isinstance(raw, RawSeries) else "series"
    values = raw.values if isinstance(raw, RawSeries) else np.asarray(raw, dtype=np.float64)
    imputed = int(np.isnan(values).sum())
    filled = locf_impute(values)
    agg = aggregate(filled, aggregation)
    splits = chronological_split(len(agg), ratios, context, horizon)
    _, mu, sd = standardize(agg, splits["train"])
    return PreparedSeries(agg, mu, sd, splits, name=name, imputed=imputed, aggregation=aggregation)


def window_count(length: int, context: int, horizon: int, stride: int = 1) -> int:
    if length < context + horizon:
        return 0
    return (length - context - horizon) // stride + 1


def mase_scale(train_values) -> float:
    """Mean absolute one-step change of the training series."""
    v = np.asarray(train_values, dtype=np.float64)
    if v.size < 2:
        raise DataError("MASE scale needs at least two training values")
    return float(np.mean(np.abs(np.diff(v))))


def make_windows(
    prepared: PreparedSeries, context: int, horizon: int, stride: int = 1
) -> dict[str, WindowDataset]:
    """Sliding windows per split; no pair crosses a split boundary."""
    if context < 1 or horizon < 1 or stride < 1:
        raise ConfigError("context, horizon and stride must all be >= 1")
    z = prepared.standardized()
    scale = mase_scale(prepared.segment("train"))
    out = {}
    for split in SPLITS:
        lo, hi = prepared.splits[split]
        n = window_count(hi - lo, context, horizon, stride)
        if n == 0:
            raise DataError(
                f"{split} split has {hi - lo} points, fewer than context {context} + horizon {horizon}"
            )
        starts = lo + stride * np.arange(n)
        ctx_idx = starts[:, None] + np.arange(context)
        tgt_idx = starts[:, None] + context + np.arange(horizon)
        seg = prepared.values[lo:hi]
        out[split] = WindowDataset(
            split=split,
            contexts=z[ctx_idx],
            targets=z[tgt_idx],
            targets_raw=prepared.values[tgt_idx],
            starts=starts,
            context=context,
            horizon=horizon,
            stride=stride,
            mean=prepared.mean,
            std=prepared.std,
            mase_scale=scale,
            zero_share=float(np.mean(seg == 0.0)),
            meta={"name": prepared.name},
        )
    return out


# -- synthetic streams ------------------------------------------------------
SYNTH_KINDS = ("sine", "regime", "intermittent")


def synth_series(
    kind: str,
    length: int,
    seed: int = 0,
    *,
    period: int = 24,
    amplitude: float = 1.0,
    noise: float = 0.0,
    block: int = 200,
    day: int = 48,
) -> RawSeries:
    """Deterministic test streams.

    ``sine``: ``amplitude * sin(2 pi t / period)`` plus Gaussian noise.
    ``regime``: blocks of ``block`` steps alternating between a fast
    oscillating AR(2) process and a slow smooth one.
    ``intermittent``: solar-like daylight bumps over a ``day``-step cycle with
    exact zeros at night and day-to-day amplitude and cloud variation.
    """
    if length <= 0:
        raise ConfigError(f"length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    if kind == "sine":
        values = amplitude * np.sin(2.0 * np.pi * t / period)
        if noise:
            values = values + noise * rng.standard_normal(length)
    elif kind == "regime":
        values = _regime_series(length, rng, block, noise if noise else 0.1)
    elif kind == "intermittent":
        values = _intermittent_series(length, rng, day)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")
    return RawSeries(list(range(length)), values, name=f"synth-{kind}")


def _ar2_coeffs(period: float, radius: float) -> tuple[float, float]:
    # complex pole pair radius * exp(+-2 pi i / period)
    return 2.0 * radius * math.cos(2.0 * math.pi / period), -radius * radius


_REGIMES = (_ar2_coeffs(6.0, 0.95), _ar2_coeffs(40.0, 0.99))


def _regime_series(length: int, rng: np.random.Generator, block: int, noise: float) -> np.ndarray:
    x = np.zeros(length + 2)
    for i in range(2, length + 2):
        a1, a2 = _REGIMES[((i - 2) // block) % 2]
        x[i] = a1 * x[i - 1] + a2 * x[i - 2] + noise * rng.standard_normal()
    return x[2:]


def _intermittent_series(length: int, rng: np.random.Generator, day: int) -> np.ndarray:
    n_days = length // day + 1
    peaks = rng.uniform(0.6, 1.0, size=n_days)
    phase = (np.arange(length) % day) / day
    daylight = (phase >= 0.25) & (phase < 0.75)
    shape = np.where(daylight, np.sin(np.pi * (phase - 0.25) / 0.5) ** 2, 0.0)
    clouds = np.clip(1.0 - 0.3 * np.abs(rng.standard_normal(length)), 0.2, 1.0)
    values = peaks[np.arange(length) // day] * shape * clouds
    return np.where(daylight, values, 0.0)
