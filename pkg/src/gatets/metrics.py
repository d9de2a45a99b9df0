"""Point-forecast error metrics, interval estimates and routing diagnostics.

All metrics take natural-unit arrays of equal shape and reduce over every
element.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError

Z95 = 1.96


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError(f"actual shape {y.shape} != forecast shape {yhat.shape}")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def smape(y, yhat) -> float:
    """Percent in [0, 200]; terms with ``|y| + |yhat| == 0`` count as 0."""
    y, yhat = _pair(y, yhat)
    num = 200.0 * np.abs(y - yhat)
    den = np.abs(y) + np.abs(yhat)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return float(np.mean(terms))


def naive_scale(train_series) -> float:
    train = np.asarray(train_series, dtype=np.float64)
    if train.size < 2:
        raise DataError("MASE needs at least two training values")
    return float(np.mean(np.abs(np.diff(train))))


def mase(y, yhat, train_series=None, *, scale: float | None = None) -> float:
    """MAE divided by the in-sample one-step naive MAE of ``train_series``."""
    if scale is None:
        scale = naive_scale(train_series)
    if not scale > 0:
        raise DataError("degenerate MASE scale: the training series never changes")
    return mae(y, yhat) / scale


def confidence_interval(values: Sequence[float], z: float = Z95) -> tuple[float, float]:
    """(mean, z * sample_std / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DataError(f"confidence interval needs at least 2 values, got {v.size}")
    return float(v.mean()), float(z * v.std(ddof=1) / np.sqrt(v.size))


def utilization(selected: Iterable[np.ndarray] | np.ndarray, n_experts: int) -> tuple[np.ndarray, int]:
    """Expert frequencies among all selected slots and the count of distinct expert sets.

    ``selected`` is one ``[..., k]`` index array or a sequence of them (e.g.
    the ``selected`` fields of several routing decisions).
    """
    if isinstance(selected, np.ndarray):
        arrays = [selected]
    else:
        arrays = [getattr(s, "selected", s) for s in selected]
    if not arrays:
        raise DataError("utilization needs at least one routing decision")
    k = arrays[0].shape[-1]
    rows = np.concatenate([np.asarray(a).reshape(-1, k) for a in arrays])
    counts = np.bincount(rows.reshape(-1), minlength=n_experts).astype(np.float64)
    freqs = counts / counts.sum()
    distinct = len({tuple(sorted(r)) for r in rows.tolist()})
    return freqs, distinct


def entropy(freqs) -> float:
    p = np.asarray(freqs, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


METRICS = ("mae", "rmse", "smape", "mase")


@dataclass
class EvalReport:
    """Pooled metric values, 95% half-widths over per-window values, and routing stats."""

    split: str
    windows: int
    metrics: dict[str, float]
    half_widths: dict[str, float]
    suppressed: dict[str, str] = field(default_factory=dict)
    utilization: list[float] | None = None
    distinct_sets: int | None = None
    utilization_entropy: float | None = None
    params_total: int | None = None
    params_active: int | None = None

    def flat(self) -> dict[str, object]:
        """Flat key/value view; the text and JSON reports both come from this."""
        out: dict[str, object] = {"split": self.split, "windows": self.windows}
        for name in METRICS:
            if name in self.suppressed:
                out[name] = f"suppressed ({self.suppressed[name]})"
                out[f"{name}_ci95"] = f"suppressed ({self.suppressed[name]})"
            elif name in self.metrics:
                out[name] = self.metrics[name]
                out[f"{name}_ci95"] = self.half_widths[name]
        if self.params_total is not None:
            out["params_total"] = self.params_total
            out["params_active"] = self.params_active
        if self.utilization is not None:
            out["distinct_expert_sets"] = self.distinct_sets
            out["utilization_entropy"] = self.utilization_entropy
            for e, f in enumerate(self.utilization):
                out[f"utilization_{e}"] = f
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.flat().items())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_text_report(text: str) -> dict[str, object]:
    """Inverse of :meth:`EvalReport.to_text` (numbers come back as int/float)."""
    out: dict[str, object] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        out[key] = _coerce(raw)
    return out


def _coerce(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def evaluate_forecasts(
    y: np.ndarray,
    yhat: np.ndarray,
    *,
    scale: float,
    split: str = "test",
    zero_share: float = 0.0,
    zero_threshold: float = 0.3,
) -> EvalReport:
    """Metrics for ``[N, H]`` natural-unit actuals and forecasts.

    SMAPE is suppressed when more than ``zero_threshold`` of the split's values
    are exact zeros.
    """
    y, yhat = _pair(y, yhat)
    if y.ndim != 2:
        raise ShapeError(f"expected [windows, horizon] arrays, got {y.shape}")
    per_window = {
        "mae": np.mean(np.abs(y - yhat), axis=1),
        "rmse": np.sqrt(np.mean((y - yhat) ** 2, axis=1)),
        "smape": np.array([smape(a, b) for a, b in zip(y, yhat)]),
    }
    per_window["mase"] = per_window["mae"] / scale
    pooled = {"mae": mae(y, yhat), "rmse": rmse(y, yhat), "smape": smape(y, yhat), "mase": mase(y, yhat, scale=scale)}
    half = {}
    for name, vals in per_window.items():
        half[name] = confidence_interval(vals)[1] if len(vals) >= 2 else float("nan")
    suppressed = {}
    if zero_share > zero_threshold:
        suppressed["smape"] = "zero-heavy"
    return EvalReport(split=split, windows=len(y), metrics=pooled, half_widths=half, suppressed=suppressed)
