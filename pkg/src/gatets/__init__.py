"""GateTS: sparse mixture-of-experts forecasting with attention-inspired routing."""

__version__ = "0.1.0"

from .data import make_windows, prepare_series, synth_series  # noqa: E402
from .gating import RoutingDecision, topk_renormalize  # noqa: E402
from .moe import GateTS, GateTSConfig, LSTMConfig, LSTMForecaster, count_parameters, naive_forecast  # noqa: E402
from .trainer import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train  # noqa: E402

__all__ = [
    "GateTS",
    "GateTSConfig",
    "LSTMConfig",
    "LSTMForecaster",
    "RoutingDecision",
    "TrainConfig",
    "Checkpoint",
    "count_parameters",
    "evaluate",
    "load_checkpoint",
    "make_windows",
    "naive_forecast",
    "prepare_series",
    "save_checkpoint",
    "synth_series",
    "topk_renormalize",
    "train",
]
