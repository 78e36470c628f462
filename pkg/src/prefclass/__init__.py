"""DPO-style preference losses as classification, with C-3DPO constraints.

Exact, desk-scale policies (tabular and linear-feature softmax) make every
quantity computable, so losses, gradients and optima can be checked against
independent oracles.
"""

__version__ = "0.1.0"

from .constraints import ConstraintSpec, c3dpo_loss  # noqa: E402
from .data import Pair, RankedList, ScoredPair, read_jsonl, write_jsonl  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    InvalidRecordError,
    MissingScoreError,
    NumericalFailure,
    RecordParseError,
    UnsupportedFormError,
)
from .losses import LabelSpec, preset, preset_loss  # noqa: E402
from .model import ModelPair, PolicyModel, PromptSpace  # noqa: E402
from .objective import build_objective, evaluate  # noqa: E402
from .train import TrainConfig, collapse_metrics, train  # noqa: E402

__all__ = [
    "ConfigError", "ConstraintSpec", "InvalidRecordError", "LabelSpec", "MissingScoreError",
    "ModelPair", "NumericalFailure", "Pair", "PolicyModel", "PromptSpace", "RankedList",
    "RecordParseError", "ScoredPair", "TrainConfig", "UnsupportedFormError",
    "build_objective", "c3dpo_loss", "collapse_metrics", "evaluate", "preset", "preset_loss",
    "read_jsonl", "train", "write_jsonl",
]
