"""Normalizing-flow anomaly detection on feature maps."""

import json

from ._core import (
    ContractError,
    Error,
    Flow,
    IoError,
    NumericError,
    ShapeError,
    anomaly_map,
    auroc,
    load_checkpoint,
    load_features,
    read_features,
    save_checkpoint,
    synth_generate,
    train,
    write_features,
)
from ._core import evaluate_json as _evaluate_json

__all__ = [
    "ContractError",
    "Error",
    "Flow",
    "IoError",
    "NumericError",
    "ShapeError",
    "anomaly_map",
    "auroc",
    "evaluate",
    "load_checkpoint",
    "load_features",
    "read_features",
    "save_checkpoint",
    "synth_generate",
    "train",
    "write_features",
]


def evaluate(flow, manifest):
    """Image and pixel AUROC of `flow` on a test manifest, as a dict."""
    return json.loads(_evaluate_json(flow, str(manifest)))
