"""Regression metrics and the MSE/RMSE consistency audit for published tables."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import ShapeError

CONSISTENCY_TOL = 0.05


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    rmse: float
    n: int
    model: str = ""
    split: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(preds, targets, model: str = "", split: str = "") -> MetricsReport:
    """Element-wise MSE, MAE and RMSE over all ``N * A`` residuals, accumulated in float64."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    if preds.ndim == 0 or len(preds) == 0:
        raise ValueError("cannot score an empty set of predictions")
    r = preds - targets
    mse = float(np.mean(r * r))
    mae = float(np.mean(np.abs(r)))
    return MetricsReport(mse, mae, math.sqrt(mse), int(len(preds)), model, split)


@dataclass(frozen=True)
class ConsistencyRow:
    label: str
    mse: float
    rmse: float
    deviation: float
    flagged: bool


def check_table_consistency(pairs, tol: float = CONSISTENCY_TOL) -> list[ConsistencyRow]:
    """Flag rows whose ``|sqrt(mse) - rmse| / rmse`` exceeds ``tol``.

    ``pairs`` holds ``(label, mse, rmse)`` triples or bare ``(mse, rmse)`` pairs.
    """
    rows = []
    for i, item in enumerate(pairs):
        if len(item) == 3:
            label, mse, rmse = item
        else:
            (mse, rmse), label = item, f"row {i + 1}"
        mse, rmse = float(mse), float(rmse)
        if not (mse >= 0 and rmse >= 0):
            raise ValueError(f"{label}: mse and rmse must be non-negative, got ({mse}, {rmse})")
        if rmse == 0:
            dev = 0.0 if mse == 0 else math.inf
        else:
            dev = abs(math.sqrt(mse) - rmse) / rmse
        rows.append(ConsistencyRow(str(label), mse, rmse, dev, dev > tol))
    return rows


def read_table_csv(path) -> list[tuple[str, float, float]]:
    """Rows of a CSV with ``mse`` and ``rmse`` columns; every other column joins into the label."""
    with open(Path(path), newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        if "mse" not in fields or "rmse" not in fields:
            raise ValueError(f"{path}: CSV needs 'mse' and 'rmse' columns, found {fields}")
        extra = [c for c in fields if c not in ("mse", "rmse", "mae")]
        out = []
        for line, row in enumerate(reader, start=2):
            label = " / ".join(row[c] for c in extra if row.get(c)) or f"line {line}"
            try:
                out.append((label, float(row["mse"]), float(row["rmse"])))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{line}: non-numeric mse/rmse") from None
        return out
