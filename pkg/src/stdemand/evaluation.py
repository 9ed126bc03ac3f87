"""Thresholded error metrics and naive reference forecasters."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .pipeline import DAY_SECONDS, DemandTensor, ForecastBatch, calendar_features

DEFAULT_THRESHOLD = 5.0


@dataclass
class MetricReport:
    """MAE / RMSE / MAPE(%) over cells whose target is at least ``threshold``.

    When no cell qualifies the metrics are ``None`` (undefined).
    """

    threshold: float
    count: int
    total: int
    mae: float | None
    rmse: float | None
    mape: float | None
    per_horizon: list[dict] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.count > 0

    def horizon(self, step: int) -> dict:
        """Metrics of 1-based forecast step ``step``."""
        for entry in self.per_horizon:
            if entry["step"] == step:
                return entry
        raise KeyError(f"no horizon step {step} in report")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold, "count": self.count, "total": self.total,
            "mae": self.mae, "rmse": self.rmse, "mape": self.mape,
            "per_horizon": self.per_horizon,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _masked(pred: np.ndarray, target: np.ndarray, threshold: float) -> dict:
    mask = target >= threshold
    count = int(mask.sum())
    if count == 0:
        return {"count": 0, "total": int(target.size), "mae": None, "rmse": None, "mape": None}
    err = pred[mask] - target[mask]
    return {
        "count": count,
        "total": int(target.size),
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err * err))),
        "mape": float(np.mean(np.abs(err) / target[mask]) * 100.0),
    }


def thresholded_metrics(pred, target, threshold: float = DEFAULT_THRESHOLD,
                        horizon_axis: int | None = 1) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    overall = _masked(pred, target, threshold)
    per_horizon = []
    if horizon_axis is not None and pred.ndim > horizon_axis:
        for h in range(pred.shape[horizon_axis]):
            entry = _masked(np.take(pred, h, axis=horizon_axis), np.take(target, h, axis=horizon_axis),
                            threshold)
            entry["step"] = h + 1
            per_horizon.append(entry)
    return MetricReport(float(threshold), overall["count"], overall["total"], overall["mae"],
                        overall["rmse"], overall["mape"], per_horizon)


def persistence_baseline(batch: ForecastBatch) -> np.ndarray:
    """Repeat the last observed raw demand at every horizon step."""
    horizon = batch.targets.shape[1]
    last = batch.raw_inputs[:, -1:]
    return np.repeat(last, horizon, axis=1)


class HistoricalAverage:
    """Mean training demand per (weekday, time-of-day slot, region)."""

    def __init__(self, train: DemandTensor):
        if len(train) * train.bin_width < 7 * DAY_SECONDS:
            raise ValueError("historical average needs at least one week of training data")
        self.timezone = train.timezone
        self.slots_per_day = DAY_SECONDS // train.bin_width
        n, d = train.n_regions, train.n_features
        dow, slot = self._slots(train.timestamps)
        sums = np.zeros((7, self.slots_per_day, n, d))
        counts = np.zeros((7, self.slots_per_day))
        np.add.at(sums, (dow, slot), train.values)
        np.add.at(counts, (dow, slot), 1.0)
        self.region_mean = train.values.mean(axis=0)
        seen = counts > 0
        self.table = np.where(seen[:, :, None, None], sums / np.maximum(counts, 1)[:, :, None, None],
                              self.region_mean)

    def _slots(self, timestamps):
        cal = calendar_features(np.asarray(timestamps).reshape(-1), self.timezone)
        slot = np.minimum(np.round(cal[:, 0] * self.slots_per_day).astype(np.int64), self.slots_per_day - 1)
        dow = np.argmax(cal[:, 1:], axis=1)
        return dow, slot

    def predict_timestamps(self, timestamps) -> np.ndarray:
        ts = np.asarray(timestamps)
        dow, slot = self._slots(ts)
        return self.table[dow, slot].reshape(ts.shape + self.table.shape[2:])

    def predict(self, batch: ForecastBatch) -> np.ndarray:
        return self.predict_timestamps(batch.target_timestamps)


def historical_average_baseline(train: DemandTensor, batch: ForecastBatch) -> np.ndarray:
    return HistoricalAverage(train).predict(batch)


_METRICS = ("mae", "rmse", "mape")


def horizon_label(step: int, bin_minutes: int = 30) -> str:
    minutes = step * bin_minutes
    if minutes % 60 == 0 and minutes >= 120:
        return f"{minutes // 60} hour"
    return f"{minutes} min"


def format_table(reports: Mapping[str, MetricReport], dataset: str = "dataset",
                 steps: Sequence[int] = (1, 3, 6), bin_minutes: int = 30) -> str:
    """Plain-text table with one row per (horizon, metric) and one column per method."""
    methods = list(reports)
    available = {e["step"] for r in reports.values() for e in r.per_horizon}
    rows = [(horizon_label(s, bin_minutes), s) for s in steps if s in available]
    rows.append(("all", None))
    header = ["Dataset", "Horizon", "Metric"] + methods
    lines = []
    for label, step in rows:
        for metric in _METRICS:
            cells = [dataset, label, metric.upper()]
            for m in methods:
                source = reports[m].to_dict() if step is None else reports[m].horizon(step)
                value = source[metric]
                cells.append("undefined" if value is None else f"{value:.3f}")
            lines.append(cells)
    widths = [max(len(str(row[i])) for row in [header] + lines) for i in range(len(header))]
    fmt = lambda row: " | ".join(str(c).rjust(w) for c, w in zip(row, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    first = next(iter(reports.values()))
    footer = f"threshold={first.threshold:g}; masked cells used={first.count} of {first.total}"
    return "\n".join([fmt(header), sep] + [fmt(r) for r in lines] + [footer]) + "\n"
