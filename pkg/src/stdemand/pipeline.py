"""Trip records to normalized, windowed demand tensors.

Bins are half-open ``[start, start + bin_width)`` so a record exactly on a
boundary lands in the later bin.  Regions are ordered lexicographically by id.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .container import read_container, write_container

DAY_SECONDS = 86400
DEFAULT_BIN_WIDTH = 1800
TIME_FEATURES = 8  # time of day + 7 day-of-week slots
STD_FLOOR = 1e-8


class IngestError(ValueError):
    pass


def parse_timestamp(value, tz: ZoneInfo) -> int:
    """Epoch seconds for an RFC 3339 / ``YYYY-MM-DD HH:MM:SS`` string.

    Naive timestamps are read in ``tz``.
    """
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=tz)
    return math.floor(dt.timestamp())


@dataclass
class DemandTensor:
    """Binned demand of shape ``(T_total, N, D)``."""

    values: np.ndarray
    timestamps: np.ndarray
    region_ids: list[str]
    bin_width: int = DEFAULT_BIN_WIDTH
    timezone: str = "UTC"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.region_ids = [str(r) for r in self.region_ids]
        if self.values.ndim != 3:
            raise ValueError(f"values must be (T, N, D), got shape {self.values.shape}")
        t, n, d = self.values.shape
        if n < 1 or d < 1:
            raise ValueError("need at least one region and one feature")
        if len(self.timestamps) != t or len(self.region_ids) != n:
            raise ValueError("timestamps/region_ids do not match the values shape")
        if np.any(self.values < 0):
            raise ValueError("demand values must be nonnegative")
        if t > 1 and np.any(np.diff(self.timestamps) != self.bin_width):
            raise ValueError("timestamps must be evenly spaced by bin_width")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def slice(self, start: int, stop: int) -> "DemandTensor":
        return DemandTensor(self.values[start:stop], self.timestamps[start:stop],
                            list(self.region_ids), self.bin_width, self.timezone)

    def fingerprint(self) -> str:
        """Content hash of values, timestamps and region ids."""
        h = hashlib.sha256()
        h.update(repr((self.values.shape, self.bin_width, self.region_ids)).encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.timestamps, dtype="<i8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        header = {
            "kind": "demand",
            "shape": list(self.values.shape),
            "bin_width": int(self.bin_width),
            "region_ids": self.region_ids,
            "start_timestamp": int(self.timestamps[0]),
            "timezone": self.timezone,
        }
        write_container(path, header, {"values": self.values})

    @classmethod
    def load(cls, path) -> "DemandTensor":
        header, arrays = read_container(path)
        if header.get("kind") != "demand":
            raise ValueError(f"{path}: not a demand archive")
        values = arrays["values"].reshape(header["shape"])
        ts = header["start_timestamp"] + header["bin_width"] * np.arange(values.shape[0], dtype=np.int64)
        return cls(values, ts, header["region_ids"], header["bin_width"], header.get("timezone", "UTC"))


def ingest_trips(records: Iterable, bin_width: int = DEFAULT_BIN_WIDTH, timezone: str = "UTC",
                 first_row: int = 1) -> DemandTensor:
    """Count ``(timestamp, region_id[, count])`` records into fixed-width bins.

    Bins are aligned to local midnight of ``timezone``.  ``first_row`` only
    shifts the row numbers quoted in error messages.
    """
    bin_width = int(bin_width)
    if bin_width <= 0 or DAY_SECONDS % bin_width:
        raise IngestError(f"bin width {bin_width}s does not divide a day evenly")
    tz = ZoneInfo(timezone)
    times, regions, counts = [], [], []
    for row, rec in enumerate(records, start=first_row):
        try:
            if len(rec) not in (2, 3):
                raise ValueError(f"expected 2 or 3 fields, got {len(rec)}")
            ts = parse_timestamp(rec[0], tz)
            region = str(rec[1]).strip()
            if not region:
                raise ValueError("empty region id")
            count = float(rec[2]) if len(rec) == 3 and str(rec[2]).strip() != "" else 1.0
            if not math.isfinite(count) or count < 0:
                raise ValueError(f"invalid count {rec[2]!r}")
        except (ValueError, TypeError) as exc:
            raise IngestError(f"row {row}: {exc}") from None
        times.append(ts)
        regions.append(region)
        counts.append(count)
    if not times:
        raise IngestError("no trip records to ingest")

    times = np.asarray(times, dtype=np.int64)
    first = datetime.fromtimestamp(int(times.min()), tz)
    midnight = first.replace(hour=0, minute=0, second=0, microsecond=0)
    origin = math.floor(midnight.timestamp())
    bins = (times - origin) // bin_width
    lo, hi = int(bins.min()), int(bins.max())

    region_ids = sorted(set(regions))
    col = {r: i for i, r in enumerate(region_ids)}
    values = np.zeros((hi - lo + 1, len(region_ids), 1))
    np.add.at(values, (bins - lo, np.array([col[r] for r in regions]), 0), np.asarray(counts))
    timestamps = origin + bin_width * np.arange(lo, hi + 1, dtype=np.int64)
    return DemandTensor(values, timestamps, region_ids, bin_width, timezone)


def read_trips_csv(path) -> Iterable[tuple]:
    """Yield records from a ``timestamp,region_id[,count]`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        names = [h.strip().lower() for h in header]
        if names[:2] != ["timestamp", "region_id"] or names[2:] not in ([], ["count"]):
            raise IngestError(f"{path}: line 1: expected header timestamp,region_id[,count], got {header}")
        for row in reader:
            yield tuple(row)


def ingest_csv(path, bin_width: int = DEFAULT_BIN_WIDTH, timezone: str = "UTC") -> DemandTensor:
    # data rows start on line 2
    return ingest_trips(read_trips_csv(path), bin_width, timezone, first_row=2)


@dataclass
class TimeFeatures:
    """Per-step calendar features, replicated across regions.

    ``time_of_day`` is ``(T, N, 1)`` in ``[0, 1)``; ``day_of_week`` is a
    ``(T, N, 7)`` one-hot with Monday at index 0.
    """

    time_of_day: np.ndarray
    day_of_week: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.time_of_day, self.day_of_week], axis=-1)


def calendar_features(timestamps, timezone: str) -> np.ndarray:
    """``(T, 8)`` array of [time_of_day, one-hot weekday]."""
    tz = ZoneInfo(timezone)
    ts = np.asarray(timestamps, dtype=np.int64).reshape(-1)
    out = np.zeros((len(ts), TIME_FEATURES))
    for i, t in enumerate(ts):
        dt = datetime.fromtimestamp(int(t), tz)
        out[i, 0] = (dt.hour * 3600 + dt.minute * 60 + dt.second) / DAY_SECONDS
        out[i, 1 + dt.weekday()] = 1.0
    return out


def build_time_features(timestamps, n_regions: int, timezone: str = "UTC") -> TimeFeatures:
    cal = calendar_features(timestamps, timezone)
    t = len(cal)
    tod = np.broadcast_to(cal[:, None, :1], (t, n_regions, 1))
    dow = np.broadcast_to(cal[:, None, 1:], (t, n_regions, 7))
    return TimeFeatures(tod, dow)


def chronological_split(tensor: DemandTensor, ratios: Sequence[int] = (7, 1, 2)):
    """Contiguous train/val/test split; the remainder after flooring goes to test."""
    total = len(tensor)
    if total < 10:
        raise ValueError(f"series of length {total} is too short to split (need >= 10)")
    denom = sum(ratios)
    n_train = total * ratios[0] // denom
    n_val = total * ratios[1] // denom
    return (tensor.slice(0, n_train),
            tensor.slice(n_train, n_train + n_val),
            tensor.slice(n_train + n_val, total))


@dataclass
class Normalizer:
    """Per-feature z-score fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: DemandTensor) -> "Normalizer":
        mean = train.values.mean(axis=(0, 1))
        std = np.maximum(train.values.std(axis=(0, 1)), STD_FLOOR)
        return cls(mean, std)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


fit_normalizer = Normalizer.fit


@dataclass
class ForecastBatch:
    """Stacked forecasting samples.

    Time features use a singleton region axis: ``input_time`` is
    ``(B, T, 1, 8)`` and broadcasts against ``(B, T, N, d)``.
    """

    inputs: np.ndarray
    input_time: np.ndarray
    targets: np.ndarray
    target_time: np.ndarray
    raw_inputs: np.ndarray
    input_timestamps: np.ndarray
    target_timestamps: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, index) -> "ForecastBatch":
        return ForecastBatch(*(np.ascontiguousarray(getattr(self, f)[index]) for f in _BATCH_FIELDS))

    def permute_regions(self, perm) -> "ForecastBatch":
        return ForecastBatch(self.inputs[:, :, perm], self.input_time, self.targets[:, :, perm],
                             self.target_time, self.raw_inputs[:, :, perm],
                             self.input_timestamps, self.target_timestamps)


_BATCH_FIELDS = ("inputs", "input_time", "targets", "target_time", "raw_inputs",
                 "input_timestamps", "target_timestamps")


def _windows(arr: np.ndarray, length: int) -> np.ndarray:
    # (S, ..., length) -> (S, length, ...)
    view = sliding_window_view(arr, length, axis=0)
    return np.moveaxis(view, -1, 1)


def make_windows(split: DemandTensor, T: int, H: int, normalizer: Normalizer | None = None) -> ForecastBatch:
    """All stride-1 (input, target) windows; ``len(split) - T - H + 1`` samples."""
    if T < 1 or H < 1:
        raise ValueError("T and H must be positive")
    n = len(split)
    count = n - T - H + 1
    if count < 1:
        raise ValueError(f"split of length {n} is shorter than T + H = {T + H}")
    raw = split.values
    norm = normalizer.normalize(raw) if normalizer is not None else raw
    cal = calendar_features(split.timestamps, split.timezone)[:, None, :]
    inputs = _windows(norm[: n - H], T)
    raw_inputs = _windows(raw[: n - H], T)
    targets = _windows(raw[T:], H)
    return ForecastBatch(
        inputs=inputs[:count],
        input_time=_windows(cal[: n - H], T)[:count],
        targets=targets[:count],
        target_time=_windows(cal[T:], H)[:count],
        raw_inputs=raw_inputs[:count],
        input_timestamps=_windows(split.timestamps[: n - H], T)[:count],
        target_timestamps=_windows(split.timestamps[T:], H)[:count],
    )


@dataclass
class Dataset:
    """Chronological splits of one tensor plus their windows."""

    train_split: DemandTensor
    val_split: DemandTensor
    test_split: DemandTensor
    normalizer: Normalizer
    train: ForecastBatch
    val: ForecastBatch
    test: ForecastBatch


def prepare_dataset(tensor: DemandTensor, T: int, H: int, ratios: Sequence[int] = (7, 1, 2)) -> Dataset:
    train, val, test = chronological_split(tensor, ratios)
    norm = Normalizer.fit(train)
    return Dataset(train, val, test, norm,
                   make_windows(train, T, H, norm), make_windows(val, T, H, norm),
                   make_windows(test, T, H, norm))
