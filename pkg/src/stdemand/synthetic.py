"""Synthetic demand with planted functional groups.

Each group shares a daily profile (two harmonics), a weekly modulation and a
day-level multiplicative shock; every region adds its own scale and an AR(1)
log-noise, and counts are Poisson draws from the resulting rate.
"""
from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .pipeline import DAY_SECONDS, DemandTensor

WEEK_SECONDS = 7 * DAY_SECONDS
# (daily amplitude, daily peak hour, second-harmonic amplitude, peak hour, weekend factor)
_GROUP_SHAPES = [
    (0.6, 8.0, 0.25, 19.0, 0.6),   # morning-peak, quiet weekends
    (0.6, 18.0, 0.2, 12.0, 0.8),   # evening-peak
    (0.4, 14.0, 0.3, 22.0, 1.3),   # afternoon/night, busy weekends
]
MONDAY_2024 = int(datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp())


def planted_groups(n_regions: int, n_groups: int) -> np.ndarray:
    return np.arange(n_regions) % n_groups


def make_synthetic_demand(n_regions: int = 12, n_groups: int = 3, weeks: float = 4, bin_width: int = 1800,
                          seed: int = 0, base_range=(12.0, 40.0), shock_sd: float = 0.12,
                          ar_coef: float = 0.9, ar_sd: float = 0.06, start: int = MONDAY_2024):
    """Return ``(DemandTensor, group_labels)``."""
    rng = np.random.default_rng(seed)
    steps = int(round(weeks * WEEK_SECONDS / bin_width))
    ts = start + bin_width * np.arange(steps, dtype=np.int64)
    hour = ((ts - start) % DAY_SECONDS) / 3600.0
    day = (ts - start) // DAY_SECONDS
    weekend = (day % 7) >= 5
    groups = planted_groups(n_regions, n_groups)
    n_days = int(day.max()) + 1
    shocks = np.exp(shock_sd * rng.standard_normal((n_days, n_groups)))
    base = rng.uniform(*base_range, size=n_regions)
    values = np.zeros((steps, n_regions, 1))
    for r in range(n_regions):
        a1, h1, a2, h2, wk = _GROUP_SHAPES[groups[r] % len(_GROUP_SHAPES)]
        jitter = rng.normal(0.0, 0.3)
        daily = (1.0 + a1 * np.cos(2 * np.pi * (hour - h1 - jitter) / 24.0)
                 + a2 * np.cos(4 * np.pi * (hour - h2 - jitter) / 24.0))
        weekly = np.where(weekend, wk, 1.0)
        ar = np.zeros(steps)
        eps = ar_sd * rng.standard_normal(steps)
        for t in range(1, steps):
            ar[t] = ar_coef * ar[t - 1] + eps[t]
        rate = base[r] * np.clip(daily, 0.05, None) * weekly * shocks[day, groups[r]] * np.exp(ar)
        values[:, r, 0] = rng.poisson(rate)
    region_ids = [f"R{r:03d}" for r in range(n_regions)]
    return DemandTensor(values, ts, region_ids, bin_width, "UTC"), groups


def write_trips_csv(path, tensor: DemandTensor) -> int:
    """Write one ``timestamp,region_id,count`` row per nonzero cell; returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "region_id", "count"])
        for t, stamp in enumerate(tensor.timestamps):
            when = datetime.fromtimestamp(int(stamp) + 60, timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
            for n, rid in enumerate(tensor.region_ids):
                c = tensor.values[t, n, 0]
                if c > 0:
                    w.writerow([when, rid, f"{c:g}"])
                    rows += 1
    return rows
