"""Batch command-line front end: ingest -> cluster -> train -> eval -> forecast.

Every command reads one JSON run configuration.  Relative paths inside it are
resolved against the directory holding the config file.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from .clustering import ClusterHierarchy, ClusteringError, build_hierarchy, similarity_matrix
from .container import ContainerError
from .evaluation import DEFAULT_THRESHOLD, HistoricalAverage, format_table, persistence_baseline, \
    thresholded_metrics
from .model import DemandForecaster, ModelConfig, default_level_counts
from .pipeline import DemandTensor, IngestError, calendar_features, chronological_split, ingest_csv, \
    make_windows, parse_timestamp, prepare_dataset
from .training import TrainConfig, TrainingError, load_checkpoint, train

log = logging.getLogger("stdemand")

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3
REPORT_STEPS = (1, 3, 6)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


@dataclass
class Paths:
    trips: str = "trips.csv"
    tensor: str = "demand.adf"
    hierarchy: str = "hierarchy.json"
    checkpoint: str = "checkpoint.adf"
    output_dir: str = "out"


@dataclass
class PipelineSettings:
    bin_minutes: int = 30
    timezone: str = "UTC"
    T: int = 6
    H: int = 6


@dataclass
class ClusterSettings:
    level_counts: list | None = None  # None -> one level with N // 2 clusters
    threshold_factor: float = 1.5


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    clustering: ClusterSettings = field(default_factory=ClusterSettings)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.pipeline.T < 1 or self.pipeline.H < 1:
            raise CliError("pipeline.T and pipeline.H must be positive")
        reserved = {"input_steps", "horizon", "n_features", "level_counts"} & set(self.model)
        if reserved:
            raise CliError(f"model settings {sorted(reserved)} are derived from pipeline/clustering; remove them")
        if "seed" in self.train:
            raise CliError("set the training seed with the top-level 'seed' field")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}", EXIT_MISSING)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from None
        known = {"paths", "pipeline", "clustering", "model", "train", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise CliError(f"{path}: unknown config sections {sorted(unknown)}")
        try:
            return cls(Paths(**doc.get("paths", {})), PipelineSettings(**doc.get("pipeline", {})),
                       ClusterSettings(**doc.get("clustering", {})), dict(doc.get("model", {})),
                       dict(doc.get("train", {})), int(doc.get("seed", 0)), path.resolve().parent)
        except TypeError as exc:
            raise CliError(f"{path}: {exc}") from None

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def bin_width(self) -> int:
        return int(self.pipeline.bin_minutes) * 60


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CliError(f"{what} not found: {path}", EXIT_MISSING)
    return path


def _load_tensor(cfg: RunConfig) -> DemandTensor:
    tensor = DemandTensor.load(_require(cfg.path("tensor"), "demand archive"))
    if tensor.bin_width != cfg.bin_width:
        raise CliError(f"archive bin width {tensor.bin_width}s does not match config "
                       f"{cfg.pipeline.bin_minutes} min")
    return tensor


def _check_hierarchy(hierarchy: ClusterHierarchy, train_split: DemandTensor, source) -> None:
    fp = train_split.fingerprint()
    if hierarchy.fingerprint != fp:
        raise CliError(f"{source}: hierarchy fingerprint {hierarchy.fingerprint[:12] or '<none>'} does not match "
                       f"the training split of the current archive ({fp[:12]}); re-run 'cluster'")
    if hierarchy.n_regions != train_split.n_regions:
        raise CliError(f"{source}: hierarchy covers {hierarchy.n_regions} regions, archive has "
                       f"{train_split.n_regions}")


# -- commands ------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> None:
    trips = _require(cfg.path("trips"), "trips CSV")
    tensor = ingest_csv(trips, cfg.bin_width, cfg.pipeline.timezone)
    out = cfg.path("tensor")
    out.parent.mkdir(parents=True, exist_ok=True)
    tensor.save(out)
    print(f"T_total={len(tensor)} N={tensor.n_regions} total_trips={tensor.values.sum():g} -> {out}")


def cmd_cluster(cfg: RunConfig, args) -> None:
    tensor = _load_tensor(cfg)
    train_split, _, _ = chronological_split(tensor)
    counts = cfg.clustering.level_counts
    if counts is None:
        counts = list(default_level_counts(tensor.n_regions))
    m_sim = similarity_matrix(train_split, threads=args.threads)
    hierarchy = build_hierarchy(m_sim, counts, cfg.clustering.threshold_factor, train_split.fingerprint())
    out = cfg.path("hierarchy")
    hierarchy.save(out)
    sizes = [lvl.partition.sizes().tolist() for lvl in hierarchy.levels]
    print(f"levels={hierarchy.level_counts} sizes={sizes} -> {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    tensor = _load_tensor(cfg)
    hierarchy = ClusterHierarchy.load(_require(cfg.path("hierarchy"), "hierarchy file"))
    data = prepare_dataset(tensor, cfg.pipeline.T, cfg.pipeline.H)
    _check_hierarchy(hierarchy, data.train_split, cfg.path("hierarchy"))
    model_cfg = ModelConfig(**cfg.model, input_steps=cfg.pipeline.T, horizon=cfg.pipeline.H,
                            n_features=tensor.n_features, level_counts=hierarchy.level_counts)
    train_kw = dict(cfg.train, seed=cfg.seed)
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    train_cfg = TrainConfig(**train_kw)
    model = DemandForecaster(model_cfg, tensor.n_regions, hierarchy.cluster_maps, seed=cfg.seed)
    ckpt = cfg.path("checkpoint")
    history = cfg.path("output_dir") / "history.jsonl"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    # a stale checkpoint must not be mistaken for this run's output
    ckpt.unlink(missing_ok=True)
    try:
        result = train(model, data, train_cfg, ckpt, history, hierarchy)
    except TrainingError as exc:
        labeled = [_label_partial(p) for p in (ckpt, history) if p.exists()]
        raise CliError(f"training diverged: {exc}; partial artifacts: {[str(p) for p in labeled]}",
                       EXIT_DIVERGED) from None
    print(f"epochs_run={len(result.history)} best_epoch={result.best_epoch} "
          f"best_val_mae={result.best_val_mae:.4f} -> {ckpt}, {history}")


def _label_partial(path: Path) -> Path:
    target = path.with_name(path.stem + ".partial" + path.suffix)
    os.replace(path, target)
    return target


def _load_model(cfg: RunConfig, tensor: DemandTensor):
    try:
        model, norm, header = load_checkpoint(_require(cfg.path("checkpoint"), "checkpoint"))
    except (ContainerError, KeyError, TypeError) as exc:
        raise CliError(f"{cfg.path('checkpoint')}: unreadable checkpoint: {exc}") from None
    mc = model.config
    expected = (cfg.pipeline.T, tensor.n_regions, tensor.n_features)
    if (mc.input_steps, model.n_regions, mc.n_features) != expected:
        raise CliError(f"checkpoint expects T={mc.input_steps}, N={model.n_regions}, D={mc.n_features} but "
                       f"config/archive give T={expected[0]}, N={expected[1]}, D={expected[2]}")
    if mc.horizon != cfg.pipeline.H:
        raise CliError(f"checkpoint was trained for H={mc.horizon}, config asks for H={cfg.pipeline.H}")
    if header.get("hierarchy"):
        train_split, _, _ = chronological_split(tensor)
        _check_hierarchy(ClusterHierarchy.from_dict(header["hierarchy"]), train_split, cfg.path("checkpoint"))
    return model, norm, header


def cmd_eval(cfg: RunConfig, args) -> None:
    tensor = _load_tensor(cfg)
    model, norm, header = _load_model(cfg, tensor)
    train_split, _, test_split = chronological_split(tensor)
    T, H = cfg.pipeline.T, cfg.pipeline.H
    batch = make_windows(test_split, T, H, norm)
    threshold = float(header.get("train_config", {}).get("threshold", DEFAULT_THRESHOLD))
    pred = norm.denormalize(model.predict(batch.inputs, batch.input_time))
    reports = {
        "model": thresholded_metrics(pred, batch.targets, threshold),
        "persistence": thresholded_metrics(persistence_baseline(batch), batch.targets, threshold),
        "historical_average": thresholded_metrics(HistoricalAverage(train_split).predict(batch),
                                                  batch.targets, threshold),
    }
    steps = sorted({s for s in REPORT_STEPS if s <= H} | {H})
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "dataset": cfg.path("tensor").stem, "threshold": threshold, "horizon": H, "steps": steps,
        "bin_minutes": cfg.pipeline.bin_minutes, "test_samples": len(batch),
        "reports": {name: r.to_dict() for name, r in reports.items()},
    }
    (out_dir / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    table = format_table(reports, doc["dataset"], steps, cfg.pipeline.bin_minutes)
    (out_dir / "report.txt").write_text(table)
    print(table, end="")


def cmd_forecast(cfg: RunConfig, args) -> None:
    tensor = _load_tensor(cfg)
    model, norm, _ = _load_model(cfg, tensor)
    T, H = cfg.pipeline.T, cfg.pipeline.H
    tz = ZoneInfo(tensor.timezone)
    try:
        raw = args.start.strip()
        start = parse_timestamp(int(raw) if raw.lstrip("-").isdigit() else raw, tz)
    except ValueError as exc:
        raise CliError(f"bad --start value {args.start!r}: {exc}") from None
    offset = start - int(tensor.timestamps[0])
    if offset % tensor.bin_width:
        raise CliError(f"--start {args.start} is not aligned to the {tensor.bin_width}s bin grid")
    idx = offset // tensor.bin_width
    if idx < T or idx > len(tensor):
        raise CliError(f"insufficient history: forecasting from {args.start} needs the {T} bins before it "
                       f"inside the archive ({len(tensor)} bins)")
    window = tensor.slice(idx - T, idx)
    inputs = norm.normalize(window.values)[None]
    input_time = calendar_features(window.timestamps, tensor.timezone)[None, :, None, :]
    pred = np.maximum(norm.denormalize(model.predict(inputs, input_time))[0], 0.0)   # (H, N, D)
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "forecast.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "horizon_step", "timestamp", "predicted_demand"])
        for n, region in enumerate(tensor.region_ids):
            for h in range(H):
                when = datetime.fromtimestamp(start + h * tensor.bin_width, tz).isoformat()
                w.writerow([region, h + 1, when, f"{pred[h, n, 0]:.6f}"])
    print(f"rows={tensor.n_regions * H} -> {out}")


COMMANDS = {"ingest": cmd_ingest, "cluster": cmd_cluster, "train": cmd_train, "eval": cmd_eval,
            "forecast": cmd_forecast}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stdemand", description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for pairwise DTW (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="bin trip records into a demand archive")
    sub.add_parser("cluster", help="build the region cluster hierarchy")
    p = sub.add_parser("train", help="train and keep the best checkpoint")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    sub.add_parser("eval", help="test-split metrics against the naive baselines")
    p = sub.add_parser("forecast", help="write predictions starting at a timestamp")
    p.add_argument("--start", required=True, help="first forecast bin: ISO time (e.g. 2024-01-29T00:00:00) or epoch seconds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise CliError("--threads must be at least 1")
        print(f"[stdemand {args.command}] seed={cfg.seed} config={args.config}", flush=True)
        COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (IngestError, ClusteringError, ContainerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
