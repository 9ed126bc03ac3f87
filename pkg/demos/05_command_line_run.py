"""
The batch pipeline end to end
=============================

The same steps as the previous demo, driven through the ``stdemand``
command: ingest trips, cluster regions, train, evaluate and forecast.
"""
import json
import tempfile
from pathlib import Path

from stdemand.cli import main
from stdemand.synthetic import make_synthetic_demand, write_trips_csv

work = Path(tempfile.mkdtemp(prefix="stdemand-demo-"))
tensor, _ = make_synthetic_demand(weeks=3)
rows = write_trips_csv(work / "trips.csv", tensor)
print(f"wrote {rows} trip rows to {work / 'trips.csv'}")

config = {
    "paths": {"trips": "trips.csv", "tensor": "demand.adf", "hierarchy": "hierarchy.json",
              "checkpoint": "model/best.adf", "output_dir": "out"},
    "pipeline": {"bin_minutes": 30, "timezone": "UTC", "T": 6, "H": 6},
    "clustering": {"level_counts": [6], "threshold_factor": 1.5},
    "model": {"d_model": 32, "n_layers": 2},
    "train": {"epochs": 4},
    "seed": 0,
}
cfg = work / "run.json"
cfg.write_text(json.dumps(config, indent=1))

for command in (["ingest"], ["cluster"], ["train"], ["eval"], ["forecast", "--start", "2024-01-22T00:00:00"]):
    code = main(["--config", str(cfg)] + command)
    assert code == 0, command

print((work / "out" / "forecast.csv").read_text().splitlines()[:4])
