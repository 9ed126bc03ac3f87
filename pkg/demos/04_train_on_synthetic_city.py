"""
Training on a synthetic city
============================

Twelve regions, four weeks of half-hour bins.  A small configuration trains
in about a minute; the acceptance suite uses the full default model.
"""
import logging

from stdemand.clustering import build_hierarchy, similarity_matrix
from stdemand.evaluation import HistoricalAverage, format_table, persistence_baseline, thresholded_metrics
from stdemand.model import DemandForecaster, ModelConfig
from stdemand.pipeline import prepare_dataset
from stdemand.synthetic import make_synthetic_demand
from stdemand.training import TrainConfig, evaluate, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

tensor, _ = make_synthetic_demand()
data = prepare_dataset(tensor, T=6, H=3)
print("windows: train", len(data.train), "val", len(data.val), "test", len(data.test))

hierarchy = build_hierarchy(similarity_matrix(data.train_split), [6])
model = DemandForecaster(ModelConfig(d_model=32, n_layers=2, horizon=3), 12, hierarchy.cluster_maps)
print("parameters:", model.params.n_values())

result = train(model, data, TrainConfig(epochs=6))
print("best epoch", result.best_epoch, "val MAE", round(result.best_val_mae, 3))

_, report = evaluate(model, data.test, data.normalizer)
reports = {
    "model": report,
    "persistence": thresholded_metrics(persistence_baseline(data.test), data.test.targets),
    "hist. avg": thresholded_metrics(HistoricalAverage(data.train_split).predict(data.test), data.test.targets),
}
print(format_table(reports, "synthetic", steps=(1, 3)))
