"""Warm-start a surrogate on a new technology profile from a few hundred samples."""
import numpy as np

from ckt_surrogate import (
    InsightConfig, TrainRunConfig, build_dataset, evaluate, split, train_insight,
    transfer_finetune,
)

# Source model: plenty of data on the 45 nm-like profile.
src, _ = split(build_dataset("ota2_nmos", "synth45", 1000, seed=1), 1000, 0, seed=0)
source, _ = train_insight(src, InsightConfig(), TrainRunConfig(epochs=30, seed=0))

# Target: 300 samples on the 130 nm-like profile, where gains and poles shift.
tuned, scratch = [], []
for seed in range(3):
    ds = build_dataset("ota2_nmos", "synth130", 800, seed=200 + seed)
    train, test = split(ds, 300, 500, seed=seed)
    run = TrainRunConfig(epochs=30, seed=seed)
    ft, _ = transfer_finetune(source, train, run)
    sc, _ = train_insight(train, source.config, run, metric_order=source.layout.metric_names)
    tuned.append(evaluate(ft, test).aggregate_mse)
    scratch.append(evaluate(sc, test).aggregate_mse)
    print(f"seed {seed}: fine-tuned MSE {tuned[-1]:.4e}, from scratch {scratch[-1]:.4e}")
print(f"median: fine-tuned {np.median(tuned):.4e}, from scratch {np.median(scratch):.4e}")
