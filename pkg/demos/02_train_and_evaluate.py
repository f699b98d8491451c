"""Train the autoregressive surrogate on the NMOS OTA and inspect its predictions."""
import tempfile
from pathlib import Path

import numpy as np

from ckt_surrogate import (
    InsightConfig, TrainRunConfig, build_dataset, evaluate, evaluate_oracle, load_checkpoint,
    rollout, save_checkpoint, split, train_insight,
)

ds = build_dataset("ota2_nmos", "synth45", 800, seed=1)
train, test = split(ds, 600, 200, seed=0)

# A short run of the default-width model (raise epochs for better fidelity).
ck, history = train_insight(train, InsightConfig(), TrainRunConfig(epochs=30, seed=0))
print("metric order used by the decoder:", ck.layout.metric_names)
print(f"epoch 1 train loss {history[0]['train_loss']:.4f}, "
      f"last {history[-1]['train_loss']:.4f}")

# Free-running rollout versus teacher forcing on held-out designs.
for mode in ["rollout", "teacher-forced"]:
    rep = evaluate(ck, test, mode)
    print(f"\n{mode}:")
    print(rep.table())

# One design, predicted against the oracle in physical units.
x = test.X[0]
pred = rollout(ck, x)
true = evaluate_oracle("ota2_nmos", "synth45", x)
order = [test.metric_names.index(n) for n in ck.layout.metric_names]
for n, p, t in zip(ck.layout.metric_names, pred, true[order]):
    print(f"{n:14s} predicted {p:10.4g}  oracle {t:10.4g}")

# Checkpoints are plain .npz files and reload to identical predictions.
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "ota.ckpt"
    save_checkpoint(ck, path)
    again = load_checkpoint(path)
    print("\nreloaded checkpoint agrees:", np.array_equal(rollout(again, test.X), rollout(ck, test.X)))
