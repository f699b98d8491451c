"""Known-prefix conditioning and across-head uncertainty on the comparator."""
import numpy as np

from ckt_surrogate import (
    InsightConfig, TrainRunConfig, build_dataset, evaluate, rollout_with_uncertainty, split,
    train_insight,
)

ds = build_dataset("comparator", "synth45", 1000, seed=100)
train, test = split(ds, 800, 200, seed=0)
ck, _ = train_insight(train, InsightConfig(), TrainRunConfig(epochs=30, seed=0))
print("decode order:", ck.layout.metric_names)

# Supplying the measured DC power lets the model condition its delay prediction on it.
j = ck.layout.metric_names.index("avg_delay")
for k in [0, 1]:
    rep = evaluate(ck, test, "rollout", k)
    print(f"known_prefix_len={k}: avg_delay MSE {rep.mse[j]:.4e}, R2 {rep.r2[j]:.4f}")

# The K output heads are trained on bootstrap-reweighted rows; their spread is a
# per-prediction confidence signal.
ts = test.with_metric_order(ck.layout.metric_names)
u = rollout_with_uncertainty(ck, ts.X)
err = np.abs(ck.norm.normalize_y(u.mean) - ck.norm.normalize_y(ts.Y))[:, j]
spread = u.std[:, j]
hi = spread > np.median(spread)
print(f"mean |error| on the most uncertain half {err[hi].mean():.4f}, "
      f"on the least uncertain half {err[~hi].mean():.4f}")

# With the true DC power supplied its spread is zero and the delay head alone varies.
u1 = rollout_with_uncertainty(ck, ts.X[:3], known_prefix=ts.Y[:3, :1])
print("spread with DC power known:\n", np.round(u1.std, 4))
