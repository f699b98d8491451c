"""Behavioural circuit oracles, figures of merit and dataset files."""
import tempfile
from pathlib import Path

import numpy as np

from ckt_surrogate import Constraint, FoMSpec, build_dataset, evaluate_oracle, fom, get_topology
from ckt_surrogate.data import Dataset, fit_norm, sample_designs

# Every topology exposes its sizing knobs and the metrics the oracle returns.
for name in ["ota2_nmos", "ota2_pmos", "tia2", "tia3", "comparator", "level_shifter"]:
    topo = get_topology(name)
    print(f"{name:14s} {len(topo.params)} params -> {', '.join(topo.metric_names)}")

# One design through the two-stage OTA, on two technology profiles.
topo = get_topology("ota2_nmos")
x = sample_designs("ota2_nmos", 1, seed=0)[0]
for tech in ["synth45", "synth130"]:
    y = evaluate_oracle("ota2_nmos", tech, x)
    print(tech, {n: float(f"{v:.4g}") for n, v in zip(topo.metric_names, y)})

# Growing the compensation capacitor pushes the phase margin towards 90 degrees.
cc = topo.param_names.index("cc")
pm = topo.metric_names.index("phase_margin")
for c in np.linspace(topo.lower[cc], topo.upper[cc], 4):
    x2 = x.copy()
    x2[cc] = c
    print(f"cc {c:.2f} pF  PM {evaluate_oracle('ota2_nmos', 'synth45', x2)[pm]:.2f} deg")

# A figure of merit: minimise quiescent current subject to gain and bandwidth floors.
spec = FoMSpec.for_topology("ota2_nmos", "i_q", objective_weight=0.1, constraints=[
    Constraint("dc_gain", ">=", 60.0, 10.0), Constraint("ugbw", ">=", 30.0, 10.0)])
Y = evaluate_oracle("ota2_nmos", "synth45", sample_designs("ota2_nmos", 5, seed=1))
print("FoM of five random designs:", np.round(fom(spec, Y), 3))

# Datasets round-trip through CSV byte for byte; normalisation logs the wide-range metrics.
ds = build_dataset("ota2_nmos", "synth45", 200, seed=3)
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "ota.csv"
    ds.save(path)
    print("reloaded equal:", Dataset.load(path) == ds, f"({path.stat().st_size} bytes)")
stats = fit_norm(ds)
print("log-scaled metrics:", [n for n, f in zip(ds.metric_names, stats.log_flags) if f])
