import json
import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ckt_surrogate.circuits import (
    KIND_RANK, TECHNOLOGIES, TOPOLOGIES, Constraint, Device, FoMSpec, OutOfBoundsError,
    ParamSpec, TechnologyProfile, constraints_met, evaluate_oracle, fom, fom_from_terms,
    get_technology, get_topology, in_bounds,
)
from ckt_surrogate.data import sample_designs

from conftest import GOLDEN


def ota_reference(x, tech):
    """Hand-written two-stage OTA equations, scalar math only."""
    wl_in, wl_load, wl_tail, wl_cs, wl_sink, wl_bias, cc, ib = x
    k_in, k_cs = tech.nmos.kprime, tech.pmos.kprime
    lam = tech.nmos.lam + tech.pmos.lam
    ib *= 1e-6
    cc *= 1e-12
    it = ib * wl_tail / wl_bias
    i2 = ib * wl_sink / wl_bias
    gm1 = math.sqrt(k_in * wl_in * it)
    gm6 = math.sqrt(2 * k_cs * wl_cs * i2)
    gain = (gm1 / (lam * it / 2)) * (gm6 / (lam * i2))
    ugbw = gm1 / (2 * math.pi * cc)
    p2 = gm6 / (2 * math.pi * (2e-12 + tech.cpar * (wl_cs + wl_sink)))
    z = gm6 / (2 * math.pi * (tech.cpar * (wl_in + wl_load) + 5e-15))
    pm = 90 - math.degrees(math.atan(ugbw / p2)) - math.degrees(math.atan(ugbw / z))
    return [(ib + it + i2) * 1e3, 20 * math.log10(gain), ugbw / 1e6, pm]


def test_ota_matches_reference():
    tech = get_technology("synth45")
    for x in sample_designs("ota2_nmos", 20, seed=2):
        np.testing.assert_allclose(evaluate_oracle("ota2_nmos", tech, x), ota_reference(x, tech),
                                   rtol=1e-12)


def test_doubling_cc_halves_ugbw():
    x = sample_designs("ota2_nmos", 1, seed=4)[0]
    x[6] = 1.0
    x2 = x.copy()
    x2[6] = 2.0
    a = evaluate_oracle("ota2_nmos", "synth45", x)
    b = evaluate_oracle("ota2_nmos", "synth45", x2)
    assert b[2] == pytest.approx(a[2] / 2, rel=1e-15)


def test_phase_margin_tends_to_90_for_large_cc():
    topo = get_topology("ota2_nmos")
    x = sample_designs(topo, 1, seed=4)[0]
    x[6] = 1e6   # outside the box on purpose: asymptote of the closed form
    y = topo.model(x, get_technology("synth45"))
    assert abs(y[3] - 90.0) < 1e-3


def test_oracle_golden():
    with open(os.path.join(GOLDEN, "oracle.json")) as fh:
        gold = json.load(fh)
    assert set(gold) == set(TOPOLOGIES)
    for name, rec in gold.items():
        x = sample_designs(name, 1, seed=0)[0]
        assert x.tolist() == rec["design"]
        np.testing.assert_allclose(evaluate_oracle(name, "synth45", x), rec["metrics"], rtol=1e-12)


@pytest.mark.parametrize("name", sorted(TOPOLOGIES))
def test_oracle_outputs_finite_and_positive(name):
    topo = get_topology(name)
    for tech in TECHNOLOGIES:
        X = sample_designs(topo, 500, seed=1)
        Y = evaluate_oracle(topo, tech, X)
        assert Y.shape == (500, topo.n_metrics)
        assert np.all(np.isfinite(Y))
        for j, m in enumerate(topo.metrics):
            if m.positive:
                assert np.all(Y[:, j] > 0), (name, m.name)


@pytest.mark.parametrize("name", sorted(TOPOLOGIES))
def test_oracle_deterministic_and_batch_consistent(name):
    X = sample_designs(name, 5, seed=3)
    Y = evaluate_oracle(name, "synth130", X)
    for i in range(5):
        np.testing.assert_array_equal(evaluate_oracle(name, "synth130", X[i]), Y[i])


@pytest.mark.parametrize("name", sorted(TOPOLOGIES))
def test_local_lipschitz(name):
    topo = get_topology(name)
    X = sample_designs(topo, 20, seed=8)
    # stay off the box edges so the perturbation is in bounds
    X = np.clip(X, topo.lower * (1 + 1e-5), topo.upper * (1 - 1e-5))
    Y = evaluate_oracle(topo, "synth45", X)
    for i in range(topo.n_params):
        Xp = X.copy()
        Xp[:, i] *= 1 + 1e-6
        Yp = evaluate_oracle(topo, "synth45", Xp)
        rel = np.abs(Yp - Y) / np.maximum(np.abs(Y), 1e-30)
        assert np.all(rel < 1e-3)


def test_parameter_counts():
    counts = {n: t.n_params for n, t in TOPOLOGIES.items()}
    assert counts == {"ota2_nmos": 8, "ota2_pmos": 8, "tia2": 6, "tia3": 9,
                      "comparator": 6, "level_shifter": 5}


def test_technology_monotone_ugbw():
    base = get_technology("synth45")
    faster = base.scaled("fast", kprime=1.5)
    X = sample_designs("ota2_nmos", 200, seed=6)
    for topo in ("ota2_nmos", "ota2_pmos"):
        a = evaluate_oracle(topo, base, X)[:, 2]
        b = evaluate_oracle(topo, faster, X)[:, 2]
        assert np.all(b >= a)


def test_out_of_bounds_and_wrong_length():
    topo = get_topology("comparator")
    x = (topo.lower + topo.upper) / 2
    bad = x.copy()
    bad[0] = topo.upper[0] * 2
    assert not in_bounds(topo, bad)
    with pytest.raises(OutOfBoundsError):
        evaluate_oracle(topo, "synth45", bad)
    with pytest.raises(ValueError):
        evaluate_oracle(topo, "synth45", x[:-1])


def test_registry_errors():
    with pytest.raises(KeyError):
        get_topology("bandgap")
    with pytest.raises(KeyError):
        get_technology("synth7")


def test_technology_validation():
    d = Device(1e-4, 0.4, 0.1)
    with pytest.raises(ValueError):
        TechnologyProfile("bad", d, d, vdd=0.3, cpar=1e-15)
    with pytest.raises(ValueError):
        TechnologyProfile("bad", Device(-1e-4, 0.4, 0.1), d, vdd=1.2, cpar=1e-15)
    for t in TECHNOLOGIES.values():
        assert t.vdd > max(t.nmos.vth, t.pmos.vth)


def test_param_spec_validation():
    with pytest.raises(ValueError):
        ParamSpec("w", "", 2.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        ParamSpec("w", "", 1.0, 2.0, 0.3)
    for topo in TOPOLOGIES.values():
        assert np.all(topo.lower < topo.upper)
        for m in topo.metrics:
            assert m.kind in KIND_RANK


# ---- FoM

def _spec(weights, directions=None, w0=1.0):
    names = ("obj",) + tuple(f"c{i}" for i in range(len(weights)))
    directions = directions or [">="] * len(weights)
    cons = tuple(Constraint(f"c{i}", d, 1.0, w) for i, (w, d) in enumerate(zip(weights, directions)))
    return FoMSpec(names, "obj", objective_weight=w0, constraints=cons)


def test_fom_all_satisfied():
    spec = _spec([1.0, 1.0])
    # f_i = (1 - y) / 1 <= 0 when y >= 1
    assert fom(spec, [2.0, 1.5, 3.0]) == 2.0


def test_fom_saturation():
    spec = _spec([50.0])
    # y = 0 gives f = 1, w f = 50
    assert fom(spec, [0.0, 0.0]) == 1.0


def test_fom_worked_example():
    assert fom_from_terms(0.5, -1.0, [0.3, -0.2, 2.5]) == pytest.approx(0.8, abs=1e-15)
    spec = _spec([1.0, 1.0, 1.0], w0=0.5)
    # obj f0 = -1; constraint values chosen so w f = 0.3, -0.2, 2.5
    perf = [-1.0, 0.7, 1.2, -1.5]
    assert fom(spec, perf) == pytest.approx(0.8, abs=1e-12)


def test_constraints_met_cases():
    empty = FoMSpec(("a",), "a")
    assert constraints_met(empty, [3.0])
    at = _spec([1.0])
    assert constraints_met(at, [0.0, 1.0])          # exactly at the threshold
    assert not constraints_met(at, [0.0, 0.999])
    le = _spec([1.0], ["<="])
    assert constraints_met(le, [0.0, 1.0]) and not constraints_met(le, [0.0, 1.01])


def test_constraint_weight_must_be_positive():
    with pytest.raises(ValueError):
        Constraint("a", ">=", 1.0, 0.0)
    with pytest.raises(ValueError):
        Constraint("a", "==", 1.0)
    with pytest.raises(KeyError):
        FoMSpec(("a",), "b")


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.lists(st.sampled_from([">=", "<="]), min_size=3, max_size=3),
       st.lists(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), min_size=3, max_size=3))
def test_constraints_met_brute_force(perf, dirs, thr):
    cons = tuple(Constraint(f"c{i}", d, t, 2.0) for i, (d, t) in enumerate(zip(dirs, thr)))
    spec = FoMSpec(("obj", "c0", "c1", "c2"), "obj", constraints=cons)
    expect = all((perf[i + 1] >= t) if d == ">=" else (perf[i + 1] <= t)
                 for i, (d, t) in enumerate(zip(dirs, thr)))
    assert constraints_met(spec, perf) == expect
    total = fom(spec, perf) - spec.objective_term(perf)
    assert -1e-12 <= total <= len(cons) + 1e-12


@given(st.lists(st.floats(1.0, 5.0), min_size=2, max_size=2),
       st.lists(st.floats(1.0, 5.0), min_size=2, max_size=2))
def test_fom_order_among_feasible(a, b):
    spec = _spec([3.0], w0=0.7)
    pa, pb = [a[0], a[1]], [b[0], b[1]]
    fa, fb = fom(spec, pa), fom(spec, pb)
    oa, ob = 0.7 * spec.objective_term(pa), 0.7 * spec.objective_term(pb)
    assert (fa < fb) == (oa < ob)


def test_fom_batch_matches_rows(rng):
    spec = FoMSpec.for_topology("ota2_nmos", "i_q", constraints=(
        Constraint("dc_gain", ">=", 60.0, 10.0), Constraint("phase_margin", ">=", 60.0, 10.0)))
    Y = evaluate_oracle("ota2_nmos", "synth45", sample_designs("ota2_nmos", 10, seed=1))
    batch = fom(spec, Y)
    assert np.array_equal(batch, [fom(spec, y) for y in Y])
