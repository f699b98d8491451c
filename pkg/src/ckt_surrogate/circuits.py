"""Closed-form behavioral models standing in for transistor-level simulation.

Six benchmark topologies are modelled with first-order square-law device
equations (``gm = sqrt(2 k' (W/L) I_D)``, ``r_o = 1 / (lambda I_D)``), pole
and zero estimates for the small-signal response, and RC / slewing delay
estimates for the switched circuits.  Three synthetic technology profiles
supply the device constants.

Every model is vectorised: ``evaluate_oracle`` accepts a single design of
shape (N,) or a batch of shape (B, N).

Parameter units: W/L ratios are dimensionless, ``cc`` is in pF, ``ibias``
in uA, ``rf`` / ``r_bias`` in kOhm, ``c_load`` / ``cf`` in fF.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * math.pi
KIND_RANK = {"DC": 0, "AC": 1, "transient": 2}


class OutOfBoundsError(ValueError):
    pass


# ----------------------------------------------------------- technology


@dataclass(frozen=True)
class Device:
    kprime: float  # A/V^2
    vth: float     # V
    lam: float     # 1/V


@dataclass(frozen=True)
class TechnologyProfile:
    name: str
    nmos: Device
    pmos: Device
    vdd: float
    cpar: float  # F per unit W/L

    def __post_init__(self):
        vals = [self.vdd, self.cpar]
        for dev in (self.nmos, self.pmos):
            vals += [dev.kprime, dev.vth, dev.lam]
            if self.vdd <= dev.vth:
                raise ValueError(f"{self.name}: Vdd must exceed Vth")
        if min(vals) <= 0:
            raise ValueError(f"{self.name}: technology constants must be positive")

    def scaled(self, name=None, **kw) -> "TechnologyProfile":
        """Copy with nmos/pmos k' multiplied, e.g. ``scaled(kprime=1.1)``."""
        s = kw.get("kprime", 1.0)
        return TechnologyProfile(
            name or self.name,
            Device(self.nmos.kprime * s, self.nmos.vth, self.nmos.lam),
            Device(self.pmos.kprime * s, self.pmos.vth, self.pmos.lam),
            self.vdd, self.cpar)


TECHNOLOGIES = {
    "synth45": TechnologyProfile("synth45", Device(280e-6, 0.35, 0.30),
                                 Device(110e-6, 0.35, 0.35), vdd=1.1, cpar=0.6e-15),
    "synth130": TechnologyProfile("synth130", Device(220e-6, 0.40, 0.15),
                                  Device(80e-6, 0.42, 0.18), vdd=1.5, cpar=1.5e-15),
    "synth180": TechnologyProfile("synth180", Device(170e-6, 0.45, 0.09),
                                  Device(60e-6, 0.47, 0.11), vdd=1.8, cpar=2.2e-15),
}


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class ParamSpec:
    name: str
    unit: str
    lower: float
    upper: float
    step: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)) or self.lower >= self.upper:
            raise ValueError(f"bad bounds for {self.name}")
        n = (self.upper - self.lower) / self.step
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"grid step of {self.name} does not divide its range")

    @property
    def midpoint(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def span(self):
        return self.upper - self.lower


@dataclass(frozen=True)
class MetricSpec:
    name: str
    unit: str
    kind: str               # "DC" | "AC" | "transient"
    log: bool = False       # log10 before standardisation
    positive: bool = False  # must be > 0
    depends_on: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KIND_RANK:
            raise ValueError(f"unknown metric class {self.kind!r}")


@dataclass(frozen=True)
class CircuitTopology:
    name: str
    description: str
    params: tuple[ParamSpec, ...]
    metrics: tuple[MetricSpec, ...]
    model: Callable = field(repr=False, compare=False)

    def __post_init__(self):
        names = [m.name for m in self.metrics]
        if len(set(names)) != len(names):
            raise ValueError("duplicate metric names")

    @property
    def n_params(self):
        return len(self.params)

    @property
    def n_metrics(self):
        return len(self.metrics)

    @property
    def param_names(self):
        return [p.name for p in self.params]

    @property
    def metric_names(self):
        return [m.name for m in self.metrics]

    @property
    def lower(self):
        return np.array([p.lower for p in self.params])

    @property
    def upper(self):
        return np.array([p.upper for p in self.params])

    def metric_index(self, name: str) -> int:
        return self.metric_names.index(name)


# ----------------------------------------------------------------- models


def _cols(x, names):
    return {n: x[..., i] for i, n in enumerate(names)}


def _pm(fc, poles, zeros=()):
    ph = sum(np.degrees(np.arctan(fc / p)) for p in poles)
    ph = ph - sum(np.degrees(np.arctan(fc / z)) for z in zeros)
    return ph


def _two_pole_crossover(a0, pa, pb):
    """Frequency where |a0 / ((1 + jf/pa)(1 + jf/pb))| = 1."""
    # (1 + u/pa^2)(1 + u/pb^2) = a0^2 with u = f^2
    qa = 1.0 / (pa * pb) ** 2
    qb = 1.0 / pa**2 + 1.0 / pb**2
    qc = 1.0 - a0**2
    u = (-qb + np.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)
    return np.sqrt(u)


def _ota2(x, tech, input_pmos):
    p = _cols(x, ["wl_in", "wl_load", "wl_tail", "wl_cs", "wl_sink", "wl_bias", "cc", "ibias"])
    din, dcs = (tech.pmos, tech.nmos) if input_pmos else (tech.nmos, tech.pmos)
    lam = tech.nmos.lam + tech.pmos.lam
    ib = p["ibias"] * 1e-6
    cc = p["cc"] * 1e-12
    i_tail = ib * p["wl_tail"] / p["wl_bias"]
    i_2 = ib * p["wl_sink"] / p["wl_bias"]
    gm1 = np.sqrt(din.kprime * p["wl_in"] * i_tail)     # each side carries i_tail / 2
    gm6 = np.sqrt(2.0 * dcs.kprime * p["wl_cs"] * i_2)
    a1 = gm1 / (lam * i_tail / 2.0)
    a2 = gm6 / (lam * i_2)
    c_load = 2e-12 + tech.cpar * (p["wl_cs"] + p["wl_sink"])
    c_first = tech.cpar * (p["wl_in"] + p["wl_load"]) + 5e-15
    ugbw = gm1 / (TWO_PI * cc)
    p2 = gm6 / (TWO_PI * c_load)
    z = gm6 / (TWO_PI * c_first)
    pm = 90.0 - np.degrees(np.arctan(ugbw / p2)) - np.degrees(np.arctan(ugbw / z))
    iq = (ib + i_tail + i_2) * 1e3
    return np.stack([iq, 20 * np.log10(a1 * a2), ugbw * 1e-6, pm], axis=-1)


def _ota2_nmos(x, tech):
    return _ota2(x, tech, input_pmos=False)


def _ota2_pmos(x, tech):
    return _ota2(x, tech, input_pmos=True)


def _tia2(x, tech):
    p = _cols(x, ["wl1", "wl2", "wl3", "wl4", "rf", "ibias"])
    n = tech.nmos
    lam = tech.nmos.lam + tech.pmos.lam
    ib = p["ibias"] * 1e-6
    rf = p["rf"] * 1e3
    i1 = ib
    i2 = ib * p["wl4"] / p["wl2"]
    gm1 = np.sqrt(2 * n.kprime * p["wl1"] * i1)
    gm2 = np.sqrt(2 * n.kprime * p["wl3"] * i2)
    # second stage: follower loaded by rf
    a = (gm1 / (lam * i1)) * (gm2 * rf / (1.0 + gm2 * rf + lam * i2 * rf))
    zt = rf * a / (1.0 + a)
    c_in = 0.5e-12 + tech.cpar * p["wl1"]
    c_out = 1e-12 + tech.cpar * (p["wl3"] + p["wl4"])
    p_in = 1.0 / (TWO_PI * rf * c_in)
    p_out = gm2 / (TWO_PI * c_out)
    fc = _two_pole_crossover(a, p_in, p_out)
    pm = 180.0 - _pm(fc, (p_in, p_out))
    iq = (ib + i1 + i2) * 1e3
    return np.stack([iq, 20 * np.log10(zt), fc * 1e-6, pm], axis=-1)


def _tia3(x, tech):
    p = _cols(x, ["wl1", "wl2", "wl3", "wl4", "wl5", "wl6", "rf", "ibias", "cf"])
    n = tech.nmos
    lam = tech.nmos.lam + tech.pmos.lam
    ib = p["ibias"] * 1e-6
    rf = p["rf"] * 1e3
    cf = p["cf"] * 1e-15
    i1 = ib
    i2 = ib * p["wl4"] / p["wl2"]
    i3 = ib * p["wl6"] / p["wl2"]
    gm1 = np.sqrt(2 * n.kprime * p["wl1"] * i1)
    gm2 = np.sqrt(2 * n.kprime * p["wl3"] * i2)
    gm3 = np.sqrt(2 * n.kprime * p["wl5"] * i3)
    # third stage: follower loaded by rf
    a = (gm1 / (lam * i1)) * (gm2 / (lam * i2)) * (gm3 * rf / (1.0 + gm3 * rf))
    zt = rf * a / (1.0 + a)
    c_in = 0.5e-12 + tech.cpar * p["wl1"]
    c_mid = 50e-15 + tech.cpar * (p["wl3"] + p["wl4"] + p["wl5"])
    c_out = 1e-12 + tech.cpar * (p["wl5"] + p["wl6"])
    p_in = 1.0 / (TWO_PI * rf * c_in)
    p_out = gm3 / (TWO_PI * c_out)
    p_mid = gm2 / (TWO_PI * c_mid)
    z_f = 1.0 / (TWO_PI * rf * cf)
    fc = _two_pole_crossover(a, p_in, p_out)
    pm = 180.0 - _pm(fc, (p_in, p_out, p_mid), (z_f,))
    iq = (ib + i1 + i2 + i3) * 1e3
    return np.stack([iq, 20 * np.log10(zt), fc * 1e-6, pm], axis=-1)


COMPARATOR_VIN = 5e-3
COMPARATOR_WL_REF = 5.0


def _comparator(x, tech):
    p = _cols(x, ["wl_in", "wl_tail", "wl_load", "wl_latch", "ibias", "c_load"])
    ib = p["ibias"] * 1e-6
    cl = p["c_load"] * 1e-15
    i_tail = ib * p["wl_tail"] / COMPARATOR_WL_REF
    i_lat = i_tail * p["wl_latch"] / (p["wl_load"] + p["wl_latch"])
    power = tech.vdd * (ib + i_tail + i_lat)
    gm_in = np.sqrt(tech.nmos.kprime * p["wl_in"] * i_tail)
    gm_ld = np.sqrt(tech.pmos.kprime * p["wl_load"] * i_tail)
    gain = gm_in / gm_ld
    half = tech.vdd / 2.0
    c_pre = 5e-15 + tech.cpar * (p["wl_in"] + p["wl_load"] + p["wl_latch"])
    t_pre = c_pre * half / i_tail
    gm_lat = np.sqrt(tech.nmos.kprime * p["wl_latch"] * (i_lat + i_tail))
    c_lat = cl + 2 * tech.cpar * p["wl_latch"]
    t_lat = (c_lat / gm_lat) * np.log(half / (gain * COMPARATOR_VIN))
    t_out = cl * half / (i_lat + i_tail)
    return np.stack([power, t_pre + t_lat + t_out], axis=-1)


LEVEL_SHIFTER_LOW_RAIL = 0.6  # input swing as a fraction of Vdd


def _level_shifter(x, tech):
    p = _cols(x, ["wl_n", "wl_p", "wl_out", "c_load", "r_bias"])
    n, pm = tech.nmos, tech.pmos
    vdd = tech.vdd
    cl = p["c_load"] * 1e-15
    rb = p["r_bias"] * 1e3
    r_n = 1.0 / (n.kprime * p["wl_n"] * (LEVEL_SHIFTER_LOW_RAIL * vdd - n.vth))
    r_p = 1.0 / (pm.kprime * p["wl_p"] * (vdd - pm.vth))
    r_out = 0.5 / (n.kprime * p["wl_out"] * (vdd - n.vth)) \
        + 0.5 / (pm.kprime * 2 * p["wl_out"] * (vdd - pm.vth))
    c_int = 2e-15 + tech.cpar * (p["wl_n"] + p["wl_p"] + p["wl_out"])
    power = vdd**2 / (rb + r_p)
    ratio = rb / (rb + r_p)
    # contention with the opposing device slows each edge by a bounded factor
    t_fall = 0.69 * c_int * r_n * (1.0 + r_n / (r_n + r_p))
    t_rise = 0.69 * c_int * r_p * (1.0 + r_p / (r_p + rb))
    t_out = 0.69 * r_out * cl
    avg = t_out + 0.5 * (t_rise + t_fall)
    return np.stack([power, ratio, avg, t_rise - t_fall], axis=-1)


# --------------------------------------------------------------- registry


def _wl(name, lo, hi, step=0.5):
    return ParamSpec(name, "W/L", lo, hi, step)


_IB = ParamSpec("ibias", "uA", 5.0, 50.0, 1.0)

_AMP_METRICS = (
    MetricSpec("i_q", "mA", "DC", log=True, positive=True),
    MetricSpec("dc_gain", "dB", "DC"),
    MetricSpec("ugbw", "MHz", "AC", log=True, positive=True),
    MetricSpec("phase_margin", "deg", "AC", depends_on=("ugbw",)),
)

_OTA_PARAMS = (
    _wl("wl_in", 2, 40), _wl("wl_load", 1, 20), _wl("wl_tail", 2, 40),
    _wl("wl_cs", 4, 80, 1.0), _wl("wl_sink", 2, 40), _wl("wl_bias", 2, 20),
    ParamSpec("cc", "pF", 0.3, 4.0, 0.1), _IB,
)

TOPOLOGIES: dict[str, CircuitTopology] = {}


def register(topology: CircuitTopology):
    TOPOLOGIES[topology.name] = topology
    return topology


register(CircuitTopology(
    "ota2_nmos", "two-stage Miller-compensated op-amp, NMOS input pair",
    _OTA_PARAMS, _AMP_METRICS, _ota2_nmos))
register(CircuitTopology(
    "ota2_pmos", "two-stage Miller-compensated op-amp, PMOS input pair",
    _OTA_PARAMS, _AMP_METRICS, _ota2_pmos))
register(CircuitTopology(
    "tia2", "two-stage transimpedance amplifier",
    (_wl("wl1", 2, 40), _wl("wl2", 1, 20), _wl("wl3", 2, 40), _wl("wl4", 1, 20),
     ParamSpec("rf", "kOhm", 1.0, 20.0, 0.5), _IB),
    _AMP_METRICS, _tia2))
register(CircuitTopology(
    "tia3", "three-stage transimpedance amplifier",
    (_wl("wl1", 2, 40), _wl("wl2", 1, 20), _wl("wl3", 2, 40), _wl("wl4", 1, 20),
     _wl("wl5", 2, 40), _wl("wl6", 1, 20), ParamSpec("rf", "kOhm", 1.0, 20.0, 0.5),
     _IB, ParamSpec("cf", "fF", 5.0, 200.0, 5.0)),
    _AMP_METRICS, _tia3))
register(CircuitTopology(
    "comparator", "preamplifier plus latch comparator",
    (_wl("wl_in", 2, 40), _wl("wl_tail", 2, 40), _wl("wl_load", 1, 20),
     _wl("wl_latch", 1, 20), _IB, ParamSpec("c_load", "fF", 10.0, 200.0, 5.0)),
    (MetricSpec("dc_power", "W", "DC", log=True, positive=True),
     MetricSpec("avg_delay", "s", "transient", log=True, positive=True)),
    _comparator))
register(CircuitTopology(
    "level_shifter", "cross-coupled low-to-high level shifter",
    (_wl("wl_n", 2, 20), _wl("wl_p", 2, 20), _wl("wl_out", 2, 20),
     ParamSpec("c_load", "fF", 10.0, 200.0, 5.0),
     ParamSpec("r_bias", "kOhm", 2.0, 40.0, 0.5)),
    (MetricSpec("dc_power", "W", "DC", log=True, positive=True),
     MetricSpec("ratio", "", "DC", positive=True),
     MetricSpec("avg_delay", "s", "transient", log=True, positive=True),
     # signed rise-minus-fall delay
     MetricSpec("delay_balance", "s", "transient", depends_on=("avg_delay",))),
    _level_shifter))


def get_topology(name) -> CircuitTopology:
    if isinstance(name, CircuitTopology):
        return name
    try:
        return TOPOLOGIES[name]
    except KeyError:
        raise KeyError(f"unknown topology {name!r}; known: {sorted(TOPOLOGIES)}") from None


def get_technology(name) -> TechnologyProfile:
    if isinstance(name, TechnologyProfile):
        return name
    try:
        return TECHNOLOGIES[name]
    except KeyError:
        raise KeyError(f"unknown technology {name!r}; known: {sorted(TECHNOLOGIES)}") from None


def in_bounds(topology, design, rtol=1e-12):
    topo = get_topology(topology)
    x = np.asarray(design, dtype=float)
    slack = rtol * np.maximum(np.abs(topo.lower), np.abs(topo.upper))
    return np.all((x >= topo.lower - slack) & (x <= topo.upper + slack), axis=-1)


def evaluate_oracle(topology, tech, design) -> np.ndarray:
    """Ground-truth metrics for one design (N,) or a batch (B, N).

    Returned columns follow ``topology.metrics``.  Pure and deterministic.
    """
    topo = get_topology(topology)
    tp = get_technology(tech)
    x = np.asarray(design, dtype=float)
    if x.shape[-1] != topo.n_params:
        raise ValueError(f"{topo.name} expects {topo.n_params} parameters, got {x.shape[-1]}")
    if not np.all(in_bounds(topo, x)):
        raise OutOfBoundsError(f"design outside the bounds of {topo.name}")
    y = topo.model(x, tp)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(f"{topo.name} produced non-finite metrics")
    return y


# -------------------------------------------------------------------- FoM


@dataclass(frozen=True)
class Constraint:
    metric: str
    direction: str   # ">=" or "<="
    threshold: float
    weight: float = 1.0

    def __post_init__(self):
        if self.direction not in (">=", "<="):
            raise ValueError(f"bad constraint direction {self.direction!r}")
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValueError("constraint weights must be finite and positive")

    def value(self, y):
        """Normalised violation f_i; f_i <= 0 means satisfied."""
        scale = abs(self.threshold) if self.threshold != 0 else 1.0
        if self.direction == ">=":
            return (self.threshold - y) / scale
        return (y - self.threshold) / scale


@dataclass(frozen=True)
class FoMSpec:
    metrics: tuple[str, ...]        # metric names in PerformanceVector order
    objective: str
    objective_weight: float = 1.0
    objective_scale: float = 1.0
    minimize: bool = True
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.objective_weight):
            raise ValueError("objective weight must be finite")
        for name in [self.objective] + [c.metric for c in self.constraints]:
            if name not in self.metrics:
                raise KeyError(f"unknown metric {name!r}")

    @classmethod
    def for_topology(cls, topology, objective, constraints=(), **kw):
        topo = get_topology(topology)
        return cls(tuple(topo.metric_names), objective, constraints=tuple(constraints), **kw)

    def objective_term(self, perf):
        y = np.asarray(perf)[..., self.metrics.index(self.objective)]
        f0 = y / self.objective_scale
        return f0 if self.minimize else -f0

    def constraint_terms(self, perf):
        perf = np.asarray(perf)
        if not self.constraints:
            return np.zeros(perf.shape[:-1] + (0,))
        return np.stack([c.value(perf[..., self.metrics.index(c.metric)])
                         for c in self.constraints], axis=-1)

    @property
    def weights(self):
        return np.array([c.weight for c in self.constraints])


def fom_from_terms(w0, f0, weighted):
    """w0 * f0 + sum_i min(1, max(0, w_i f_i)) with ``weighted`` = w_i f_i."""
    weighted = np.asarray(weighted, dtype=float)
    return w0 * np.asarray(f0) + np.sum(np.minimum(1.0, np.maximum(0.0, weighted)), axis=-1)


def fom(spec: FoMSpec, perf) -> np.ndarray | float:
    """Figure of merit (lower is better) for one vector or a batch."""
    w = spec.weights
    val = fom_from_terms(spec.objective_weight, spec.objective_term(perf),
                         spec.constraint_terms(perf) * w)
    return float(val) if np.ndim(val) == 0 else val


def constraints_met(spec: FoMSpec, perf, margin: float = 0.0):
    """True iff every f_i <= -margin (f_i == 0 counts as met)."""
    f = spec.constraint_terms(perf)
    ok = np.all(f <= -margin, axis=-1)
    return bool(ok) if np.ndim(ok) == 0 else ok

