"""Strict TOML run configuration with stated defaults and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .circuits import Constraint, FoMSpec, get_topology
from .model import FCEnsembleConfig, InsightConfig
from .sizing import InsightMConfig, PPOConfig, SizingTask, default_task
from .train import TrainRunConfig

DEFAULTS = {
    "topology": {"name": "ota2_nmos"},
    "technology": {"name": "synth45"},
    "model": {
        "d_model": 76, "heads": 4, "layers": 3, "ff_mult": 4, "out_heads": 5,
        "init_std": 0.02, "ln_eps": 1e-5,
    },
    "training": {
        "seed": 0, "epochs": 100, "batch_size": 64, "lr": 1e-3, "lr_min": 0.0,
        "schedule_epochs": 0, "patience": 40, "val_fraction": 0.1, "bootstrap_heads": True,
        "n_samples": 2000, "train_size": 1500, "test_size": 500, "dataset_seed": 1,
        "fc_members": 7, "fc_hidden": [200, 200, 200, 200, 200], "fc_lr": 1e-3,
        "fc_epochs": 100,
    },
    "sizing": {
        "budget": 50, "baseline_budget": 20000, "grid_points": 11, "horizon": 12,
        "success_bonus": 10.0,
        "objective": "", "objective_weight": 0.1, "objective_scale": 1.0, "constraints": [],
        "beta": 0.0, "ppo_iterations": 30, "refresh_iterations": 10, "sampled_envs": 64,
        "margin": 0.02, "finetune_epochs": 30, "finetune_lr": 3e-4, "finetune_batch": 32,
        "pretrain_mix": 4, "finetune_on_failure": True, "fom_tolerance": 0.5,
        "seed_sims": 8,
        "ppo_hidden": [64, 64], "ppo_clip": 0.2, "ppo_gamma": 0.99, "ppo_lam": 0.95,
        "ppo_n_envs": 32, "ppo_epochs": 4, "ppo_minibatch": 128, "ppo_lr": 3e-3,
        "ppo_entropy": 0.01, "ppo_value_coef": 0.5,
    },
    "report": {
        "sweep_sizes": ["300:100", "600:200", "1500:500", "3000:1000"],
        "sweep_topologies": ["ota2_nmos"], "sweep_fc": True,
        "eval_mode": "rollout", "known_prefix_len": 0,
        "bench_batch": 1000, "bench_repeats": 50,
        "gradcheck_params": 4, "gradcheck_metrics": 3, "gradcheck_epsilon": 1e-5,
        "gradcheck_tolerance": 1e-4, "gradcheck_max_entries": 24, "gradcheck_batch": 3,
    },
}

CONSTRAINT_KEYS = {"metric", "direction", "threshold", "weight"}


class ConfigError(ValueError):
    pass


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where} must be a table")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = _check_type(where, base[k], v)
    return out


def _check_type(where, default, v):
    if isinstance(default, bool):
        ok = isinstance(v, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if ok and isinstance(default, int) and not isinstance(v, int):
            ok = float(v).is_integer()
            v = int(v) if ok else v
    elif isinstance(default, str):
        ok = isinstance(v, str)
    else:
        ok = isinstance(v, list)
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {v!r}")
    if where == "sizing.constraints":
        for c in v:
            if not isinstance(c, dict) or set(c) - CONSTRAINT_KEYS or \
                    not {"metric", "direction", "threshold"} <= set(c):
                raise ConfigError(f"bad constraint entry {c!r}")
    return v


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        raw = {}
        if path is not None:
            with open(path, "rb") as fh:
                try:
                    raw = tomllib.load(fh)
                except tomllib.TOMLDecodeError as e:
                    raise ConfigError(f"{path}: {e}") from e
        data = _merge(DEFAULTS, raw)
        if overrides:
            data = _merge(data, overrides)
        get_topology(data["topology"]["name"])
        return cls(data)

    @classmethod
    def from_text(cls, text) -> "RunConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(e)) from e
        return cls(_merge(DEFAULTS, raw))

    def __getitem__(self, k):
        return self.data[k]

    @property
    def seed(self) -> int:
        return int(self.data["training"]["seed"])

    @property
    def topology(self) -> str:
        return self.data["topology"]["name"]

    @property
    def technology(self) -> str:
        return self.data["technology"]["name"]

    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # ---- typed views

    def insight(self) -> InsightConfig:
        return InsightConfig(**self.data["model"])

    def train_run(self, epochs=None) -> TrainRunConfig:
        t = self.data["training"]
        return TrainRunConfig(
            epochs=t["epochs"] if epochs is None else epochs, batch_size=t["batch_size"],
            lr=t["lr"], lr_min=t["lr_min"], schedule_epochs=t["schedule_epochs"] or None,
            seed=t["seed"], patience=t["patience"] or None, val_fraction=t["val_fraction"],
            bootstrap_heads=t["bootstrap_heads"])

    def fc(self) -> FCEnsembleConfig:
        t = self.data["training"]
        return FCEnsembleConfig(tuple(t["fc_hidden"]), t["fc_members"], "relu", t["fc_lr"])

    def ppo(self) -> PPOConfig:
        s = self.data["sizing"]
        return PPOConfig(hidden=tuple(s["ppo_hidden"]), clip=s["ppo_clip"], gamma=s["ppo_gamma"],
                         lam=s["ppo_lam"], n_envs=s["ppo_n_envs"], epochs=s["ppo_epochs"],
                         minibatch=s["ppo_minibatch"], lr=s["ppo_lr"], entropy=s["ppo_entropy"],
                         value_coef=s["ppo_value_coef"], seed=self.seed)

    def insight_m(self) -> InsightMConfig:
        s = self.data["sizing"]
        keys = InsightMConfig.__dataclass_fields__
        return InsightMConfig(**{k: s[k] for k in keys})

    def task(self, budget=None) -> SizingTask:
        s = self.data["sizing"]
        kw = dict(grid_points=s["grid_points"], horizon=s["horizon"], seed=self.seed,
                  success_bonus=s["success_bonus"], budget=budget or s["budget"])
        if not s["objective"]:
            if s["constraints"]:
                raise ConfigError("sizing.constraints given without sizing.objective")
            return default_task(self.topology, self.technology, **kw)
        spec = FoMSpec.for_topology(
            self.topology, s["objective"], objective_weight=s["objective_weight"],
            objective_scale=s["objective_scale"],
            constraints=[Constraint(c["metric"], c["direction"], float(c["threshold"]),
                                    float(c.get("weight", 1.0))) for c in s["constraints"]])
        return SizingTask(self.topology, self.technology, spec, **kw)

    def meta_lines(self, seed=None):
        from . import __version__
        return [f"config_hash: {self.hash()}", f"seed: {self.seed if seed is None else seed}",
                f"tool_version: {__version__}"]


def write_default(path):
    """Dump the defaults as a commented TOML file."""
    lines = ["# ckt-surrogate run configuration (all keys optional; unknown keys rejected)"]
    for section, body in DEFAULTS.items():
        lines.append(f"\n[{section}]")
        for k, v in body.items():
            lines.append(f"{k} = {_toml_value(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
