"""Datasets of (design, metrics) pairs: sampling, labelling, normalisation, I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circuits import evaluate_oracle, get_technology, get_topology

FORMAT_TAG = "ckt-surrogate dataset v1"


def sample_designs(topology, n: int, seed=0) -> np.ndarray:
    """Gaussian designs centred on the box midpoint with sigma = range / 4.

    Draws falling outside the bounds are redrawn until every row is inside.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    topo = get_topology(topology)
    lo, hi = topo.lower, topo.upper
    mid, sigma = 0.5 * (lo + hi), 0.25 * (hi - lo)
    rng = np.random.default_rng(seed)
    out = rng.normal(mid, sigma, (n, topo.n_params))
    bad = (out < lo) | (out > hi)
    while bad.any():
        rows, cols = np.nonzero(bad)
        out[rows, cols] = rng.normal(mid[cols], sigma[cols])
        bad = (out < lo) | (out > hi)
    return out


@dataclass
class Dataset:
    topology: str
    technology: str
    X: np.ndarray
    Y: np.ndarray
    param_names: list[str]
    metric_names: list[str]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, len(self.param_names))
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1, len(self.metric_names))
        if len(self.X) != len(self.Y):
            raise ValueError("design and performance row counts differ")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return len(self.X)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.topology == other.topology and self.technology == other.technology
                and self.param_names == other.param_names
                and self.metric_names == other.metric_names
                and self.seed == other.seed and self.meta == other.meta
                and np.array_equal(self.X, other.X) and np.array_equal(self.Y, other.Y))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.topology, self.technology, self.X[idx], self.Y[idx],
                       list(self.param_names), list(self.metric_names), self.seed,
                       dict(self.meta))

    def with_metric_order(self, names) -> "Dataset":
        cols = [self.metric_names.index(n) for n in names]
        return Dataset(self.topology, self.technology, self.X, self.Y[:, cols],
                       list(self.param_names), list(names), self.seed, dict(self.meta))

    @property
    def log_flags(self):
        topo = get_topology(self.topology)
        spec = {m.name: m for m in topo.metrics}
        return [spec[n].log for n in self.metric_names]

    # ---- serialisation

    def save(self, path):
        path = Path(path)
        n, m = len(self.param_names), len(self.metric_names)
        head = [
            f"# {FORMAT_TAG}",
            f"# topology: {json.dumps(self.topology)}",
            f"# technology: {json.dumps(self.technology)}",
            f"# seed: {json.dumps(self.seed)}",
            f"# parameters: {json.dumps(self.param_names)}",
            f"# metrics: {json.dumps(self.metric_names)}",
            f"# meta: {json.dumps(self.meta, sort_keys=True)}",
            ",".join([f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(m)]),
        ]
        rows = np.hstack([self.X, self.Y])
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(head) + "\n")
            for r in rows:
                fh.write(",".join(format(v, ".17g") for v in r) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        header, rows = {}, []
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
            if first != f"# {FORMAT_TAG}":
                raise ValueError(f"{path}: not a dataset file")
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition(":")
                    header[key.strip()] = json.loads(val)
                elif line.startswith("x_"):
                    continue
                elif line:
                    rows.append([float(v) for v in line.split(",")])
        pnames, mnames = header["parameters"], header["metrics"]
        arr = np.array(rows, dtype=float).reshape(-1, len(pnames) + len(mnames))
        return cls(header["topology"], header["technology"], arr[:, :len(pnames)],
                   arr[:, len(pnames):], pnames, mnames, header["seed"], header.get("meta", {}))


def build_dataset(topology, tech, n: int, seed=0) -> Dataset:
    topo = get_topology(topology)
    tp = get_technology(tech)
    X = sample_designs(topo, n, seed)
    Y = evaluate_oracle(topo, tp, X) if n else np.zeros((0, topo.n_metrics))
    return Dataset(topo.name, tp.name, X, Y, topo.param_names, topo.metric_names, seed)


def split(dataset: Dataset, train=None, test=None, seed=0, train_fraction=None):
    """Seeded disjoint split by explicit counts or by ``train_fraction``."""
    n = len(dataset)
    if train_fraction is not None:
        train = int(round(train_fraction * n))
        test = n - train if test is None else test
    if train is None:
        raise ValueError("give train/test counts or train_fraction")
    test = n - train if test is None else test
    if train < 0 or test < 0 or train + test > n:
        raise ValueError(f"cannot split {n} rows into {train} + {test}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:train])), dataset.subset(np.sort(perm[train:train + test]))


@dataclass
class NormStats:
    """Per-column z-scoring; flagged metric columns are log10'd first."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    log_flags: np.ndarray

    @classmethod
    def fit(cls, X, Y, log_flags) -> "NormStats":
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        flags = np.asarray(log_flags, dtype=bool)
        if len(X) < 2:
            raise ValueError("need at least two rows to fit normalisation")
        Yt = _log_forward(Y, flags)
        xs, ys = X.std(axis=0), Yt.std(axis=0)
        for kind, s in (("parameter", xs), ("metric", ys)):
            if np.any(s <= 1e-12):
                raise ValueError(f"constant {kind} column {int(np.argmin(s))}; cannot normalise")
        return cls(X.mean(axis=0), xs, Yt.mean(axis=0), ys, flags)

    def normalize_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def denormalize_x(self, Z):
        return Z * self.x_std + self.x_mean

    def normalize_y(self, Y):
        return (_log_forward(np.asarray(Y, dtype=float), self.log_flags) - self.y_mean) / self.y_std

    def denormalize_y(self, Z):
        Yt = np.asarray(Z) * self.y_std + self.y_mean
        return np.where(self.log_flags, 10.0 ** Yt, Yt)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("x_mean", "x_std", "y_mean", "y_std", "log_flags")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=float) for k in ("x_mean", "x_std", "y_mean", "y_std")),
                   np.array(d["log_flags"], dtype=bool))

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in
                   ("x_mean", "x_std", "y_mean", "y_std", "log_flags"))


def _log_forward(Y, flags):
    if not flags.any():
        return Y.copy()
    if np.any(Y[..., flags] <= 0):
        raise ValueError("non-positive value in a log-transformed metric")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(flags, np.log10(np.where(flags, Y, 1.0)), Y)


def fit_norm(dataset: Dataset) -> NormStats:
    return NormStats.fit(dataset.X, dataset.Y, dataset.log_flags)


def normalize(stats: NormStats, X=None, Y=None):
    out = []
    if X is not None:
        out.append(stats.normalize_x(X))
    if Y is not None:
        out.append(stats.normalize_y(Y))
    return out[0] if len(out) == 1 else tuple(out)


def denormalize(stats: NormStats, Zy):
    return stats.denormalize_y(Zy)

