"""Training loops, evaluation metrics, metric ordering and transfer fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .circuits import KIND_RANK, CircuitTopology, MetricSpec, get_topology
from .data import Dataset, NormStats, split
from .model import (
    FCEnsemble, FCEnsembleCheckpoint, FCEnsembleConfig, InsightConfig, InsightModel,
    SequenceLayout, SurrogateCheckpoint,
)
from .numerics import Adam, NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class TrainRunConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    lr_min: float = 0.0
    schedule_epochs: int | None = None   # cosine horizon; defaults to ``epochs``
    seed: int = 0
    patience: int | None = 40
    val_fraction: float = 0.1
    bootstrap_heads: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("validation fraction must lie in [0, 0.5]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


# ------------------------------------------------------------ metric order


def order_metrics(schema) -> list[MetricSpec]:
    """Class-rank sort (DC < AC < transient), then sources before dependents.

    Accepts a topology (or its name) or a sequence of MetricSpec.  Among the
    metrics whose sources are already placed, the earliest in the stable
    class-rank order goes next, so the result only departs from the plain
    sort where a dependency forces it.
    """
    if isinstance(schema, (str, CircuitTopology)):
        metrics = list(get_topology(schema).metrics)
    else:
        metrics = list(schema)
    names = {m.name for m in metrics}
    for m in metrics:
        for dep in m.depends_on:
            if dep not in names:
                raise ValueError(f"{m.name} depends on unknown metric {dep!r}")
    pending = sorted(metrics, key=lambda m: KIND_RANK[m.kind])
    placed, out = set(), []
    while pending:
        for i, m in enumerate(pending):
            if all(d in placed for d in m.depends_on):
                out.append(pending.pop(i))
                placed.add(m.name)
                break
        else:
            raise ValueError("dependency cycle among metrics: "
                             + ", ".join(m.name for m in pending))
    return out


# ------------------------------------------------------------ metric math


def mse_per_metric(y, yhat):
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    return np.mean((yhat - y) ** 2, axis=0)


def r2_per_metric(y, yhat):
    """1 - SS_res / SS_tot per column; NaN where the column has zero variance."""
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    y = y.reshape(len(y), -1)
    yhat = yhat.reshape(len(yhat), -1)
    ss_res = np.sum((yhat - y) ** 2, axis=0)
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    out = np.full(y.shape[1], np.nan)
    ok = (ss_tot > 0) & (np.ptp(y, axis=0) > 0) if len(y) else ss_tot > 0
    out[ok] = 1.0 - ss_res[ok] / ss_tot[ok]
    return out


REPORT_NOTE = "r2/mse in normalised space; aggregate = unweighted mean over included metrics"


@dataclass
class EvalReport:
    metric_names: list[str]
    r2: list[float]
    mse: list[float]
    mae: list[float]             # physical units
    included: list[bool]
    n_train: int
    n_test: int
    mode: str
    known_prefix_len: int
    wall_clock: float
    model_kind: str = "insight"

    @property
    def aggregate_r2(self) -> float:
        vals = [r for r, inc in zip(self.r2, self.included) if inc]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def aggregate_mse(self) -> float:
        vals = [m for m, inc in zip(self.mse, self.included) if inc]
        return float(np.mean(vals)) if vals else math.nan

    def csv_header(self):
        cols = ["model", "mode", "known_prefix_len", "n_train", "n_test",
                "aggregate_r2", "aggregate_mse"]
        for n in self.metric_names:
            cols += [f"r2_{n}", f"mse_{n}", f"mae_{n}"]
        return cols + ["wall_clock_s"]

    def csv_row(self):
        row = [self.model_kind, self.mode, self.known_prefix_len, self.n_train, self.n_test,
               _fmt(self.aggregate_r2), _fmt(self.aggregate_mse)]
        for r, m, a, inc in zip(self.r2, self.mse, self.mae, self.included):
            row += [_fmt(r) if inc else "", _fmt(m) if inc else "", _fmt(a)]
        return row + [f"{self.wall_clock:.3f}"]

    def to_csv(self, meta_lines=()):
        buf = io.StringIO()
        for line in list(meta_lines) + [REPORT_NOTE]:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()

    def table(self):
        lines = [f"{'metric':<16s}{'R2':>10s}{'MSE':>12s}{'MAE (phys)':>14s}"]
        for n, r, m, a, inc in zip(self.metric_names, self.r2, self.mse, self.mae, self.included):
            flag = "" if inc else "  (excluded)"
            lines.append(f"{n:<16s}{r:>10.4f}{m:>12.4e}{a:>14.4e}{flag}")
        lines.append(f"{'aggregate':<16s}{self.aggregate_r2:>10.4f}{self.aggregate_mse:>12.4e}")
        return "\n".join(lines)


def _fmt(v):
    return "nan" if not np.isfinite(v) else f"{v:.6g}"


# ----------------------------------------------------------- core loop


def _bootstrap_weights(rng, n, K, enabled):
    if not enabled or K < 2:
        return np.ones((n, K))
    return rng.poisson(1.0, (n, K)).astype(float)


def _carve_validation(dataset: Dataset, rcfg: TrainRunConfig):
    n_val = int(math.floor(rcfg.val_fraction * len(dataset)))
    if n_val < 1 or len(dataset) - n_val < 2:
        return dataset, None
    tr, va = split(dataset, train=len(dataset) - n_val, test=n_val, seed=rcfg.seed + 7919)
    return tr, va


def fit_model(model: InsightModel, xn, yn, rcfg: TrainRunConfig, xval=None, yval=None,
              extra_weights=None):
    """Minibatch Adam on the teacher-forced loss.  Restores the best-validation weights.

    Returns the per-epoch history: dicts with epoch, train_loss, val_loss, lr.
    """
    rng = np.random.default_rng(rcfg.seed)
    n = len(xn)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    K = model.config.out_heads
    hw = _bootstrap_weights(rng, n, K, rcfg.bootstrap_heads)
    if extra_weights is not None:
        hw = hw * np.asarray(extra_weights, dtype=float)[:, None]
    steps_per_epoch = math.ceil(n / rcfg.batch_size)
    horizon = (rcfg.schedule_epochs or rcfg.epochs) * steps_per_epoch
    opt = Adam(model.parameters(), lr=rcfg.lr, total_steps=horizon, lr_min=rcfg.lr_min)
    history = []
    best, best_loss, since = None, math.inf, 0
    for epoch in range(rcfg.epochs):
        perm = rng.permutation(n)
        total, lr = 0.0, opt.lr
        for b in range(steps_per_epoch):
            idx = perm[b * rcfg.batch_size:(b + 1) * rcfg.batch_size]
            model.zero_grad()
            loss, _ = model.loss(xn[idx], yn[idx], hw[idx], backward=True)
            total += loss * len(idx)
            lr = opt.step()
        train_loss = total / n
        if xval is not None and len(xval):
            val_loss, _ = model.loss(xval, yval)
        else:
            val_loss = math.nan
        history.append({"epoch": epoch + 1, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": lr})
        score = val_loss if not math.isnan(val_loss) else train_loss
        if score < best_loss:
            best_loss, since = score, 0
            best = {k: v.copy() for k, v in model.weights().items()}
        else:
            since += 1
            if rcfg.patience is not None and since >= rcfg.patience:
                log.info("early stop at epoch %d", epoch + 1)
                break
    if best is not None:
        model.load_weights(best)
    return history


def train_insight(dataset: Dataset, icfg: InsightConfig | None = None,
                  rcfg: TrainRunConfig | None = None, metric_order=None,
                  init: SurrogateCheckpoint | None = None):
    """Teacher-forced training.  Returns (checkpoint, loss history).

    Metrics are reordered to ``metric_order`` (default: ``order_metrics`` of
    the topology).  Normalisation is fit on the training rows only, after the
    validation carve-out.
    """
    icfg = icfg or InsightConfig()
    rcfg = rcfg or TrainRunConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if metric_order is None:
        metric_order = [m.name for m in order_metrics(dataset.topology)]
    ds = dataset.with_metric_order(list(metric_order))
    tr, va = _carve_validation(ds, rcfg)
    norm = NormStats.fit(tr.X, tr.Y, tr.log_flags)
    layout = SequenceLayout(list(ds.param_names), list(ds.metric_names))
    if init is None:
        model = InsightModel(icfg, layout, seed=rcfg.seed)
    else:
        if init.layout != layout:
            raise ValueError("source checkpoint layout does not match the dataset")
        model = init.model.copy()
    xv = yv = None
    if va is not None:
        xv, yv = norm.normalize_x(va.X), norm.normalize_y(va.Y)
    t0 = time.perf_counter()
    history = fit_model(model, norm.normalize_x(tr.X), norm.normalize_y(tr.Y), rcfg, xv, yv)
    meta = {
        "seed": rcfg.seed,
        "epochs_run": len(history),
        "train_config": asdict(rcfg),
        "n_train": len(tr),
        "n_val": 0 if va is None else len(va),
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "best_val_loss": _best_val(history),
        "dataset_seed": dataset.seed,
        "train_seconds": round(time.perf_counter() - t0, 3),
    }
    if init is not None:
        meta["warm_start_from"] = init.technology
    ckpt = SurrogateCheckpoint(model, norm, ds.topology, ds.technology, meta)
    return ckpt, history


def _best_val(history):
    vals = [h["val_loss"] for h in history if not math.isnan(h["val_loss"])]
    return min(vals) if vals else None


def history_csv(history, meta_lines=()):
    buf = io.StringIO()
    for line in meta_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for h in history:
        w.writerow([h["epoch"], f"{h['train_loss']:.17g}", f"{h['val_loss']:.17g}",
                    f"{h['lr']:.17g}"])
    return buf.getvalue()


def transfer_finetune(source: SurrogateCheckpoint, dataset: Dataset,
                      rcfg: TrainRunConfig | None = None):
    """Warm-start every weight from ``source``, refit normalisation on the target data."""
    rcfg = rcfg or TrainRunConfig()
    if dataset.topology != source.topology or \
            sorted(dataset.metric_names) != sorted(source.layout.metric_names) or \
            list(dataset.param_names) != list(source.layout.param_names):
        raise ValueError("target dataset layout does not match the source checkpoint")
    if dataset.technology == source.technology:
        log.warning("transfer target uses the source technology %s", source.technology)
    ckpt, history = train_insight(dataset, source.config, rcfg,
                                  metric_order=source.layout.metric_names, init=source)
    return ckpt, history


# ------------------------------------------------------------ FC ensemble


def train_fc_ensemble(dataset: Dataset, fcfg: FCEnsembleConfig | None = None,
                      rcfg: TrainRunConfig | None = None):
    """Joint M-output regression, every member with its own init and shuffle seed.

    Each member keeps the weights of its own best validation epoch.
    """
    fcfg = fcfg or FCEnsembleConfig()
    rcfg = rcfg or TrainRunConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    tr, va = _carve_validation(dataset, rcfg)
    norm = NormStats.fit(tr.X, tr.Y, tr.log_flags)
    xn, yn = norm.normalize_x(tr.X), norm.normalize_y(tr.Y)
    ens = FCEnsemble(fcfg, dataset.X.shape[1], dataset.Y.shape[1], seed=rcfg.seed)
    E, n = fcfg.members, len(xn)
    rngs = [np.random.default_rng([s, 1]) for s in ens.seeds]
    steps = math.ceil(n / rcfg.batch_size)
    horizon = (rcfg.schedule_epochs or rcfg.epochs) * steps
    opt = Adam(ens.parameters(), lr=fcfg.lr, total_steps=horizon, lr_min=rcfg.lr_min)
    xv = yv = None
    if va is not None:
        xv, yv = norm.normalize_x(va.X), norm.normalize_y(va.Y)
    best = {k: p.value.copy() for k, p in ens.params.items()}
    best_loss = np.full(E, np.inf)
    since = np.zeros(E, dtype=int)
    history = []
    for epoch in range(rcfg.epochs):
        perms = np.stack([r.permutation(n) for r in rngs])
        total = np.zeros(E)
        for b in range(steps):
            idx = perms[:, b * rcfg.batch_size:(b + 1) * rcfg.batch_size]
            xb, yb = xn[idx], yn[idx]           # (E, B, *)
            for p in ens.parameters():
                p.zero_grad()
            out = ens.net.forward(xb, keep_cache=True)
            err = out - yb
            B, M = idx.shape[1], yb.shape[-1]
            total += np.sum(err * err, axis=(1, 2)) / M
            ens.net.backward(2.0 * err / (B * M))
            opt.step()
            if not np.all(np.isfinite(out)):
                raise NonFiniteError("FC ensemble diverged")
        train_loss = total / n
        if xv is not None:
            pred = ens.predict_members(xv)
            member_val = np.mean((pred - yv) ** 2, axis=(1, 2))
        else:
            member_val = train_loss
        history.append({"epoch": epoch + 1, "train_loss": float(train_loss.mean()),
                        "val_loss": float(member_val.mean()), "lr": opt.schedule(opt.t - 1)})
        improved = member_val < best_loss
        for k, p in ens.params.items():
            best[k][improved] = p.value[improved]
        best_loss = np.where(improved, member_val, best_loss)
        since = np.where(improved, 0, since + 1)
        if rcfg.patience is not None and np.all(since >= rcfg.patience):
            break
    for k, p in ens.params.items():
        p.value[...] = best[k]
    meta = {"seed": rcfg.seed, "epochs_run": len(history), "train_config": asdict(rcfg),
            "n_train": len(tr), "member_val_loss": [float(v) for v in best_loss]}
    ckpt = FCEnsembleCheckpoint(ens, norm, dataset.topology, dataset.technology,
                                list(dataset.metric_names), list(dataset.param_names), meta)
    return ckpt, history


# ------------------------------------------------------------ evaluation


def _predict_normalized(ckpt, xn, yn, mode, k, chunk=1000):
    if isinstance(ckpt, FCEnsembleCheckpoint):
        return np.concatenate([ckpt.ensemble.predict_members(xn[i:i + chunk]).mean(axis=0)
                               for i in range(0, len(xn), chunk)]) if len(xn) else yn.copy()
    out = []
    for i in range(0, len(xn), chunk):
        sl = slice(i, i + chunk)
        if mode == "teacher-forced":
            p, _, _ = ckpt.model.decode(xn[sl], teacher=yn[sl])
        else:
            p, _, _ = ckpt.model.decode(xn[sl], known=yn[sl, :k] if k else None)
            p[:, :k] = yn[sl, :k]
        out.append(p)
    return np.concatenate(out) if out else yn.copy()


def evaluate(ckpt, testset: Dataset, mode: str = "rollout", known_prefix_len: int = 0):
    """Per-metric R2 / MSE in normalised space plus physical MAE.

    Known-prefix metrics are echoed, reported, and excluded from aggregates;
    so are zero-variance columns (R2 undefined, with a warning).
    """
    if mode not in ("rollout", "teacher-forced"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    t0 = time.perf_counter()
    if isinstance(ckpt, FCEnsembleCheckpoint):
        names, kind = list(ckpt.metric_names), "fc_ensemble"
        mode, known_prefix_len = "one-shot", 0
    else:
        names, kind = list(ckpt.layout.metric_names), "insight"
    if testset.topology != ckpt.topology or sorted(testset.metric_names) != sorted(names):
        raise ValueError("test set schema does not match the checkpoint")
    k = int(known_prefix_len)
    if not 0 <= k <= len(names):
        raise ValueError("known prefix length out of range")
    ts = testset.with_metric_order(names)
    xn, yn = ckpt.norm.normalize_x(ts.X), ckpt.norm.normalize_y(ts.Y)
    pn = _predict_normalized(ckpt, xn, yn, mode, k)
    r2 = r2_per_metric(yn, pn)
    mse = mse_per_metric(yn, pn)
    phys = ckpt.norm.denormalize_y(pn)
    mae = np.mean(np.abs(phys - ts.Y), axis=0)
    included = [i >= k for i in range(len(names))]
    for i, n in enumerate(names):
        if np.isnan(r2[i]):
            log.warning("metric %s has zero variance in the test set; R2 undefined", n)
            included[i] = False
    return EvalReport(names, r2.tolist(), mse.tolist(), mae.tolist(), included,
                      int(ckpt.metadata.get("n_train", 0)), len(ts), mode, k,
                      time.perf_counter() - t0, kind)
