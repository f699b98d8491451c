"""Command-line front end: ``ckt-surrogate <command> [options]``.

Every command reads one TOML config (``--config``), lets flags override it,
and writes artefacts into ``--out`` (default: ``$CKT_SURROGATE_OUT`` or
``./runs``).  Each artefact starts with ``#`` lines carrying the config hash,
seed and tool version.  Failures exit non-zero after printing one line
``error: {json}`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .circuits import TOPOLOGIES
from .config import ConfigError, RunConfig
from .data import Dataset, build_dataset, fit_norm, split
from .model import (
    InsightModel, SequenceLayout, SurrogateCheckpoint, load_checkpoint, rollout, save_checkpoint,
)
from .numerics import grad_check
from .sizing import insight_m_run, pure_ppo_baseline, write_log
from .train import evaluate, history_csv, order_metrics, train_fc_ensemble, train_insight

OUT_ENV = "CKT_SURROGATE_OUT"

SWEEP_COLUMNS = [
    "circuit", "technology", "train_size", "test_size", "model", "aggregate_r2",
    "aggregate_mse", "epochs_run", "seed", "config_hash", "wall_clock_s",
]


class CommandError(RuntimeError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, text):
    if not args.quiet:
        print(text)


def _config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides.setdefault("training", {})["seed"] = args.seed
    if getattr(args, "topology", None):
        overrides["topology"] = {"name": args.topology}
    if getattr(args, "technology", None):
        overrides["technology"] = {"name": args.technology}
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("training", {})["epochs"] = args.epochs
    return RunConfig.load(args.config, overrides)


def _meta_record(cfg: RunConfig):
    return {"event": "meta", "config_hash": cfg.hash(), "seed": cfg.seed,
            "tool_version": __version__}


def _with_meta(cfg: RunConfig, body: str, extra=()):
    head = "".join(f"# {line}\n" for line in list(cfg.meta_lines()) + list(extra))
    return head + body


# ------------------------------------------------------------- commands


def cmd_datagen(args):
    cfg = _config(args)
    n = cfg["training"]["n_samples"] if args.n is None else args.n
    ds = build_dataset(cfg.topology, cfg.technology, n, seed=cfg.seed)
    ds.meta = {"config_hash": cfg.hash(), "tool_version": __version__}
    path = Path(args.path) if args.path else _out_dir(args) / f"{cfg.topology}_{cfg.technology}_{n}.csv"
    ds.save(path)
    _say(args, f"wrote {len(ds)} rows to {path}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    ds = Dataset.load(args.dataset)
    out = _out_dir(args)
    stem = args.name or f"{ds.topology}_{ds.technology}{'_fc' if args.fc else ''}"
    if args.fc:
        t = cfg["training"]
        ckpt, hist = train_fc_ensemble(ds, cfg.fc(), cfg.train_run(epochs=t["fc_epochs"]))
    else:
        ckpt, hist = train_insight(ds, cfg.insight(), cfg.train_run())
    ckpt.metadata.update(config_hash=cfg.hash(), tool_version=__version__)
    save_checkpoint(ckpt, out / f"{stem}.ckpt")
    (out / f"{stem}_history.csv").write_text(history_csv(hist, cfg.meta_lines()))
    _say(args, f"trained {len(hist)} epochs; checkpoint {out / (stem + '.ckpt')}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt)
    ds = Dataset.load(args.dataset)
    r = cfg["report"]
    mode = args.mode or r["eval_mode"]
    k = r["known_prefix_len"] if args.prefix_len is None else args.prefix_len
    rep = evaluate(ckpt, ds, mode, k)
    text = rep.to_csv(cfg.meta_lines())
    path = _out_dir(args) / (args.name or "eval.csv")
    path.write_text(text)
    _say(args, rep.table())
    return 0


def _parse_sizes(items):
    out = []
    for s in items:
        a, _, b = s.partition(":")
        if not (a.isdigit() and b.isdigit()):
            raise CommandError(f"bad size {s!r}; expected TRAIN:TEST")
        out.append((int(a), int(b)))
    return out


def sweep_rows(cfg: RunConfig, sizes, topologies, with_fc=True):
    """Rows in deterministic order: topology, size, then INSIGHT before the FC ensemble."""
    t = cfg["training"]
    rows = []
    for topo in topologies:
        for n_tr, n_te in sizes:
            ds = build_dataset(topo, cfg.technology, n_tr + n_te, seed=t["dataset_seed"])
            tr, te = split(ds, n_tr, n_te, seed=cfg.seed)
            t0 = time.perf_counter()
            ck, hist = train_insight(tr, cfg.insight(), cfg.train_run())
            rep = evaluate(ck, te, cfg["report"]["eval_mode"], 0)
            rows.append(_sweep_row(cfg, topo, n_tr, n_te, "insight", rep, len(hist), t0))
            if with_fc:
                t0 = time.perf_counter()
                fc, hist = train_fc_ensemble(tr, cfg.fc(), cfg.train_run(epochs=t["fc_epochs"]))
                rep = evaluate(fc, te)
                rows.append(_sweep_row(cfg, topo, n_tr, n_te, "fc_ensemble", rep, len(hist), t0))
    return rows


def _sweep_row(cfg, topo, n_tr, n_te, model, rep, epochs, t0):
    return [topo, cfg.technology, n_tr, n_te, model, f"{rep.aggregate_r2:.6f}",
            f"{rep.aggregate_mse:.6e}", epochs, cfg.seed, cfg.hash(),
            f"{time.perf_counter() - t0:.1f}"]


def sweep_csv(cfg, rows):
    buf = io.StringIO()
    for line in cfg.meta_lines() + ["metrics: aggregate over metrics, normalised space; "
                                    "wall_clock_s is the only non-reproducible column"]:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def sweep_table(rows):
    lines = [f"{'circuit':<14s}{'train:test':>12s}{'model':>13s}{'R2':>10s}{'MSE':>12s}"]
    for r in rows:
        lines.append(f"{r[0]:<14s}{f'{r[2]}:{r[3]}':>12s}{r[4]:>13s}{float(r[5]):>10.4f}"
                     f"{float(r[6]):>12.3e}")
    return "\n".join(lines)


def cmd_sweep(args):
    cfg = _config(args)
    r = cfg["report"]
    sizes = _parse_sizes(args.sizes.split(",") if args.sizes else r["sweep_sizes"])
    topos = args.topologies.split(",") if args.topologies else r["sweep_topologies"]
    rows = sweep_rows(cfg, sizes, topos, with_fc=r["sweep_fc"] and not args.no_fc)
    path = _out_dir(args) / (args.name or "sweep.csv")
    path.write_text(sweep_csv(cfg, rows))
    _say(args, sweep_table(rows))
    return 0


def cmd_size(args):
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    pre = Dataset.load(args.pretrain) if args.pretrain else None
    task = cfg.task(args.budget)
    out = _out_dir(args)
    res = insight_m_run(task, ckpt, cfg.ppo(), cfg.insight_m(), pretrain=pre)
    write_log(res.log, out / f"{args.name or 'size'}.jsonl", _meta_record(cfg))
    (out / f"{args.name or 'size'}_result.txt").write_text(_with_meta(cfg, res.text() + "\n"))
    _say(args, res.text())
    return 0


def cmd_baseline(args):
    cfg = _config(args)
    task = cfg.task(args.budget or cfg["sizing"]["baseline_budget"])
    out = _out_dir(args)
    res = pure_ppo_baseline(task, cfg.ppo())
    write_log(res.log, out / f"{args.name or 'baseline'}.jsonl", _meta_record(cfg))
    (out / f"{args.name or 'baseline'}_result.txt").write_text(_with_meta(cfg, res.text() + "\n"))
    _say(args, res.text())
    return 0


def gradcheck_model(cfg: RunConfig, seed=0):
    """Full-width model on a toy layout with every weight perturbed off its init."""
    r = cfg["report"]
    n, m = r["gradcheck_params"], r["gradcheck_metrics"]
    layout = SequenceLayout([f"x{i}" for i in range(n)], [f"y{i}" for i in range(m)])
    model = InsightModel(cfg.insight(), layout, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith((".g",)):
            p.value[...] = 1.0 + rng.normal(0.0, 0.3, p.shape)
        else:
            p.value[...] = rng.normal(0.0, 0.3 if p.value.ndim == 1 else 0.1, p.shape)
    B = r["gradcheck_batch"]
    x = rng.normal(size=(B, n))
    y = rng.normal(size=(B, m))
    w = rng.poisson(1.0, (B, model.config.out_heads)).astype(float)

    def loss_fn(backward=False):
        model.zero_grad()
        return model.loss(x, y, w, backward=backward)[0]

    return model, loss_fn


def run_gradcheck(cfg: RunConfig, seed=0):
    r = cfg["report"]
    model, loss_fn = gradcheck_model(cfg, seed)
    return grad_check(loss_fn, model.params, epsilon=r["gradcheck_epsilon"],
                      tolerance=r["gradcheck_tolerance"],
                      max_entries=r["gradcheck_max_entries"] or None, seed=seed)


def cmd_gradcheck(args):
    cfg = _config(args)
    t0 = time.perf_counter()
    rep = run_gradcheck(cfg, cfg.seed)
    body = "\n".join(rep.lines())
    summary = (f"max_relative_error {rep.max_error:.3e} tolerance {rep.tolerance:.0e} "
               f"entries {rep.n_checked} {'PASS' if rep.passed else 'FAIL'}")
    text = _with_meta(cfg, body + "\n" + summary + "\n",
                      [f"wall_clock_s: {time.perf_counter() - t0:.1f}"])
    (_out_dir(args) / (args.name or "gradcheck.txt")).write_text(text)
    _say(args, body + "\n" + summary)
    if not rep.passed:
        raise CommandError(f"gradient check failed: max error {rep.max_error:.3e}")
    return 0


def bench(ckpt, batch=1000, repeats=50, seed=0):
    """Per-sample rollout latency at batch 1 versus batch ``batch`` (seconds)."""
    rng = np.random.default_rng(seed)
    lo, hi = _bounds(ckpt)
    X = rng.uniform(lo, hi, (batch, len(lo)))
    rollout(ckpt, X[:1])
    single = []
    for i in range(repeats):
        t0 = time.perf_counter()
        rollout(ckpt, X[i % batch])
        single.append(time.perf_counter() - t0)
    rollout(ckpt, X)
    batched = []
    for _ in range(max(3, repeats // 10)):
        t0 = time.perf_counter()
        rollout(ckpt, X)
        batched.append((time.perf_counter() - t0) / batch)
    s, b = float(np.median(single)), float(np.median(batched))
    return {"batch": batch, "per_sample_batch1_s": s, "per_sample_batched_s": b,
            "speedup": s / b}


def _bounds(ckpt):
    topo = TOPOLOGIES[ckpt.topology]
    return topo.lower, topo.upper


def cmd_bench(args):
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else _fresh_checkpoint(cfg)
    r = cfg["report"]
    res = bench(ckpt, args.batch or r["bench_batch"], r["bench_repeats"], cfg.seed)
    lines = [f"batch_size {res['batch']}",
             f"per_sample_latency_batch1_us {res['per_sample_batch1_s'] * 1e6:.1f}",
             f"per_sample_latency_batched_us {res['per_sample_batched_s'] * 1e6:.1f}",
             f"speedup {res['speedup']:.2f}"]
    text = _with_meta(cfg, "\n".join(lines) + "\n",
                      ["all latency values are wall-clock measurements"])
    (_out_dir(args) / (args.name or "bench.txt")).write_text(text)
    _say(args, "\n".join(lines))
    return 0


def _fresh_checkpoint(cfg: RunConfig):
    """Untrained weights (latency does not depend on their values)."""
    ds = build_dataset(cfg.topology, cfg.technology, 64, seed=cfg.seed)
    names = [m.name for m in order_metrics(cfg.topology)]
    ds = ds.with_metric_order(names)
    model = InsightModel(cfg.insight(), SequenceLayout(ds.param_names, names), seed=cfg.seed)
    return SurrogateCheckpoint(model, fit_norm(ds), ds.topology, ds.technology)


# ---------------------------------------------------------------- parser


def build_parser():
    def global_flags(suppress):
        # subparsers must not reset flags given before the subcommand
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", help="TOML run configuration", **kw)
        g.add_argument("--seed", type=int, help="override [training].seed", **kw)
        g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)", **kw)
        g.add_argument("--quiet", action="store_true", help="suppress stdout reports", **kw)
        g.add_argument("--name", help="output file stem", **kw)
        return g

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="ckt-surrogate", parents=[global_flags(False)],
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("datagen", cmd_datagen, "sample designs and label them with the oracle")
    sp.add_argument("--n", type=int, help="number of rows (default [training].n_samples)")
    sp.add_argument("--path", help="explicit output file")
    sp.add_argument("--topology")
    sp.add_argument("--technology")

    sp = add("train", cmd_train, "train a surrogate on a dataset file")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--fc", action="store_true", help="train the FC-ensemble baseline instead")
    sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a dataset file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--mode", choices=["rollout", "teacher-forced"])
    sp.add_argument("--prefix-len", type=int, help="known metric prefix length")

    sp = add("sweep", cmd_sweep, "train:test size sweep, INSIGHT versus FC ensemble")
    sp.add_argument("--sizes", help="comma list such as 300:100,1500:500")
    sp.add_argument("--topologies", help="comma list of circuits")
    sp.add_argument("--technology")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--no-fc", action="store_true", help="skip the FC ensemble")

    sp = add("size", cmd_size, "surrogate-guided sizing run")
    sp.add_argument("--ckpt", help="pre-trained checkpoint (omit to start from scratch)")
    sp.add_argument("--pretrain", help="pre-training dataset mixed into fine-tuning")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--topology")
    sp.add_argument("--technology")

    sp = add("baseline", cmd_baseline, "PPO directly on the oracle")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--topology")
    sp.add_argument("--technology")

    add("gradcheck", cmd_gradcheck, "finite-difference check of every weight block")

    sp = add("bench", cmd_bench, "rollout latency, batch 1 versus batched")
    sp.add_argument("--ckpt", help="checkpoint (omit for untrained weights of the config)")
    sp.add_argument("--batch", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ValueError, KeyError, OSError, FloatingPointError) as e:
        err = {"command": args.command, "type": type(e).__name__, "message": str(e)}
        print("error: " + json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
