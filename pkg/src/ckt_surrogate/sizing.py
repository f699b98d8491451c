"""Surrogate-guided sizing: PPO inside the surrogate, sparse real checks, fine-tuning.

The environment moves every parameter by -1, 0 or +1 grid steps per action
over a fixed horizon.  Reward is the decrease in FoM plus a bonus when the
constraints are met, which also ends the episode.  The same environment
class runs on the surrogate or, through an :class:`OracleCounter`, on the
behavioural oracle; only the metric source differs.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .circuits import (
    Constraint, FoMSpec, constraints_met, evaluate_oracle, fom, get_technology, get_topology,
)
from .data import Dataset, NormStats
from .model import (
    InsightConfig, InsightModel, SequenceLayout, SurrogateCheckpoint, rollout,
    rollout_with_uncertainty, to_topology_order,
)
from .numerics import MLP, Adam, NonFiniteError, log_softmax, softmax
from .train import TrainRunConfig, fit_model, order_metrics

log = logging.getLogger(__name__)


class BudgetExhausted(RuntimeError):
    pass


class OracleCounter:
    """Routes oracle calls and counts them; refuses any call that would exceed the budget."""

    def __init__(self, topology, technology, budget: int):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.topology = get_topology(topology)
        self.technology = get_technology(technology)
        self.budget = int(budget)
        self.count = 0

    @property
    def remaining(self):
        return self.budget - self.count

    def evaluate(self, designs):
        designs = np.asarray(designs, dtype=float)
        n = 1 if designs.ndim == 1 else len(designs)
        if self.count + n > self.budget:
            raise BudgetExhausted(f"{n} simulation(s) requested with {self.remaining} left")
        out = evaluate_oracle(self.topology, self.technology, designs)
        self.count += n
        return out


# ------------------------------------------------------------------ task


@dataclass
class SizingTask:
    topology: str
    technology: str
    fom: FoMSpec
    grid_points: tuple[int, ...]
    budget: int = 50
    seed: int = 0
    horizon: int = 12
    start_index: tuple[int, ...] | None = None   # default: grid centre
    success_bonus: float = 10.0

    def __post_init__(self):
        topo = get_topology(self.topology)
        if isinstance(self.grid_points, int):
            self.grid_points = (self.grid_points,) * topo.n_params
        self.grid_points = tuple(int(g) for g in self.grid_points)
        if len(self.grid_points) != topo.n_params or min(self.grid_points) < 2:
            raise ValueError("need >= 2 grid points for every parameter")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.start_index is None:
            self.start_index = tuple(g // 2 for g in self.grid_points)
        self.start_index = tuple(int(i) for i in self.start_index)
        if any(not 0 <= i < g for i, g in zip(self.start_index, self.grid_points)):
            raise ValueError("start index outside the grid")

    @property
    def n_params(self):
        return len(self.grid_points)

    def grid(self):
        topo = get_topology(self.topology)
        return [np.linspace(p.lower, p.upper, g) for p, g in zip(topo.params, self.grid_points)]

    def design(self, idx):
        idx = np.asarray(idx, dtype=int)
        cols = [g[idx[..., i]] for i, g in enumerate(self.grid())]
        return np.stack(cols, axis=-1)


def default_task(topology="ota2_nmos", technology="synth45", **kw) -> SizingTask:
    """Built-in targets per circuit (objective: minimise quiescent current / power)."""
    topo = get_topology(topology)
    if topology in ("ota2_nmos", "ota2_pmos"):
        spec = FoMSpec.for_topology(topo, "i_q", objective_weight=0.1, constraints=(
            Constraint("dc_gain", ">=", 60.0, 10.0),
            Constraint("ugbw", ">=", 30.0, 10.0),
            Constraint("phase_margin", ">=", 60.0, 10.0)))
    elif topology in ("tia2", "tia3"):
        spec = FoMSpec.for_topology(topo, "i_q", objective_weight=0.1, constraints=(
            Constraint("dc_gain", ">=", 80.0, 10.0),
            Constraint("ugbw", ">=", 50.0, 10.0),
            Constraint("phase_margin", ">=", 45.0, 10.0)))
    elif topology == "comparator":
        spec = FoMSpec.for_topology(topo, "dc_power", objective_weight=0.1,
                                    objective_scale=1e-4, constraints=(
                                        Constraint("avg_delay", "<=", 2e-10, 10.0),))
    elif topology == "level_shifter":
        spec = FoMSpec.for_topology(topo, "dc_power", objective_weight=0.1,
                                    objective_scale=1e-4, constraints=(
                                        Constraint("avg_delay", "<=", 1e-10, 10.0),
                                        Constraint("ratio", ">=", 0.5, 10.0)))
    else:
        raise KeyError(f"no default task for {topology!r}")
    kw.setdefault("grid_points", 11)
    return SizingTask(topo.name, technology, spec, **kw)


# ------------------------------------------------------------------- env


@dataclass
class EnvState:
    idx: np.ndarray          # (B, N) grid indices
    perf: np.ndarray         # (B, M) metrics, topology order
    fom: np.ndarray          # (B,)
    step: int
    done: np.ndarray         # (B,) bool
    success: np.ndarray      # (B,) bool


class SizingEnv:
    """Batch of synchronous episodes.  ``source`` is a checkpoint or an OracleCounter."""

    def __init__(self, task: SizingTask, source, n_envs=1, margin=0.0):
        self.task = task
        self.topo = get_topology(task.topology)
        self.source = source
        self.n_envs = int(n_envs)
        self.margin = float(margin)
        self._start_perf = None
        self.gmax = np.array(task.grid_points) - 1
        self.state: EnvState | None = None

    @property
    def is_oracle(self):
        return isinstance(self.source, OracleCounter)

    @property
    def obs_dim(self):
        return self.task.n_params + len(self.task.fom.constraints) + 2

    def metrics(self, designs):
        if self.is_oracle:
            return self.source.evaluate(designs)
        return surrogate_predict(self.source, designs)

    def _fom(self, perf):
        return np.atleast_1d(fom(self.task.fom, perf))

    def _met(self, perf):
        return np.atleast_1d(constraints_met(self.task.fom, perf, self.margin))

    def start_perf(self):
        """Start-design metrics, computed once (one real simulation on the oracle)."""
        if self._start_perf is None:
            self._start_perf = self.metrics(self.task.design(self.task.start_index)[None, :])[0]
        return self._start_perf

    def reset(self):
        B = self.n_envs
        idx = np.tile(np.array(self.task.start_index), (B, 1))
        perf = np.tile(self.start_perf(), (B, 1))
        met = self._met(perf)
        self.state = EnvState(idx, perf, self._fom(perf), 0, met.copy(), met)
        return self.observe()

    def observe(self, state=None):
        s = state or self.state
        spec = self.task.fom
        pos = 2.0 * s.idx / self.gmax - 1.0
        terms = np.clip(spec.constraint_terms(s.perf) * spec.weights, -1.0, 1.0)
        obj = np.clip(spec.objective_weight * spec.objective_term(s.perf), -5.0, 5.0)[:, None]
        frac = np.full((len(s.idx), 1), s.step / self.task.horizon)
        return np.hstack([pos, terms, obj, frac])

    def step(self, actions):
        """actions (B, N) in {0, 1, 2} meaning -1 / 0 / +1 grid moves.

        Finished episodes are frozen: no metric evaluation, zero reward.
        """
        s = self.state
        if s.step >= self.task.horizon:
            raise RuntimeError("episode horizon reached; call reset()")
        actions = np.asarray(actions, dtype=int).reshape(self.n_envs, -1)
        live = ~s.done
        new_idx = s.idx.copy()
        new_idx[live] = np.clip(s.idx[live] + actions[live] - 1, 0, self.gmax)
        perf = s.perf.copy()
        moved = live & np.any(new_idx != s.idx, axis=1)
        if moved.any():
            perf[moved] = self.metrics(self.task.design(new_idx[moved]))
        new_fom = s.fom.copy()
        new_fom[moved] = self._fom(perf[moved])
        met = s.success.copy()
        met[live] = self._met(perf[live])
        reward = np.where(live, s.fom - new_fom, 0.0)
        newly = live & met
        reward = reward + np.where(newly, self.task.success_bonus, 0.0)
        step = s.step + 1
        done = s.done | met | (step >= self.task.horizon)
        self.state = EnvState(new_idx, perf, new_fom, step, done, met)
        return self.observe(), reward, done


def surrogate_predict(ck: SurrogateCheckpoint, designs):
    y = rollout(ck, designs)
    topo = get_topology(ck.topology)
    return to_topology_order(ck.layout.metric_names, topo.metric_names, y)


def surrogate_step(env: SizingEnv, action):
    if env.is_oracle:
        raise TypeError("surrogate_step needs a surrogate-backed environment")
    return env.step(action)


def oracle_step(env: SizingEnv, action, counter: OracleCounter | None = None):
    if not env.is_oracle or (counter is not None and env.source is not counter):
        raise TypeError("oracle_step needs an environment routed through the counter")
    return env.step(action)


# ------------------------------------------------------------------- PPO


@dataclass
class PPOConfig:
    hidden: tuple[int, ...] = (64, 64)
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    n_envs: int = 32
    epochs: int = 4
    minibatch: int = 128
    lr: float = 3e-3
    entropy: float = 0.01
    value_coef: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip ratio must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("discount must lie in (0, 1]")


class PPOAgent:
    """Factorised categorical policy (N x 3 logits) and a state-value net."""

    def __init__(self, obs_dim, n_params, cfg: PPOConfig, seed=0):
        self.cfg = cfg
        self.n_params = n_params
        ss = np.random.SeedSequence(seed).generate_state(2)
        self.policy = MLP((obs_dim,) + cfg.hidden + (3 * n_params,), "tanh",
                          seeds=[int(ss[0])], init="xavier", out_scale=0.01)
        self.value = MLP((obs_dim,) + cfg.hidden + (1,), "tanh",
                         seeds=[int(ss[1])], init="xavier")
        self.opt = Adam(self.policy.parameters() + self.value.parameters(), lr=cfg.lr)

    def logits(self, obs, keep=False):
        return self.policy.forward(obs, keep_cache=keep)[0].reshape(len(obs), self.n_params, 3)

    def values(self, obs, keep=False):
        return self.value.forward(obs, keep_cache=keep)[0, :, 0]

    def act(self, obs, rng, greedy=False):
        lg = self.logits(obs)
        if greedy:
            a = lg.argmax(axis=-1)
        else:
            p = softmax(lg)
            u = rng.random(p.shape[:-1])[..., None]
            a = np.minimum((u > np.cumsum(p, axis=-1)).sum(axis=-1), 2)
        lp = np.take_along_axis(log_softmax(lg), a[..., None], -1)[..., 0].sum(-1)
        return a, lp

    def update(self, batch, rng):
        """Clipped-objective epochs over minibatches; returns diagnostics of the last pass."""
        n = len(batch["obs"])
        stats = {}
        for _ in range(self.cfg.epochs):
            perm = rng.permutation(n)
            for s in range(0, n, self.cfg.minibatch):
                idx = perm[s:s + self.cfg.minibatch]
                mb = {k: v[idx] for k, v in batch.items()}
                self.opt.zero_grad()
                stats = ppo_loss(self, mb, backward=True)
                self.opt.step()
        return stats


def clip_active_set(ratio, adv, eps):
    """Entries where the clipped objective passes gradient to the policy."""
    return ~(((adv >= 0) & (ratio > 1 + eps)) | ((adv < 0) & (ratio < 1 - eps)))


def ppo_loss(agent: PPOAgent, mb, backward=False):
    """-clipped surrogate - entropy bonus + value loss, averaged over the minibatch."""
    cfg = agent.cfg
    obs, act, old_lp, adv, ret = mb["obs"], mb["act"], mb["logp"], mb["adv"], mb["ret"]
    B = len(obs)
    lg = agent.logits(obs, keep=backward)
    lsm = log_softmax(lg)
    p = np.exp(lsm)
    lp = np.take_along_axis(lsm, act[..., None], -1)[..., 0].sum(-1)
    ratio = np.exp(lp - old_lp)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    pg = -np.mean(np.minimum(ratio * adv, clipped * adv))
    ent_f = -np.sum(p * lsm, axis=-1)          # (B, N)
    ent = np.mean(ent_f.sum(-1))
    v = agent.values(obs, keep=backward)
    vloss = np.mean((v - ret) ** 2)
    loss = pg - cfg.entropy * ent + cfg.value_coef * vloss
    if not np.isfinite(loss):
        raise NonFiniteError("PPO loss is not finite")
    active = clip_active_set(ratio, adv, cfg.clip)
    if backward:
        dlp = np.where(active, -adv * ratio, 0.0) / B
        onehot = np.zeros_like(lg)
        np.put_along_axis(onehot, act[..., None], 1.0, -1)
        dlg = dlp[:, None, None] * (onehot - p)
        # d(-c * H)/dlogits = c * p * (log p + H)
        dlg += cfg.entropy / B * p * (lsm + ent_f[..., None])
        agent.policy.backward(dlg.reshape(1, B, -1))
        agent.value.backward((cfg.value_coef * 2.0 * (v - ret) / B).reshape(1, B, 1))
    return {"loss": float(loss), "policy": float(pg), "entropy": float(ent),
            "value": float(vloss), "ratio": ratio, "active": active}


def gae(rewards, values, last_value, dones, gamma, lam):
    """Advantages for (T, B) arrays; ``dones[t]`` marks termination after step t."""
    T = len(rewards)
    adv = np.zeros_like(rewards)
    nxt_adv = 0.0
    nxt_val = last_value
    for t in reversed(range(T)):
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_val * nonterm - values[t]
        nxt_adv = delta + gamma * lam * nonterm * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


def collect(env: SizingEnv, agent: PPOAgent, rng, greedy=False, on_step=None):
    """One synchronous batch of episodes.  Returns the transition batch and episode stats."""
    obs = env.reset()
    B = env.n_envs
    buf = {k: [] for k in ("obs", "act", "logp", "rew", "val", "done", "live")}
    returns = np.zeros(B)
    for _ in range(env.task.horizon):
        live = ~env.state.done
        if not live.any():
            break
        a, lp = agent.act(obs, rng, greedy)
        v = agent.values(obs)
        obs2, r, done = env.step(a)
        for k, val in (("obs", obs), ("act", a), ("logp", lp), ("rew", r), ("val", v),
                       ("done", done.astype(float)), ("live", live)):
            buf[k].append(val)
        returns += r
        if on_step is not None and on_step(env):
            break
        obs = obs2
    s = env.state
    out = {k: np.array(v) for k, v in buf.items()}
    out["final_idx"] = s.idx.copy()
    out["success"] = s.success.copy()
    out["returns"] = returns
    return out


def _flatten(roll, cfg: PPOConfig):
    """GAE-annotated live transitions, or None when the episodes ended at reset."""
    if len(roll["rew"]) == 0:
        return None
    adv, ret = gae(roll["rew"], roll["val"], np.zeros(roll["rew"].shape[1]), roll["done"],
                   cfg.gamma, cfg.lam)
    live = roll["live"].reshape(-1)
    flat = {
        "obs": roll["obs"].reshape(-1, roll["obs"].shape[-1])[live],
        "act": roll["act"].reshape(-1, roll["act"].shape[-1])[live],
        "logp": roll["logp"].reshape(-1)[live],
        "adv": adv.reshape(-1)[live],
        "ret": ret.reshape(-1)[live],
    }
    a = flat["adv"]
    if len(a) > 1:
        flat["adv"] = (a - a.mean()) / (a.std() + 1e-8)
    return flat


def ppo_train_in_surrogate(task: SizingTask, ckpt: SurrogateCheckpoint, cfg: PPOConfig,
                           iterations: int, agent: PPOAgent | None = None, margin=0.02,
                           seed=None):
    """PPO on batched surrogate episodes.  Never touches the oracle."""
    seed = cfg.seed if seed is None else seed
    env = SizingEnv(task, ckpt, n_envs=cfg.n_envs, margin=margin)
    if agent is None:
        agent = PPOAgent(env.obs_dim, task.n_params, cfg, seed)
    rng = np.random.default_rng([seed, 11])
    for _ in range(iterations):
        batch = _flatten(collect(env, agent, rng), cfg)
        if batch is not None:
            agent.update(batch, rng)
    return agent


def random_policy_return(task, ckpt, n_envs=64, seed=0, margin=0.02):
    """Mean episodic surrogate return of the uniform-random policy."""
    env = SizingEnv(task, ckpt, n_envs=n_envs, margin=margin)
    rng = np.random.default_rng(seed)
    env.reset()
    total = np.zeros(n_envs)
    while env.state.step < task.horizon and not env.state.done.all():
        _, r, _ = env.step(rng.integers(0, 3, (n_envs, task.n_params)))
        total += r
    return float(total.mean())


def policy_return(task, ckpt, agent, n_envs=64, seed=0, margin=0.02, greedy=False):
    env = SizingEnv(task, ckpt, n_envs=n_envs, margin=margin)
    roll = collect(env, agent, np.random.default_rng(seed), greedy=greedy)
    return float(roll["returns"].mean())


# -------------------------------------------------------------- INSIGHT-M


@dataclass
class InsightMConfig:
    beta: float = 0.0                 # UCB weight on the across-head FoM spread
    ppo_iterations: int = 30
    refresh_iterations: int = 10
    sampled_envs: int = 64            # stochastic trajectories for candidate endpoints
    margin: float = 0.02              # surrogate success margin on every constraint
    finetune_epochs: int = 30
    finetune_lr: float = 3e-4
    finetune_batch: int = 32
    pretrain_mix: int = 4             # pre-training rows per buffer row
    finetune_on_failure: bool = True
    fom_tolerance: float = 0.5
    seed_sims: int = 8                # real random designs when starting without a checkpoint


@dataclass
class SizingResult:
    success: bool
    sims: int
    design: np.ndarray | None
    perf: np.ndarray | None
    fom_trace: list[float]
    finetune_rounds: int
    log: list[dict] = field(default_factory=list, repr=False)

    def summary(self):
        d = {"success": self.success, "real_simulations": self.sims,
             "finetune_rounds": self.finetune_rounds,
             "design": None if self.design is None else [float(v) for v in self.design],
             "performance": None if self.perf is None else [float(v) for v in self.perf],
             "fom_trace": [float(v) for v in self.fom_trace]}
        return d

    def text(self):
        s = self.summary()
        return "\n".join(f"{k:<18s} {json.dumps(v)}" for k, v in s.items())


def _record(log_rows, kind, counter, **kw):
    row = {"event": kind, "real_simulations": counter.count}
    for k, v in kw.items():
        row[k] = v.tolist() if isinstance(v, np.ndarray) else v
    log_rows.append(row)


def candidate_scores(task, ckpt, designs, beta):
    """FoM of the mean prediction minus beta times the across-head FoM spread.

    Returns (score, predicted-success flags, mean metrics).  Lower is better.
    """
    topo = get_topology(task.topology)
    up = rollout_with_uncertainty(ckpt, designs)
    mean = to_topology_order(ckpt.layout.metric_names, topo.metric_names, up.mean)
    score = np.atleast_1d(fom(task.fom, mean))
    if beta:
        heads = np.moveaxis(up.heads, -1, 0)                 # (K, B, M)
        phys = ckpt.norm.denormalize_y(heads)
        phys = to_topology_order(ckpt.layout.metric_names, topo.metric_names, phys)
        sigma = np.std(np.atleast_2d(fom(task.fom, phys)), axis=0)
        score = score - beta * sigma
    return score, mean


def _surrogate_from_scratch(task, designs, perfs, seed):
    topo = get_topology(task.topology)
    names = [m.name for m in order_metrics(topo)]
    ds = Dataset(topo.name, task.technology, designs, perfs, topo.param_names,
                 topo.metric_names).with_metric_order(names)
    norm = NormStats.fit(ds.X, ds.Y, ds.log_flags)
    model = InsightModel(InsightConfig(), SequenceLayout(topo.param_names, names), seed=seed)
    return SurrogateCheckpoint(model, norm, topo.name, task.technology, {"from_scratch": True})


def finetune_surrogate(ckpt: SurrogateCheckpoint, X, Y, knobs: InsightMConfig, seed,
                       pretrain: Dataset | None = None):
    """Fine-tune in place on real rows plus a uniform draw of pre-training rows."""
    topo = get_topology(ckpt.topology)
    rng = np.random.default_rng([seed, 29])
    if pretrain is not None and knobs.pretrain_mix > 0 and len(pretrain):
        n = min(len(pretrain), knobs.pretrain_mix * len(X))
        pick = rng.choice(len(pretrain), n, replace=False)
        pre = pretrain.subset(np.sort(pick)).with_metric_order(topo.metric_names)
        X = np.vstack([X, pre.X])
        Y = np.vstack([Y, pre.Y])
    Yl = to_topology_order(topo.metric_names, ckpt.layout.metric_names, Y)
    rcfg = TrainRunConfig(epochs=knobs.finetune_epochs, batch_size=knobs.finetune_batch,
                          lr=knobs.finetune_lr, seed=int(rng.integers(2**31)), patience=None,
                          val_fraction=0.0, bootstrap_heads=True)
    return fit_model(ckpt.model, ckpt.norm.normalize_x(X), ckpt.norm.normalize_y(Yl), rcfg)


def insight_m_run(task: SizingTask, ckpt: SurrogateCheckpoint | None, cfg: PPOConfig | None = None,
                  knobs: InsightMConfig | None = None, pretrain: Dataset | None = None,
                  log_path=None) -> SizingResult:
    """Train PPO in the surrogate, check its best endpoint for real, fine-tune, repeat.

    Counting rule: the start design is simulated once (1 real simulation); if
    it already meets the targets the run succeeds right there.  Each later
    round costs exactly one real simulation.
    """
    cfg = cfg or PPOConfig(seed=task.seed)
    knobs = knobs or InsightMConfig()
    counter = OracleCounter(task.topology, task.technology, task.budget)
    rng = np.random.default_rng([task.seed, 3])
    rows: list[dict] = []
    trace: list[float] = []
    evaluated: dict[tuple, np.ndarray] = {}
    X_real, Y_real = [], []
    rounds = 0
    result_design = result_perf = None
    success = False

    def real(idx):
        d = task.design(np.array(idx))
        y = counter.evaluate(d[None, :])[0]
        evaluated[tuple(int(i) for i in idx)] = y
        X_real.append(d)
        Y_real.append(y)
        f = float(fom(task.fom, y))
        trace.append(f)
        return d, y, f

    try:
        d, y, f = real(task.start_index)
        met = bool(constraints_met(task.fom, y))
        _record(rows, "simulation", counter, design=d, metrics=y, fom=f, met=met, source="start")
        result_design, result_perf, best_f = d, y, f
        if met:
            success = True
        if not success:
            if ckpt is None:
                gmax = np.array(task.grid_points)
                while len(X_real) < 1 + knobs.seed_sims:
                    idx = tuple(int(v) for v in rng.integers(0, gmax))
                    if idx in evaluated:
                        continue
                    d, y, f = real(idx)
                    _record(rows, "simulation", counter, design=d, metrics=y, fom=f,
                            met=bool(constraints_met(task.fom, y)), source="seed")
                    if constraints_met(task.fom, y):
                        success, result_design, result_perf = True, d, y
                        break
                if not success:
                    ckpt = _surrogate_from_scratch(task, np.array(X_real), np.array(Y_real), task.seed)
                    finetune_surrogate(ckpt, np.array(X_real), np.array(Y_real), knobs, task.seed)
            else:
                ckpt = ckpt.copy()
        agent = None
        while not success:
            iters = knobs.ppo_iterations if agent is None else knobs.refresh_iterations
            agent = ppo_train_in_surrogate(task, ckpt, cfg, iters, agent=agent,
                                           margin=knobs.margin, seed=cfg.seed + 1000 * rounds)
            idx, score, pred = _best_candidate(task, ckpt, agent, knobs, evaluated, rng)
            d, y, f = real(idx)
            met = bool(constraints_met(task.fom, y))
            _record(rows, "simulation", counter, design=d, metrics=y, fom=f, met=met,
                    predicted=pred, score=float(score), round=rounds)
            if f < best_f:
                result_design, result_perf, best_f = d, y, f
            if met:
                success, result_design, result_perf = True, d, y
                break
            gap = abs(float(fom(task.fom, pred)) - f)
            if (knobs.finetune_on_failure or gap > knobs.fom_tolerance) and counter.remaining > 0:
                hist = finetune_surrogate(ckpt, np.array(X_real), np.array(Y_real), knobs,
                                          task.seed + rounds, pretrain)
                rounds += 1
                _record(rows, "finetune", counter, round=rounds, buffer=len(X_real),
                        loss=hist[-1]["train_loss"] if hist else None)
            if counter.remaining == 0:
                break
    except BudgetExhausted:
        log.info("budget of %d real simulations exhausted", task.budget)
    res = SizingResult(success, counter.count, result_design, result_perf, trace, rounds, rows)
    if log_path is not None:
        write_log(rows, log_path)
    return res


def _best_candidate(task, ckpt, agent, knobs, evaluated, rng):
    """Endpoints of the greedy and sampled surrogate trajectories, scored by (UCB) FoM."""
    env = SizingEnv(task, ckpt, n_envs=1, margin=knobs.margin)
    greedy = collect(env, agent, rng, greedy=True)
    env = SizingEnv(task, ckpt, n_envs=knobs.sampled_envs, margin=knobs.margin)
    sampled = collect(env, agent, rng)
    cands = np.vstack([greedy["final_idx"], sampled["final_idx"]])
    keys = [tuple(int(v) for v in c) for c in cands]
    fresh = [i for i, k in enumerate(keys) if k not in evaluated]
    if not fresh:
        # every endpoint already simulated: fall back to random neighbours of the best ones
        gmax = np.array(task.grid_points) - 1
        base = cands[rng.integers(len(cands), size=64)]
        near = np.clip(base + rng.integers(-1, 2, base.shape), 0, gmax)
        cands = np.vstack([cands, near])
        keys = [tuple(int(v) for v in c) for c in cands]
        fresh = [i for i, k in enumerate(keys) if k not in evaluated]
        if not fresh:
            fresh = [int(rng.integers(len(cands)))]
    uniq = list(dict.fromkeys(keys[i] for i in fresh))
    idx = np.array(uniq)
    score, mean = candidate_scores(task, ckpt, task.design(idx), knobs.beta)
    met = np.atleast_1d(constraints_met(task.fom, mean, knobs.margin))
    order = np.lexsort((score, ~met))
    b = order[0]
    return uniq[b], score[b], mean[b]


def write_log(rows, path, header: dict | None = None):
    """JSON lines, one record per event; ``header`` becomes the first record."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in ([header] if header else []) + list(rows):
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# -------------------------------------------------------------- baseline


def pure_ppo_baseline(task: SizingTask, cfg: PPOConfig | None = None, n_envs=None,
                      log_path=None) -> SizingResult:
    """PPO directly on the oracle; every environment step is one real simulation.

    Stops at the first real success or when the budget runs out.  The start
    design is simulated once and shared by every episode.
    """
    cfg = cfg or PPOConfig(seed=task.seed)
    counter = OracleCounter(task.topology, task.technology, task.budget)
    env = SizingEnv(task, counter, n_envs=n_envs or cfg.n_envs)
    agent = PPOAgent(env.obs_dim, task.n_params, cfg, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 13])
    rows, trace = [], []
    success, design, perf = False, None, None
    best = math.inf

    def watch(e):
        return bool(e.state.success.any())

    try:
        start = env.start_perf()
        trace.append(float(fom(task.fom, start)))
        design, perf, best = task.design(task.start_index), start, trace[-1]
        if constraints_met(task.fom, start):
            success = True
        while not success:
            roll = collect(env, agent, rng, on_step=watch)
            s = env.state
            i = int(np.argmin(s.fom))
            if s.fom[i] < best:
                best, design, perf = float(s.fom[i]), task.design(s.idx[i]), s.perf[i].copy()
            trace.append(best)
            _record(rows, "iteration", counter, best_fom=best)
            if s.success.any():
                j = int(np.flatnonzero(s.success)[0])
                success, design, perf = True, task.design(s.idx[j]), s.perf[j].copy()
                break
            batch = _flatten(roll, cfg)
            if batch is not None:
                agent.update(batch, rng)
    except BudgetExhausted:
        log.info("baseline budget of %d exhausted", task.budget)
    if log_path is not None:
        write_log(rows, log_path)
    return SizingResult(success, counter.count, design, perf, trace, 0, rows)
