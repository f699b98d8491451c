"""Autoregressive decoder-only transformer surrogate and the FC-ensemble baseline.

Sequence layout for a topology with N parameters and M metrics::

    position   0 .. N-1        N .. N+M-2
    token      x_1 .. x_N      y_1 .. y_{M-1}

The hidden state at position N+i-2 predicts y_i (1-based), so y_1 is read
off the last parameter token.  Every scalar is lifted to the model width by a
shared linear map and a learned per-position embedding is added.

The forward pass is always run as an incremental decode: the N parameter
tokens form one group, then each metric token is its own group, with keys and
values cached across groups.  Teacher forcing and autoregressive rollout call
the very same sequence of array operations and differ only in which value is
fed as the next token, which makes a rollout with a ground-truth prefix
reproduce the teacher-forced prediction bit for bit.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import NormStats
from .numerics import (
    MLP, NonFiniteError, Parameter, attention_core, attention_core_backward,
    check_finite, gelu, gelu_backward, layer_norm, layer_norm_backward,
    merge_heads, split_heads,
)

MAGIC = b"CKTSURR\0"
FORMAT_VERSION = 1


@dataclass
class InsightConfig:
    d_model: int = 76
    heads: int = 4
    layers: int = 3
    ff_mult: int = 4
    out_heads: int = 5
    dropout: float = 0.0
    init_std: float = 0.02
    ln_eps: float = 1e-5
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.out_heads < 1:
            raise ValueError("need at least one output head")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported")
        if self.activation != "gelu":
            raise ValueError("only the GeLU activation is implemented")


@dataclass
class SequenceLayout:
    param_names: list[str]
    metric_names: list[str]

    def __post_init__(self):
        if len(set(self.metric_names)) != len(self.metric_names):
            raise ValueError("metric order must not repeat metrics")
        if not self.param_names or not self.metric_names:
            raise ValueError("layout needs at least one parameter and one metric")

    @property
    def n_params(self):
        return len(self.param_names)

    @property
    def n_metrics(self):
        return len(self.metric_names)

    @property
    def seq_len(self):
        return self.n_params + self.n_metrics - 1

    @property
    def max_len(self):
        return self.n_params + self.n_metrics

    def roles(self):
        return ["param"] * self.n_params + ["metric"] * (self.n_metrics - 1)


class InsightModel:
    """Weights plus forward / backward for one sequence layout."""

    def __init__(self, config: InsightConfig, layout: SequenceLayout, seed=0):
        self.config = config
        self.layout = layout
        rng = np.random.default_rng(seed)
        d, std = config.d_model, config.init_std
        dff = config.ff_mult * d
        p = {}

        def gauss(*shape):
            return Parameter(rng.normal(0.0, std, shape))

        p["lift.w"] = gauss(d)
        p["lift.b"] = Parameter(np.zeros(d))
        p["pos"] = gauss(layout.seq_len, d)
        for l in range(config.layers):
            p[f"h{l}.ln1.g"] = Parameter(np.ones(d))
            p[f"h{l}.ln1.b"] = Parameter(np.zeros(d))
            p[f"h{l}.attn.w_qkv"] = gauss(d, 3 * d)
            p[f"h{l}.attn.b_qkv"] = Parameter(np.zeros(3 * d))
            p[f"h{l}.attn.w_o"] = gauss(d, d)
            p[f"h{l}.attn.b_o"] = Parameter(np.zeros(d))
            p[f"h{l}.ln2.g"] = Parameter(np.ones(d))
            p[f"h{l}.ln2.b"] = Parameter(np.zeros(d))
            p[f"h{l}.ff.w1"] = gauss(d, dff)
            p[f"h{l}.ff.b1"] = Parameter(np.zeros(dff))
            p[f"h{l}.ff.w2"] = gauss(dff, d)
            p[f"h{l}.ff.b2"] = Parameter(np.zeros(d))
        p["lnf.g"] = Parameter(np.ones(d))
        p["lnf.b"] = Parameter(np.zeros(d))
        p["head.w"] = gauss(d, config.out_heads)
        p["head.b"] = Parameter(np.zeros(config.out_heads))
        self.params: dict[str, Parameter] = p

    # ------------------------------------------------------------ helpers

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for q in self.params.values():
            q.zero_grad()

    def n_weights(self):
        return sum(q.value.size for q in self.params.values())

    def copy(self) -> "InsightModel":
        new = InsightModel.__new__(InsightModel)
        new.config = self.config
        new.layout = self.layout
        new.params = {k: Parameter(v.value.copy(), trainable=v.trainable)
                      for k, v in self.params.items()}
        return new

    def load_weights(self, weights: dict):
        for k, q in self.params.items():
            w = np.asarray(weights[k], dtype=float)
            if w.shape != q.value.shape:
                raise ValueError(f"shape mismatch for {k}: {w.shape} vs {q.value.shape}")
            q.value[...] = w

    def weights(self):
        return {k: q.value for k, q in self.params.items()}

    def _v(self, name):
        return self.params[name].value

    # ------------------------------------------------------------ forward

    def embed(self, vals, start):
        """Lift scalars (B, n) at absolute positions start.. to (B, n, d)."""
        n = vals.shape[1]
        if start + n > self.layout.seq_len:
            raise ValueError("sequence longer than the layout allows")
        return vals[..., None] * self._v("lift.w") + self._v("lift.b") + self._v("pos")[start:start + n]

    def _block(self, l, x, start, kv, keep):
        cfg = self.config
        d = cfg.d_model
        B, n, _ = x.shape
        v = self._v
        z1, c1 = layer_norm(x, v(f"h{l}.ln1.g"), v(f"h{l}.ln1.b"), cfg.ln_eps)
        z1f = z1.reshape(B * n, d)
        qkv = z1f @ v(f"h{l}.attn.w_qkv")
        qkv += v(f"h{l}.attn.b_qkv")
        qkv = qkv.reshape(B, n, 3 * d)
        q = split_heads(qkv[..., :d], cfg.heads)
        k = split_heads(qkv[..., d:2 * d], cfg.heads)
        vv = split_heads(qkv[..., 2 * d:], cfg.heads)
        if kv[l] is None:
            K, V = k, vv
        else:
            K = np.concatenate([kv[l][0], k], axis=-2)
            V = np.concatenate([kv[l][1], vv], axis=-2)
        kv[l] = (K, V)
        a, probs = attention_core(q, K, V, start)
        m = merge_heads(a).reshape(B * n, d)
        h = (m @ v(f"h{l}.attn.w_o")).reshape(B, n, d)
        h += v(f"h{l}.attn.b_o")
        h += x
        z2, c2 = layer_norm(h, v(f"h{l}.ln2.g"), v(f"h{l}.ln2.b"), cfg.ln_eps)
        z2f = z2.reshape(B * n, d)
        u = z2f @ v(f"h{l}.ff.w1")
        u += v(f"h{l}.ff.b1")
        g = gelu(u)
        out = (g @ v(f"h{l}.ff.w2")).reshape(B, n, d)
        out += v(f"h{l}.ff.b2")
        out += h
        cache = (z1f, c1, q, K, V, probs, m, z2f, c2, u, g, start, n) if keep else None
        return out, cache

    def decode(self, xn, teacher=None, known=None, keep_cache=False, check=True):
        """Run the grouped causal decode.

        ``xn`` is (B, N) normalised parameters.  The value fed after step i is
        ``teacher[:, i]`` when teacher forcing, else ``known[:, i]`` while the
        known prefix lasts, else the mean prediction.  Returns (preds (B, M),
        heads (B, M, K), cache).
        """
        xn = np.ascontiguousarray(xn, dtype=float)
        lay, cfg = self.layout, self.config
        B = xn.shape[0]
        M, K = lay.n_metrics, cfg.out_heads
        preds = np.empty((B, M))
        heads = np.empty((B, M, K))
        kv = [None] * cfg.layers
        caches = []
        vals, start = xn, 0
        for step in range(M):
            x0 = self.embed(vals, start)
            x = x0
            block_caches = []
            for l in range(cfg.layers):
                x, c = self._block(l, x, start, kv, keep_cache)
                block_caches.append(c)
            last = x[:, -1, :]
            hf, cf = layer_norm(last, self._v("lnf.g"), self._v("lnf.b"), cfg.ln_eps)
            hk = hf @ self._v("head.w") + self._v("head.b")
            pred = hk.mean(axis=-1)
            if check:
                check_finite(hk, "surrogate outputs")
            heads[:, step] = hk
            preds[:, step] = pred
            if keep_cache:
                caches.append((vals, start, block_caches, hf, cf, x.shape[1]))
            start += vals.shape[1]
            if step == M - 1:
                break
            if teacher is not None:
                nxt = teacher[:, step]
            elif known is not None and step < known.shape[1]:
                nxt = known[:, step]
            else:
                nxt = pred
            vals = np.ascontiguousarray(nxt, dtype=float)[:, None]
        return preds, heads, caches

    # ----------------------------------------------------------- training

    def loss(self, xn, yn, head_weights=None, backward=False):
        """Teacher-forced squared error averaged over rows, metrics and heads.

        ``head_weights`` (B, K) reweights rows per output head (bootstrap
        resampling); ones by default.  With ``backward=True`` gradients are
        accumulated into the parameters.
        """
        yn = np.asarray(yn, dtype=float)
        preds, heads, caches = self.decode(xn, teacher=yn, keep_cache=backward)
        B, M, K = heads.shape
        w = np.ones((B, K)) if head_weights is None else np.asarray(head_weights, dtype=float)
        err = heads - yn[:, :, None]
        loss = float(np.sum(w[:, None, :] * err * err) / (B * M * K))
        if not np.isfinite(loss):
            raise NonFiniteError("training loss is not finite")
        if backward:
            dheads = 2.0 * w[:, None, :] * err / (B * M * K)
            self._backward(dheads, caches)
        return loss, preds

    def _backward(self, dheads, caches):
        cfg = self.config
        d, H = cfg.d_model, cfg.heads
        P = self.params
        B = dheads.shape[0]
        T = sum(c[5] for c in caches)
        dh = d // H
        dK = [np.zeros((B, H, T, dh)) for _ in range(cfg.layers)]
        dV = [np.zeros((B, H, T, dh)) for _ in range(cfg.layers)]
        for step in reversed(range(len(caches))):
            vals, start, blocks, hf, cf, n = caches[step]
            g_head = dheads[:, step]
            P["head.w"].grad += hf.T @ g_head
            P["head.b"].grad += g_head.sum(axis=0)
            dhf = g_head @ P["head.w"].value.T
            dlast, dg, db = layer_norm_backward(dhf, cf)
            P["lnf.g"].grad += dg
            P["lnf.b"].grad += db
            dx = np.zeros((B, n, d))
            dx[:, -1, :] = dlast
            for l in reversed(range(cfg.layers)):
                dx = self._block_backward(l, dx, blocks[l], dK[l], dV[l])
            # embedding
            P["lift.w"].grad += np.einsum("bn,bnd->d", vals, dx)
            P["lift.b"].grad += dx.sum(axis=(0, 1))
            P["pos"].grad[start:start + n] += dx.sum(axis=0)

    def _block_backward(self, l, dout, cache, dK, dV):
        z1f, c1, q, K, V, probs, m, z2f, c2, u, g, start, n = cache
        cfg = self.config
        d = cfg.d_model
        B = dout.shape[0]
        P = self.params
        pre = f"h{l}."
        # feed-forward
        dof = dout.reshape(B * n, d)
        P[pre + "ff.w2"].grad += g.T @ dof
        P[pre + "ff.b2"].grad += dof.sum(axis=0)
        du = gelu_backward(dof @ P[pre + "ff.w2"].value.T, u)
        P[pre + "ff.w1"].grad += z2f.T @ du
        P[pre + "ff.b1"].grad += du.sum(axis=0)
        dz2 = (du @ P[pre + "ff.w1"].value.T).reshape(B, n, d)
        dh_ln, dg2, db2 = layer_norm_backward(dz2, c2)
        P[pre + "ln2.g"].grad += dg2
        P[pre + "ln2.b"].grad += db2
        dh = dout + dh_ln
        # attention
        dhf = dh.reshape(B * n, d)
        P[pre + "attn.w_o"].grad += m.T @ dhf
        P[pre + "attn.b_o"].grad += dhf.sum(axis=0)
        dm = (dhf @ P[pre + "attn.w_o"].value.T).reshape(B, n, d)
        da = split_heads(dm, cfg.heads)
        dq, dKs, dVs = attention_core_backward(da, q, K, V, probs)
        L = K.shape[-2]
        dK[:, :, :L] += dKs
        dV[:, :, :L] += dVs
        dk_own = dK[:, :, start:start + n]
        dv_own = dV[:, :, start:start + n]
        dqkv = np.concatenate([merge_heads(dq), merge_heads(dk_own), merge_heads(dv_own)],
                              axis=-1).reshape(B * n, 3 * d)
        P[pre + "attn.w_qkv"].grad += z1f.T @ dqkv
        P[pre + "attn.b_qkv"].grad += dqkv.sum(axis=0)
        dz1 = (dqkv @ P[pre + "attn.w_qkv"].value.T).reshape(B, n, d)
        dx_ln, dg1, db1 = layer_norm_backward(dz1, c1)
        P[pre + "ln1.g"].grad += dg1
        P[pre + "ln1.b"].grad += db1
        return dh + dx_ln

    def tie_heads(self):
        """Make every output head a copy of head 0 (test rig)."""
        w, b = self.params["head.w"].value, self.params["head.b"].value
        w[:] = w[:, :1]
        b[:] = b[0]


# ---------------------------------------------------------- checkpoints


@dataclass
class SurrogateCheckpoint:
    model: InsightModel
    norm: NormStats
    topology: str
    technology: str
    metadata: dict = field(default_factory=dict)
    kind = "insight"

    @property
    def layout(self) -> SequenceLayout:
        return self.model.layout

    @property
    def config(self) -> InsightConfig:
        return self.model.config

    def copy(self) -> "SurrogateCheckpoint":
        return SurrogateCheckpoint(self.model.copy(), NormStats.from_dict(self.norm.to_dict()),
                                   self.topology, self.technology, json.loads(json.dumps(self.metadata)))

    def header(self):
        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "layout": asdict(self.layout),
            "norm": self.norm.to_dict(),
            "topology": self.topology,
            "technology": self.technology,
            "metadata": self.metadata,
        }

    def weights(self):
        return self.model.weights()


@dataclass
class FCEnsembleConfig:
    hidden: tuple[int, ...] = (200, 200, 200, 200, 200)
    members: int = 7
    activation: str = "relu"
    lr: float = 1e-3

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.members < 1:
            raise ValueError("ensemble needs at least one member")


class FCEnsemble:
    """Independent fully-connected nets predicting all metrics in one shot."""

    def __init__(self, config: FCEnsembleConfig, n_in: int, n_out: int, seed=0):
        self.config = config
        self.seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(config.members)]
        self.net = MLP((n_in,) + config.hidden + (n_out,), config.activation,
                       members=config.members, seeds=self.seeds)

    @property
    def params(self):
        return self.net.params

    def parameters(self):
        return self.net.parameters()

    def predict_members(self, xn):
        """(E, B, M) normalised predictions."""
        return self.net.forward(np.asarray(xn, dtype=float))


@dataclass
class FCEnsembleCheckpoint:
    ensemble: FCEnsemble
    norm: NormStats
    topology: str
    technology: str
    metric_names: list[str]
    param_names: list[str]
    metadata: dict = field(default_factory=dict)
    kind = "fc_ensemble"

    def header(self):
        return {
            "kind": self.kind,
            "config": asdict(self.ensemble.config),
            "seeds": self.ensemble.seeds,
            "layout": {"param_names": self.param_names, "metric_names": self.metric_names},
            "norm": self.norm.to_dict(),
            "topology": self.topology,
            "technology": self.technology,
            "metadata": self.metadata,
        }

    def weights(self):
        return {k: p.value for k, p in self.ensemble.params.items()}


def save_checkpoint(ckpt, path):
    """Binary layout: magic, u32 version, u64 header length, JSON header, float64 LE blob."""
    weights = ckpt.weights()
    manifest, offset = [], 0
    for name, arr in weights.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = ckpt.header()
    header["manifest"] = manifest
    header["tool_version"] = __version__
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for arr in weights.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    weights = {}
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        weights[entry["name"]] = np.frombuffer(raw[start:start + 8 * size], dtype="<f8") \
            .reshape(entry["shape"]).astype(float)
    norm = NormStats.from_dict(header["norm"])
    if header["kind"] == "insight":
        model = InsightModel(InsightConfig(**header["config"]), SequenceLayout(**header["layout"]))
        model.load_weights(weights)
        return SurrogateCheckpoint(model, norm, header["topology"], header["technology"],
                                   header["metadata"])
    if header["kind"] == "fc_ensemble":
        cfg = header["config"]
        cfg = FCEnsembleConfig(tuple(cfg["hidden"]), cfg["members"], cfg["activation"], cfg["lr"])
        lay = header["layout"]
        ens = FCEnsemble(cfg, len(lay["param_names"]), len(lay["metric_names"]))
        ens.seeds = header["seeds"]
        for k, p in ens.params.items():
            p.value[...] = weights[k]
        return FCEnsembleCheckpoint(ens, norm, header["topology"], header["technology"],
                                    lay["metric_names"], lay["param_names"], header["metadata"])
    raise ValueError(f"unknown checkpoint kind {header['kind']!r}")


# ------------------------------------------------------- inference API


def _as_batch(a, width):
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    return a.reshape(-1, width), single


def embed_sequence(ckpt: SurrogateCheckpoint, design, metrics_so_far=()):
    """Embeddings (T, d) of one normalised design plus a normalised metric prefix."""
    lay = ckpt.layout
    prefix = np.asarray(metrics_so_far, dtype=float).reshape(-1)
    if prefix.size > lay.n_metrics:
        raise ValueError("metric prefix longer than the number of metrics")
    prefix = prefix[:lay.n_metrics - 1]
    tokens = np.concatenate([np.asarray(design, dtype=float).reshape(-1), prefix])[None, :]
    return ckpt.model.embed(tokens, 0)[0]


def forward_teacher_forced(ckpt: SurrogateCheckpoint, design_n, target_n):
    """Teacher-forced predictions and loss, all in normalised space."""
    xn, single = _as_batch(design_n, ckpt.layout.n_params)
    yn, _ = _as_batch(target_n, ckpt.layout.n_metrics)
    preds, _, _ = ckpt.model.decode(xn, teacher=yn)
    loss = float(np.mean((preds - yn) ** 2))
    return (preds[0] if single else preds), loss


def rollout(ckpt: SurrogateCheckpoint, design, known_prefix=None, normalized=False):
    """Greedy autoregressive prediction of all M metrics, known prefix echoed.

    ``design`` and ``known_prefix`` are physical values (set ``normalized``
    for normalised ones); the result is in the same space, layout order.
    """
    lay, norm = ckpt.layout, ckpt.norm
    x, single = _as_batch(design, lay.n_params)
    xn = x if normalized else norm.normalize_x(x)
    kn, k = _known_prefix(ckpt, known_prefix, len(xn), normalized)
    preds, _, _ = ckpt.model.decode(xn, known=kn)
    if k:
        preds[:, :k] = kn
    out = preds if normalized else norm.denormalize_y(preds)
    if k and not normalized:
        out[:, :k] = np.asarray(known_prefix, dtype=float).reshape(len(xn), k)
    return out[0] if single else out


def _known_prefix(ckpt, known_prefix, B, normalized):
    lay, norm = ckpt.layout, ckpt.norm
    if known_prefix is None:
        return None, 0
    kp = np.asarray(known_prefix, dtype=float)
    kp = kp.reshape(B, -1) if kp.size else np.zeros((B, 0))
    k = kp.shape[1]
    if k > lay.n_metrics:
        raise ValueError("known prefix longer than the number of metrics")
    if k == 0:
        return None, 0
    if normalized:
        return kp, k
    full = np.ones((B, lay.n_metrics))
    full[:, :k] = kp
    return norm.normalize_y(full)[:, :k], k


@dataclass
class UncertainPrediction:
    mean: np.ndarray    # physical units, layout order
    std: np.ndarray     # across heads, normalised units
    heads: np.ndarray   # (..., M, K) normalised per-head predictions


def rollout_with_uncertainty(ckpt: SurrogateCheckpoint, design, known_prefix=None):
    """Mean and across-head spread per metric; the mean path is fed back."""
    K = ckpt.config.out_heads
    if K < 2:
        raise ValueError("uncertainty needs at least two output heads")
    lay, norm = ckpt.layout, ckpt.norm
    x, single = _as_batch(design, lay.n_params)
    xn = norm.normalize_x(x)
    kn, k = _known_prefix(ckpt, known_prefix, len(xn), False)
    preds, heads, _ = ckpt.model.decode(xn, known=kn)
    std = _spread(heads)
    if k:
        preds[:, :k] = kn
        std[:, :k] = 0.0
        heads[:, :k, :] = kn[:, :, None]
    mean = norm.denormalize_y(preds)
    if k:
        mean[:, :k] = np.asarray(known_prefix, dtype=float).reshape(len(xn), k)
    if single:
        return UncertainPrediction(mean[0], std[0], heads[0])
    return UncertainPrediction(mean, std, heads)


def _spread(a):
    """Std over the last axis, measured from member 0 so equal members give exactly 0."""
    return (a - a[..., :1]).std(axis=-1)


def fc_ensemble_predict(baseline: FCEnsembleCheckpoint, design):
    """(mean physical metrics, per-metric std across members in normalised units)."""
    x, single = _as_batch(design, len(baseline.param_names))
    out = baseline.ensemble.predict_members(baseline.norm.normalize_x(x))
    mean_n = out.mean(axis=0)
    std = _spread(np.moveaxis(out, 0, -1))
    mean = baseline.norm.denormalize_y(mean_n)
    return (mean[0], std[0]) if single else (mean, std)


def to_topology_order(names_from, names_to, Y):
    cols = [list(names_from).index(n) for n in names_to]
    return np.asarray(Y)[..., cols]
