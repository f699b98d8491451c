"""Dense float64 building blocks with hand-written adjoints.

Arrays are plain ``numpy.ndarray`` objects of dtype float64 (row-major).
Every differentiable op comes as a ``forward`` / ``*_backward`` pair; the
backward takes the upstream gradient plus whatever the forward cached and
returns gradients for its inputs.  There is no tape: models compose these
pairs explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64
GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5
ADAM_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    trainable: bool = True

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError("gradient shape must match value shape")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


# ---------------------------------------------------------------- matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def matmul_backward(dout, a, b):
    """Gradients of ``a @ b`` for 2-D ``a`` and ``b``."""
    return dout @ b.T, a.T @ dout


def linear(x, w, b=None):
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, w):
    """Returns (dx, dw, db) for ``y = x @ w + b`` with x of shape (..., din)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


# ----------------------------------------------------------- activations


def gelu(x):
    # tanh approximation
    x = np.asarray(x, dtype=DTYPE)
    t = np.multiply(x, x, out=np.empty_like(x))
    t *= 0.044715
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_backward(dy, x):
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    du = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def tanh_backward(dy, y):
    """Backward of tanh given its *output* ``y``."""
    return dy * (1.0 - y * y)


def softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    z = s - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ------------------------------------------------------------ layer norm


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalise over the last axis.  Returns (y, cache)."""
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"layer_norm: last dim {x.shape[-1]} != {gain.shape[-1]}")
    d = x.shape[-1]
    xhat = x - np.sum(x, axis=-1, keepdims=True) / d
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    y = xhat * gain
    y += bias
    return y, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    flat_dy = dy.reshape(-1, d)
    flat_xhat = xhat.reshape(-1, d)
    dgain = (flat_dy * flat_xhat).sum(axis=0)
    dbias = flat_dy.sum(axis=0)
    g = dy * gain
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# ------------------------------------------------------------- attention


def split_heads(x, heads):
    """(..., T, d) -> (..., heads, T, d // heads)."""
    *lead, t, d = x.shape
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    y = x.reshape(*lead, t, heads, d // heads)
    return np.swapaxes(y, -2, -3)


def merge_heads(x):
    """(..., heads, T, dh) -> (..., T, heads * dh)."""
    y = np.swapaxes(x, -2, -3)
    *lead, t, h, dh = y.shape
    return y.reshape(*lead, t, h * dh)


def attention_core(q, k, v, q_start=0):
    """Masked scaled dot-product attention.

    ``q`` is (..., H, n, dh); ``k`` and ``v`` are (..., H, L, dh).  Query row
    ``i`` sits at absolute position ``q_start + i`` and sees keys ``j`` with
    ``j <= q_start + i``.  Returns (out, probs).
    """
    n, L = q.shape[-2], k.shape[-2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    visible = np.arange(L)[None, :] <= (q_start + np.arange(n))[:, None]
    s = np.where(visible, s, -np.inf)
    p = softmax(s, axis=-1)
    return np.matmul(p, v), p


def attention_core_backward(dout, q, k, v, p):
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = np.matmul(np.swapaxes(p, -1, -2), dout)
    dp = np.matmul(dout, np.swapaxes(v, -1, -2))
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
    return dq, dk, dv


def causal_self_attention(x, weights: Mapping[str, np.ndarray], heads: int = 4):
    """Multi-head causal self-attention on a (T, d) or (B, T, d) input.

    ``weights`` holds ``w_qkv`` (d, 3d), ``b_qkv`` (3d), ``w_o`` (d, d) and
    ``b_o`` (d).  Columns of the fused projection are split per head.
    """
    d = x.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    qkv = linear(x, weights["w_qkv"], weights["b_qkv"])
    q, k, v = (split_heads(qkv[..., i * d:(i + 1) * d], heads) for i in range(3))
    a, p = attention_core(q, k, v)
    merged = merge_heads(a)
    y = linear(merged, weights["w_o"], weights["b_o"])
    return y, (x, q, k, v, p, merged, weights, heads)


def causal_self_attention_backward(dy, cache):
    x, q, k, v, p, merged, weights, heads = cache
    dmerged, dw_o, db_o = linear_backward(dy, merged, weights["w_o"])
    da = split_heads(dmerged, heads)
    dq, dk, dv = attention_core_backward(da, q, k, v, p)
    dqkv = np.concatenate([merge_heads(dq), merge_heads(dk), merge_heads(dv)], axis=-1)
    dx, dw_qkv, db_qkv = linear_backward(dqkv, x, weights["w_qkv"])
    return dx, {"w_qkv": dw_qkv, "b_qkv": db_qkv, "w_o": dw_o, "b_o": db_o}


# ------------------------------------------------------------------ MLP


class MLP:
    """Stack of ``members`` independent fully-connected nets evaluated together.

    Weights have shape (members, din, dout); inputs are (members, B, din) or
    (B, din), in which case the same batch is fed to every member.
    """

    def __init__(self, sizes, activation="relu", members=1, seeds=None,
                 init="he", out_scale=1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.members = int(members)
        if seeds is None:
            seeds = list(range(self.members))
        if len(seeds) != self.members:
            raise ValueError("need one seed per member")
        self.params: dict[str, Parameter] = {}
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            din, dout = self.sizes[i], self.sizes[i + 1]
            w = np.empty((self.members, din, dout))
            for e, s in enumerate(seeds):
                rng = np.random.default_rng([int(s), i])
                std = math.sqrt(2.0 / din) if init == "he" else 1.0 / math.sqrt(din)
                if i == n_layers - 1:
                    std *= out_scale
                w[e] = rng.normal(0.0, std, (din, dout))
            self.params[f"w{i}"] = Parameter(w)
            self.params[f"b{i}"] = Parameter(np.zeros((self.members, 1, dout)))
        self._cache = None

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def _act(self, z):
        if self.activation == "relu":
            return relu(z)
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "gelu":
            return gelu(z)
        raise ValueError(f"unknown activation {self.activation!r}")

    def _act_backward(self, dy, z, a):
        if self.activation == "relu":
            return relu_backward(dy, z)
        if self.activation == "tanh":
            return tanh_backward(dy, a)
        return gelu_backward(dy, z)

    def forward(self, x, keep_cache=False):
        if x.ndim == 2:
            x = np.broadcast_to(x, (self.members,) + x.shape)
        acts, pre = [x], []
        h = x
        for i in range(self.n_layers):
            z = np.matmul(h, self.params[f"w{i}"].value) + self.params[f"b{i}"].value
            if i < self.n_layers - 1:
                pre.append(z)
                h = self._act(z)
                acts.append(h)
            else:
                h = z
        if keep_cache:
            self._cache = (acts, pre)
        return h

    def backward(self, dout):
        """Accumulates parameter gradients; returns gradient wrt the input."""
        acts, pre = self._cache
        g = dout
        for i in reversed(range(self.n_layers)):
            a_in = acts[i]
            w = self.params[f"w{i}"]
            w.grad += np.matmul(np.swapaxes(a_in, -1, -2), g)
            self.params[f"b{i}"].grad += g.sum(axis=1, keepdims=True)
            g = np.matmul(g, np.swapaxes(w.value, -1, -2))
            if i > 0:
                g = self._act_backward(g, pre[i - 1], acts[i])
        return g

    def parameters(self):
        return list(self.params.values())


# ------------------------------------------------------------ optimiser


@dataclass
class CosineSchedule:
    """lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / T)) / 2, held at lr_min past T."""

    lr0: float = 1e-3
    total_steps: int | None = None
    lr_min: float = 0.0

    def __call__(self, t: int) -> float:
        if not self.total_steps:
            return self.lr0
        t = min(max(t, 0), self.total_steps)
        if t == self.total_steps:
            return self.lr_min
        return self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (
            1.0 + math.cos(math.pi * t / self.total_steps))


class Adam:
    """Adam with bias correction and a cosine-annealed learning rate.

    ``step`` uses ``lr(t)`` where ``t`` counts the steps already taken, so the
    first update is taken at the base rate.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=ADAM_EPS,
                 total_steps=None, lr_min=0.0):
        self.params = [p for p in params if p.trainable]
        self.schedule = CosineSchedule(lr, total_steps, lr_min)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    @property
    def lr(self):
        return self.schedule(self.t)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        lr = self.schedule(self.t)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


def adam_step(params, state: Adam):
    """Functional alias: apply one update of ``state`` to ``params``."""
    if [id(p) for p in state.params] != [id(p) for p in params if p.trainable]:
        raise ValueError("optimizer state does not belong to these parameters")
    return state.step()


# ------------------------------------------------------------ grad check


@dataclass
class GradCheckReport:
    block_errors: dict[str, float]
    n_checked: int
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self):
        for name, err in self.block_errors.items():
            yield f"{name:<28s} {err:.3e}"


def relative_error(a, n, floor=1e-6):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def grad_check(loss_fn: Callable[..., float], params: Mapping[str, Parameter],
               epsilon: float = 1e-5, tolerance: float = 1e-4,
               max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(backward=True)`` must zero the gradients, run forward and
    backward and return the loss; ``loss_fn(backward=False)`` only evaluates.
    With ``max_entries`` set, that many entries per block are checked: the
    largest-gradient entry plus a seeded random sample.
    """
    base = loss_fn(backward=True)
    if not np.isfinite(base):
        raise NonFiniteError("loss is not finite")
    analytic = {k: p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errors, total = {}, 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        g = analytic[name].reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.unique(np.concatenate([
                [int(np.argmax(np.abs(g)))],
                rng.choice(flat.size, size=max_entries - 1, replace=False)]))
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            lp = loss_fn(backward=False)
            flat[i] = old - epsilon
            lm = loss_fn(backward=False)
            flat[i] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(f"loss not finite while perturbing {name}[{i}]")
            num = (lp - lm) / (2 * epsilon)
            worst = max(worst, float(relative_error(g[i], num, floor)))
        errors[name] = worst
        total += len(idx)
    return GradCheckReport(errors, total, tolerance)
