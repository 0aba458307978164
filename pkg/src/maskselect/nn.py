"""Dense kernels with hand-written backward passes, AdamW, and gradient checking.

Everything runs in float64; the model is small and fixed, so each operation
carries an explicit backward function instead of an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidHeadCount,
    InvalidSchedule,
    InvalidTemperature,
    MissingGradient,
    NonFiniteEvaluation,
)

_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEvaluation(f"{name} contains NaN or Inf")
    return arr


# ---------------------------------------------------------------- linear

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b for x of shape (n, d_in)."""
    if x.shape[1] != w.shape[0]:
        raise DimensionMismatch(f"linear: x cols {x.shape[1]} != w rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionMismatch(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b, (x, w)


def linear_backward(cache, dy: np.ndarray):
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------- softmax

def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    if tau <= 0.0:
        raise InvalidTemperature(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_temp_backward(probs: np.ndarray, dprobs: np.ndarray, tau: float) -> np.ndarray:
    """Gradient w.r.t. the logits given the forward output `probs`."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner) / tau


# ---------------------------------------------------------------- layer norm

LAYER_NORM_EPS = 1e-5


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                       eps: float = LAYER_NORM_EPS):
    """Row-wise normalization to zero mean / unit variance, then affine."""
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionMismatch(
            f"layer_norm: gain/bias must have shape ({x.shape[1]},)"
        )
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(cache, dy: np.ndarray):
    xhat, inv_std, gain = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------- gelu

def gelu_forward(x: np.ndarray):
    u = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(cache, dy: np.ndarray) -> np.ndarray:
    x, t = cache
    du = _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------- attention

@dataclass
class AttentionParams:
    """Projection weights of one multi-head attention layer."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    heads: int


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def multi_head_attention(queries: np.ndarray, keys: np.ndarray, values: np.ndarray,
                         params: AttentionParams, mask: Optional[np.ndarray] = None):
    """Scaled dot-product attention per head, concatenated and projected.

    Self-attention is the call with queries == keys == values. An optional
    additive mask (query rows x key rows, 0 or -inf) restricts which keys
    each query may attend to.
    """
    d = params.wq.shape[0]
    if d % params.heads != 0:
        raise InvalidHeadCount(f"model dim {d} not divisible by {params.heads} heads")
    if queries.shape[1] != d or keys.shape[1] != d or values.shape[1] != d:
        raise DimensionMismatch("attention inputs must have model dim columns")
    q, q_cache = linear_forward(queries, params.wq, params.bq)
    k, k_cache = linear_forward(keys, params.wk, params.bk)
    v, v_cache = linear_forward(values, params.wv, params.bv)
    qh = _split_heads(q, params.heads)
    kh = _split_heads(k, params.heads)
    vh = _split_heads(v, params.heads)
    scale = 1.0 / np.sqrt(d // params.heads)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    if mask is not None:
        scores = scores + mask[None, :, :]
    probs = softmax_temp(scores, 1.0)
    ctx = _merge_heads(probs @ vh)
    out, o_cache = linear_forward(ctx, params.wo, params.bo)
    cache = (q_cache, k_cache, v_cache, o_cache, qh, kh, vh, probs, scale, params.heads)
    return out, cache


@dataclass
class AttentionGrads:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray


def multi_head_attention_backward(cache, dy: np.ndarray):
    """Returns (dqueries, dkeys, dvalues, AttentionGrads)."""
    q_cache, k_cache, v_cache, o_cache, qh, kh, vh, probs, scale, heads = cache
    dctx, dwo, dbo = linear_backward(o_cache, dy)
    dctx_h = _split_heads(dctx, heads)
    dprobs = dctx_h @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx_h
    dscores = softmax_temp_backward(probs, dprobs, 1.0) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    dqueries, dwq, dbq = linear_backward(q_cache, dq)
    dkeys, dwk, dbk = linear_backward(k_cache, dk)
    dvalues, dwv, dbv = linear_backward(v_cache, dv)
    grads = AttentionGrads(dwq, dwk, dwv, dwo, dbq, dbk, dbv, dbo)
    return dqueries, dkeys, dvalues, grads


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameter tensors with matching gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, Optional[np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.params:
            raise KeyError(name)
        if self.params[name].shape != value.shape:
            raise DimensionMismatch(
                f"parameter {name!r} shape {self.params[name].shape} != {value.shape}"
            )
        self.params[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for name in self.params:
            self.grads[name] = np.zeros_like(self.params[name])

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if self.grads[name] is None:
            self.grads[name] = np.zeros_like(self.params[name])
        self.grads[name] += grad

    def scale_grads(self, factor: float) -> None:
        for name, g in self.grads.items():
            if g is not None:
                self.grads[name] = g * factor


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100
    total_steps: int = 5000


@dataclass
class OptimizerState:
    """AdamW moments plus the warmup/decay schedule position."""

    config: OptimizerConfig
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def warmup_decay_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then linear decay to 0."""
    if total_steps < 1 or warmup_steps < 0 or warmup_steps > total_steps:
        raise InvalidSchedule(
            f"invalid schedule: warmup={warmup_steps}, total={total_steps}"
        )
    if step < 0 or step > total_steps:
        raise InvalidSchedule(f"step {step} outside [0, {total_steps}]")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


def adamw_step(store: ParamStore, state: OptimizerState) -> float:
    """One decoupled-weight-decay Adam update; returns the learning rate used."""
    cfg = state.config
    state.step += 1
    t = state.step
    lr = warmup_decay_lr(min(t, cfg.total_steps), cfg.warmup_steps, cfg.total_steps,
                         cfg.base_lr)
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in store.names():
        g = store.grads[name]
        if g is None:
            raise MissingGradient(f"no gradient accumulated for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(store.params[name])
            state.v[name] = np.zeros_like(store.params[name])
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        store.params[name] = store.params[name] - lr * update - lr * cfg.weight_decay * store.params[name]
    return lr


# ---------------------------------------------------------------- gradient oracle

def finite_diff_grad(fn: Callable[[np.ndarray], float], point: np.ndarray,
                     h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    With h=None the step is 1e-4 * max(1, |x_i|) per coordinate.
    """
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        step = h if h is not None else 1e-4 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteEvaluation(f"function non-finite near coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad
