"""Dense float64 kernels for the hybrid network: forward ops, their backward
passes, a central-difference gradient checker and Adam.

Every forward op accepts an optional leading batch axis. Backward functions
take the upstream gradient plus whatever the forward pass needs and return
gradients in the same order as the forward arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, OptimizerError, ShapeError

BCE_EPS = 1e-12


# -- convolution -------------------------------------------------------------


def conv1d_valid(x, kernel, bias):
    """Valid 1-D convolution.

    ``x`` is ``(T, d)`` or ``(B, T, d)``, ``kernel`` is ``(w, d, c)`` and the
    result is ``(..., T - w + 1, c)`` with
    ``out[t, j] = bias[j] + sum_{i, k} kernel[i, k, j] * x[t + i, k]``.
    """
    x = np.asarray(x, dtype=np.float64)
    w, d, c = kernel.shape
    if x.shape[-1] != d:
        raise ShapeError(f"conv input width {x.shape[-1]} != kernel depth {d}")
    if bias.shape != (c,):
        raise ShapeError(f"conv bias shape {bias.shape} != ({c},)")
    T = x.shape[-2]
    if T < w:
        raise ShapeError(f"sequence length {T} shorter than filter width {w}")
    n_out = T - w + 1
    # one GEMM against every filter tap, then shift-and-add the taps
    taps = (x.reshape(-1, d) @ kernel.transpose(1, 0, 2).reshape(d, w * c)).reshape(*x.shape[:-1], w, c)
    out = taps[..., 0:n_out, 0, :] + bias
    for i in range(1, w):
        out += taps[..., i : i + n_out, i, :]
    return out


def conv1d_valid_backward(grad_out, x, kernel):
    x = np.asarray(x, dtype=np.float64)
    w, d, c = kernel.shape
    n_out = grad_out.shape[-2]
    g2 = grad_out.reshape(-1, c)
    grad_kernel = np.empty_like(kernel)
    for i in range(w):
        grad_kernel[i] = x[..., i : i + n_out, :].reshape(-1, d).T @ g2
    grad_bias = g2.sum(axis=0)
    taps = (g2 @ kernel.transpose(2, 0, 1).reshape(c, w * d)).reshape(*grad_out.shape[:-1], w, d)
    grad_x = np.zeros_like(x)
    for i in range(w):
        grad_x[..., i : i + n_out, :] += taps[..., i, :]
    return grad_x, grad_kernel, grad_bias


# -- pooling -----------------------------------------------------------------


def max_over_time(x, valid=None):
    """Per-channel max over the time axis.

    Returns ``(pooled, argmax)``; ties resolve to the smallest time index.
    ``valid`` optionally gives, per batch row, how many leading positions
    take part (the rest are treated as absent).
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-2]
    if T == 0:
        raise ShapeError("max_over_time needs at least one time step")
    if valid is not None:
        valid = np.asarray(valid)
        if np.any(valid < 1) or np.any(valid > T):
            raise ShapeError("valid lengths must lie in [1, T]")
        positions = np.arange(T)
        absent = positions[None, :] >= valid[:, None]
        x = np.where(absent[..., None], -np.inf, x)
    argmax = np.argmax(x, axis=-2)
    pooled = np.take_along_axis(x, argmax[..., None, :], axis=-2)[..., 0, :]
    return pooled, argmax


def max_over_time_backward(grad_out, argmax, length):
    shape = grad_out.shape[:-1] + (length, grad_out.shape[-1])
    grad = np.zeros(shape)
    np.put_along_axis(grad, argmax[..., None, :], grad_out[..., None, :], axis=-2)
    return grad


def segment_max(x, starts, counts):
    """Max over rows of ``x`` (T, C) for segments ``[starts[s], starts[s] + counts[s])``.

    Returns ``(pooled, argmax)`` with argmax as row indices into ``x``;
    ties resolve to the smallest index.
    """
    x = np.asarray(x, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if len(starts) == 0:
        return np.zeros((0, x.shape[-1])), np.zeros((0, x.shape[-1]), dtype=np.int64)
    if np.any(counts < 1) or np.any(starts < 0) or np.any(starts + counts > len(x)):
        raise ShapeError("segments must be non-empty and lie inside x")
    offsets = np.cumsum(counts) - counts
    rows = np.arange(counts.sum()) + np.repeat(starts - offsets, counts)
    xv = x[rows]
    pooled = np.maximum.reduceat(xv, offsets, axis=0)
    hit = xv == np.repeat(pooled, counts, axis=0)
    argmax = np.minimum.reduceat(np.where(hit, rows[:, None], len(x)), offsets, axis=0)
    return pooled, argmax


def segment_max_backward(grad_out, argmax, length):
    grad = np.zeros((length, grad_out.shape[-1]))
    cols = np.broadcast_to(np.arange(grad_out.shape[-1]), argmax.shape)
    # segments never overlap, so each (row, channel) receives at most one value
    grad[argmax, cols] = grad_out
    return grad


# -- dense -------------------------------------------------------------------


def dense(x, weight, bias):
    """``W @ x + b`` for ``x`` of shape ``(n,)`` or ``(B, n)``."""
    x = np.asarray(x, dtype=np.float64)
    m, n = weight.shape
    if x.shape[-1] != n or bias.shape != (m,):
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


def dense_backward(grad_out, x, weight):
    g2 = np.atleast_2d(grad_out)
    x2 = np.atleast_2d(x)
    grad_weight = g2.T @ x2
    grad_bias = g2.sum(axis=0)
    grad_x = grad_out @ weight
    return grad_x, grad_weight, grad_bias


# -- activations -------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    # subgradient 0 at x == 0
    return grad_out * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, out):
    return grad_out * out * (1.0 - out)


def activation(kind, x):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(kind, grad_out, x, out):
    if kind == "relu":
        return relu_backward(grad_out, x)
    if kind == "sigmoid":
        return sigmoid_backward(grad_out, out)
    raise ConfigError(f"unknown activation {kind!r}")


# -- dropout -----------------------------------------------------------------


def dropout(x, rate, rng, mode):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None in infer mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    keep = rng.random(np.shape(x)) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# -- loss --------------------------------------------------------------------


def bce_sum(probs, labels):
    """Summed binary cross-entropy, probabilities clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_sum_backward(probs, labels):
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return (p - y) / (p * (1.0 - p))


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    for name, g in grads.items():
        if name not in params:
            raise OptimizerError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")

    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g is None:
            new_params[name], new_m[name], new_v[name] = p, m, v
            continue
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic, numeric, floor=1e-4):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
    turning round-off into huge ratios."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    computation: Callable[[dict], tuple[float, dict]],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``computation(inputs) -> (scalar, grads)`` where ``grads`` maps a subset of
    input names to arrays of matching shape; names absent from ``grads`` are
    skipped. ``max_coords`` caps the number of coordinates checked per input
    (sampled without replacement).
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, grads = computation(base)
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, ("", ())
    n_checked = 0
    for name in sorted(grads):
        arr = base[name]
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        analytic = np.asarray(grads[name], dtype=np.float64).ravel()
        flat = arr.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp, _ = computation(base)
            flat[c] = orig - h
            fm, _ = computation(base)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = float(relative_error(analytic[c], numeric, floor))
            n_checked += 1
            if err > worst_err or math.isnan(err):
                worst_err = err if not math.isnan(err) else math.inf
                worst = (name, np.unravel_index(c, arr.shape))
    return GradCheckReport(worst_err, worst, n_checked, tol)
