"""Distortion metrics, their local quadratic forms, and the h() wrapper.

Each metric D gives a per-sample distance and, around any point x, a matrix
A(x) with D(x, x + dx) - D(x, x) ~= dx^T A(x) dx for small dx.  The pair is
what the geometric audits consume: distances drive training, quadratic forms
define the inner product the latent space is expected to preserve.

Supported metrics:

* ``mse``  -- mean squared error over coordinates; A = I / M.
* ``ssim`` -- one minus the mean structural-similarity index over 1-D
  sliding windows (luminance and structure terms, no contrast term);
  A is assembled from per-window mean/variance forms.
* ``bce``  -- binary cross entropy summed over coordinates, for inputs in
  [0, 1]; A = diag((1/x + 1/(1-x)) / 2), and the baseline D(x, x) is the
  entropy of x rather than zero.

``h_apply`` is the reconstruction-loss wrapper: identity ("d") or the
guarded logarithm ("log", adds delta before taking log).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericError, Tape, Var, as_tensor

METRIC_KINDS = ("mse", "ssim", "bce")
H_KINDS = ("d", "log")


@dataclass(frozen=True)
class MetricSpec:
    """Which distortion to use and its fixed numerical knobs."""

    kind: str = "mse"
    window: int = 11
    stabilizer: float = 1e-8
    bce_clamp: float = 1e-6

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.window < 2:
            raise ValueError("ssim window must be at least 2")
        if self.stabilizer <= 0:
            raise ValueError("stabilizer must be positive")
        if not 0 < self.bce_clamp < 0.5:
            raise ValueError("bce_clamp must lie in (0, 0.5)")


@dataclass(frozen=True)
class HKind:
    """Reconstruction wrapper: plain distance or guarded log distance."""

    kind: str = "log"
    delta: float = 1e-12

    def __post_init__(self):
        if self.kind not in H_KINDS:
            raise ValueError(f"unknown h kind {self.kind!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError(f"expected 2-D batches, got shapes {x.shape} and {y.shape}")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def distance_node(tape: Tape, x: Var, y: Var, metric: MetricSpec) -> Var:
    """Per-sample distance D(x, y) as a graph node, shape (B,).

    BCE assumes the caller has already clamped y into (0, 1); the clamp
    lives with the decoder so its zero-gradient region is explicit there.
    """
    _check_pair(x.value, y.value)
    if metric.kind == "mse":
        return tape.mean(tape.square(tape.sub(x, y)), axis=1)
    if metric.kind == "bce":
        pos = tape.mul(x, tape.log(y))
        neg = tape.mul(tape.sub(1.0, x), tape.log(tape.sub(1.0, y)))
        return tape.neg(tape.sum(tape.add(pos, neg), axis=1))
    # ssim: window stride is 1, variance is the population form (/W)
    wx = tape.sliding_windows(x, metric.window)
    wy = tape.sliding_windows(y, metric.window)
    n_win = wx.value.shape[1]
    mx_k = tape.mean(wx, axis=2, keepdims=True)
    my_k = tape.mean(wy, axis=2, keepdims=True)
    cx = tape.sub(wx, mx_k)
    cy = tape.sub(wy, my_k)
    vx = tape.mean(tape.square(cx), axis=2)
    vy = tape.mean(tape.square(cy), axis=2)
    cov = tape.mean(tape.mul(cx, cy), axis=2)
    mx = tape.reshape(mx_k, (x.value.shape[0], n_win))
    my = tape.reshape(my_k, (x.value.shape[0], n_win))
    # stabilizer enters numerator and denominator alike so SSIM(x, x) == 1
    eps = metric.stabilizer
    lum = tape.div(
        tape.add(tape.mul(2.0, tape.mul(mx, my)), eps),
        tape.add(tape.add(tape.square(mx), tape.square(my)), eps),
    )
    struct = tape.div(
        tape.add(tape.mul(2.0, cov), eps), tape.add(tape.add(vx, vy), eps)
    )
    ssim_map = tape.mul(lum, struct)
    return tape.sub(1.0, tape.mean(ssim_map, axis=1))


def distance(x, y, metric: MetricSpec) -> np.ndarray:
    """Per-sample distance D(x, y), shape (B,)."""
    x = as_tensor(x, "x")
    y = as_tensor(y, "y")
    if metric.kind == "bce":
        if np.any(x < 0) or np.any(x > 1):
            raise NumericError("bce reference values must lie in [0, 1]")
        if np.any(y <= 0) or np.any(y >= 1):
            raise NumericError("bce candidate values must lie strictly inside (0, 1)")
    tape = Tape()
    return distance_node(tape, tape.const(x), tape.const(y), metric).value


def quadratic_form(x, metric: MetricSpec) -> np.ndarray:
    """A(x) for one sample x of shape (M,): D(x, x+dx) - D(x, x) ~= dx^T A dx."""
    x = as_tensor(x, "x")
    if x.ndim != 1:
        raise ValueError(f"quadratic_form expects one sample, got shape {x.shape}")
    m = x.shape[0]
    if metric.kind == "mse":
        return np.eye(m) / m
    if metric.kind == "bce":
        if np.any(x <= 0) or np.any(x >= 1):
            raise NumericError("bce quadratic form needs x strictly inside (0, 1)")
        return np.diag(0.5 * (1.0 / x + 1.0 / (1.0 - x)))
    w = metric.window
    if m < w:
        raise ValueError(f"sample length {m} shorter than ssim window {w}")
    n_win = m - w + 1
    eps = metric.stabilizer
    form_mean = np.ones((w, w)) / w**2
    form_var = np.eye(w) / w - form_mean
    a = np.zeros((m, m))
    for j in range(n_win):
        seg = x[j : j + w]
        mu = seg.mean()
        var = seg.var()
        block = form_mean / (2.0 * mu**2 + eps) + form_var / (2.0 * var + eps)
        a[j : j + w, j : j + w] += block
    return a / n_win


def metric_bilinear(x, v, w, metric: MetricSpec) -> float:
    """v^T A(x) w for displacement vectors v, w at the point x."""
    a = quadratic_form(x, metric)
    v = as_tensor(v, "v")
    w = as_tensor(w, "w")
    return float(v @ a @ w)


def h_apply(d, h: HKind) -> np.ndarray:
    """Apply the reconstruction wrapper elementwise."""
    d = as_tensor(d, "d")
    if h.kind == "d":
        return d
    if np.any(d + h.delta <= 0):
        raise NumericError("log wrapper needs d + delta > 0")
    return np.log(d + h.delta)


def h_node(tape: Tape, d: Var, h: HKind) -> Var:
    """Graph version of :func:`h_apply`."""
    if h.kind == "d":
        return d
    return tape.log(tape.add(d, h.delta))


def h_aggregate(d, h: HKind) -> float:
    """Batch distance summary consistent with the wrapper.

    Plain mean for h = d; for h = log the geometric mean (the value whose
    wrapped loss equals the batch mean of wrapped losses).
    """
    d = as_tensor(d, "d")
    if h.kind == "d":
        return float(d.mean())
    return float(np.exp(np.log(d + h.delta).mean()) - h.delta)
