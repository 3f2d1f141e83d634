"""Dense float64 tensor math, tape-based reverse-mode autodiff, and Adam.

Tensors are C-order numpy float64 arrays throughout; ``as_tensor`` is the
validation helper that enforces dtype, layout, and finiteness.  Gradients are
computed by recording primitive operations on a :class:`Tape` during the
forward pass and replaying the records in reverse.  The primitive set is what
small fully-connected models need: affine layers, tanh/softplus/sigmoid/
softmax, elementwise arithmetic, reductions, log-sum-exp, plus Cholesky and
triangular solves for Gaussian-mixture energies and a sliding-window op for
windowed similarity metrics.

Reproducibility: all randomness flows through numpy's documented PCG64
generator (``make_rng``); independent per-task streams come from
``task_rng(seed, index)`` via SeedSequence so results do not depend on
execution order or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

ACTIVATIONS = ("tanh", "softplus", "sigmoid", "softmax", "none")


class NumericError(RuntimeError):
    """Non-finite values or a failed matrix factorization."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-order float64 array and reject non-finite entries."""
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single entropy source for a run."""
    return np.random.Generator(np.random.PCG64(seed))


def task_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for task `index` of run `seed`."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    """x such that softplus(x) = y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus_inverse needs y > 0")
    return float(y + math.log(-math.expm1(-y)))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Var:
    """A node in the computation graph: value plus gradient slot."""

    __slots__ = ("value", "grad", "_bw")

    def __init__(self, value, bw=None):
        self.value = value
        self.grad = None
        self._bw = bw

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    """Ordered record of primitive ops; creation order is topological order.

    Leaves are named parameters registered once per tape: calling ``leaf``
    twice with the same name returns the same node so gradients accumulate
    across multiple uses (e.g. a decoder applied to both z and z+noise).
    """

    def __init__(self):
        self._nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    # ---- node creation -------------------------------------------------
    def leaf(self, name: str, value: np.ndarray) -> Var:
        if name in self.leaves:
            v = self.leaves[name]
            if v.value is not value:
                raise ValueError(f"leaf {name!r} re-registered with a different tensor")
            return v
        v = Var(np.asarray(value, dtype=np.float64))
        self.leaves[name] = v
        self._nodes.append(v)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64))

    def _wrap(self, x) -> Var:
        return x if isinstance(x, Var) else self.const(x)

    def _push(self, value, bw) -> Var:
        v = Var(value, bw)
        self._nodes.append(v)
        return v

    # ---- arithmetic ----------------------------------------------------
    def add(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        out_val = a.value + b.value

        def bw(g):
            a.add_grad(_unbroadcast(g, a.value.shape))
            b.add_grad(_unbroadcast(g, b.value.shape))

        return self._push(out_val, bw)

    def sub(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        out_val = a.value - b.value

        def bw(g):
            a.add_grad(_unbroadcast(g, a.value.shape))
            b.add_grad(_unbroadcast(-g, b.value.shape))

        return self._push(out_val, bw)

    def mul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        out_val = a.value * b.value

        def bw(g):
            a.add_grad(_unbroadcast(g * b.value, a.value.shape))
            b.add_grad(_unbroadcast(g * a.value, b.value.shape))

        return self._push(out_val, bw)

    def div(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        out_val = a.value / b.value

        def bw(g):
            a.add_grad(_unbroadcast(g / b.value, a.value.shape))
            b.add_grad(_unbroadcast(-g * out_val / b.value, b.value.shape))

        return self._push(out_val, bw)

    def neg(self, a) -> Var:
        a = self._wrap(a)

        def bw(g):
            a.add_grad(-g)

        return self._push(-a.value, bw)

    def pow_const(self, a, p: float) -> Var:
        a = self._wrap(a)
        out_val = a.value ** p

        def bw(g):
            a.add_grad(g * p * a.value ** (p - 1))

        return self._push(out_val, bw)

    def square(self, a) -> Var:
        a = self._wrap(a)

        def bw(g):
            a.add_grad(g * 2.0 * a.value)

        return self._push(a.value * a.value, bw)

    def exp(self, a) -> Var:
        a = self._wrap(a)
        out_val = np.exp(a.value)

        def bw(g):
            a.add_grad(g * out_val)

        return self._push(out_val, bw)

    def log(self, a) -> Var:
        a = self._wrap(a)

        def bw(g):
            a.add_grad(g / a.value)

        return self._push(np.log(a.value), bw)

    def sqrt(self, a) -> Var:
        a = self._wrap(a)
        out_val = np.sqrt(a.value)

        def bw(g):
            a.add_grad(g * 0.5 / out_val)

        return self._push(out_val, bw)

    def clip(self, a, lo: float, hi: float) -> Var:
        """Clamp; gradient passes only where the input was inside [lo, hi]."""
        a = self._wrap(a)
        out_val = np.clip(a.value, lo, hi)
        inside = (a.value >= lo) & (a.value <= hi)

        def bw(g):
            a.add_grad(g * inside)

        return self._push(out_val, bw)

    # ---- activations ---------------------------------------------------
    def tanh(self, a) -> Var:
        a = self._wrap(a)
        out_val = np.tanh(a.value)

        def bw(g):
            a.add_grad(g * (1.0 - out_val * out_val))

        return self._push(out_val, bw)

    def sigmoid(self, a) -> Var:
        a = self._wrap(a)
        out_val = _sigmoid(a.value)

        def bw(g):
            a.add_grad(g * out_val * (1.0 - out_val))

        return self._push(out_val, bw)

    def softplus(self, a) -> Var:
        a = self._wrap(a)
        out_val = _softplus(a.value)

        def bw(g):
            a.add_grad(g * _sigmoid(a.value))

        return self._push(out_val, bw)

    def softmax(self, a) -> Var:
        """Row-wise softmax over the last axis."""
        a = self._wrap(a)
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_val = e / e.sum(axis=-1, keepdims=True)

        def bw(g):
            dot = (g * out_val).sum(axis=-1, keepdims=True)
            a.add_grad(out_val * (g - dot))

        return self._push(out_val, bw)

    def logsumexp(self, a, axis: int) -> Var:
        a = self._wrap(a)
        m = a.value.max(axis=axis, keepdims=True)
        e = np.exp(a.value - m)
        s = e.sum(axis=axis, keepdims=True)
        out_val = np.squeeze(m + np.log(s), axis=axis)

        def bw(g):
            soft = e / s
            a.add_grad(np.expand_dims(g, axis) * soft)

        return self._push(out_val, bw)

    # ---- linear algebra ------------------------------------------------
    def matmul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        out_val = a.value @ b.value

        def bw(g):
            a.add_grad(g @ b.value.T)
            b.add_grad(a.value.T @ g)

        return self._push(out_val, bw)

    def bmm(self, a, b) -> Var:
        """Batched matmul on stacked matrices (..., n, k) @ (..., k, m)."""
        a, b = self._wrap(a), self._wrap(b)
        out_val = np.matmul(a.value, b.value)

        def bw(g):
            a.add_grad(_unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.value.shape))
            b.add_grad(_unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.value.shape))

        return self._push(out_val, bw)

    def affine(self, x, w, b) -> Var:
        """x @ w + b with x (B, in), w (in, out), b (out,)."""
        x, w, b = self._wrap(x), self._wrap(w), self._wrap(b)
        out_val = x.value @ w.value + b.value

        def bw(g):
            x.add_grad(g @ w.value.T)
            w.add_grad(x.value.T @ g)
            b.add_grad(g.sum(axis=0))

        return self._push(out_val, bw)

    def transpose(self, a) -> Var:
        a = self._wrap(a)

        def bw(g):
            a.add_grad(g.T)

        return self._push(a.value.T, bw)

    def reshape(self, a, shape) -> Var:
        a = self._wrap(a)
        in_shape = a.value.shape

        def bw(g):
            a.add_grad(g.reshape(in_shape))

        return self._push(a.value.reshape(shape), bw)

    def col(self, a, j: int) -> Var:
        """Extract column j of a 2-D node as (n, 1)."""
        a = self._wrap(a)

        def bw(g):
            ga = np.zeros_like(a.value)
            ga[:, j : j + 1] = g
            a.add_grad(ga)

        return self._push(a.value[:, j : j + 1].copy(), bw)

    def concat(self, parts, axis: int = 1) -> Var:
        parts = [self._wrap(p) for p in parts]
        out_val = np.concatenate([p.value for p in parts], axis=axis)
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.add_grad(g[tuple(idx)])

        return self._push(out_val, bw)

    def sliding_windows(self, a, width: int) -> Var:
        """(B, M) -> (B, M - width + 1, width) overlapping windows, stride 1."""
        a = self._wrap(a)
        if a.value.shape[-1] < width:
            raise ValueError(
                f"signal length {a.value.shape[-1]} shorter than window {width}"
            )
        out_val = np.lib.stride_tricks.sliding_window_view(a.value, width, axis=-1).copy()
        n_win = out_val.shape[-2]

        def bw(g):
            ga = np.zeros_like(a.value)
            for off in range(width):
                ga[..., off : off + n_win] += g[..., off]
            a.add_grad(ga)

        return self._push(out_val, bw)

    def cholesky(self, a) -> Var:
        """Lower Cholesky factor of a symmetric positive-definite matrix."""
        a = self._wrap(a)
        try:
            L = np.linalg.cholesky(a.value)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"Cholesky factorization failed: {e}") from e

        def bw(g):
            P = np.tril(L.T @ g)
            di = np.diag_indices_from(P)
            P[di] *= 0.5
            t = solve_triangular(L, P, lower=True, trans="T")
            ga = solve_triangular(L, t.T, lower=True, trans="T").T
            a.add_grad(0.5 * (ga + ga.T))

        return self._push(L, bw)

    def solve_lower(self, l, b) -> Var:
        """Solve L y = b for lower-triangular L."""
        l, b = self._wrap(l), self._wrap(b)
        y = solve_triangular(l.value, b.value, lower=True)

        def bw(g):
            gb = solve_triangular(l.value, g, lower=True, trans="T")
            l.add_grad(-np.tril(gb @ y.T))
            b.add_grad(gb)

        return self._push(y, bw)

    def diag(self, a) -> Var:
        """Diagonal of a square matrix as a vector."""
        a = self._wrap(a)

        def bw(g):
            a.add_grad(np.diag(g))

        return self._push(np.diag(a.value).copy(), bw)

    # ---- reductions ----------------------------------------------------
    def sum(self, a, axis=None, keepdims: bool = False) -> Var:
        a = self._wrap(a)
        out_val = a.value.sum(axis=axis, keepdims=keepdims)
        in_shape = a.value.shape

        def bw(g):
            gg = np.asarray(g, dtype=np.float64)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.add_grad(np.broadcast_to(gg, in_shape))

        return self._push(out_val, bw)

    def mean(self, a, axis=None, keepdims: bool = False) -> Var:
        a = self._wrap(a)
        out_val = a.value.mean(axis=axis, keepdims=keepdims)
        in_shape = a.value.shape
        count = a.value.size if axis is None else in_shape[axis]

        def bw(g):
            gg = np.asarray(g, dtype=np.float64) / count
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.add_grad(np.broadcast_to(gg, in_shape))

        return self._push(out_val, bw)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Accumulate gradients for every leaf by replaying the tape in reverse.

    Returns name -> gradient for every registered leaf; leaves the loss does
    not depend on get zeros.  The loss must be scalar.
    """
    if np.size(loss.value) != 1:
        raise ValueError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    for node in tape._nodes:
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(tape._nodes):
        if node.grad is not None and node._bw is not None:
            node._bw(node.grad)
    out = {}
    for name, v in tape.leaves.items():
        out[name] = np.zeros_like(v.value) if v.grad is None else v.grad
    return out


def finite_difference_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the test oracle."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


class ParamStore:
    """Named map of parameter tensors with deterministic iteration order.

    Shapes are immutable after creation; values may be updated in place
    (training) or wholesale through ``set_`` with a matching shape.
    """

    def __init__(self):
        self._tensors: dict[str, np.ndarray] = {}

    def create(self, name: str, value) -> np.ndarray:
        if name in self._tensors:
            raise ValueError(f"parameter {name!r} already exists")
        self._tensors[name] = as_tensor(value, name)
        return self._tensors[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        a = as_tensor(value, name)
        if name in self._tensors and self._tensors[name].shape != a.shape:
            raise ValueError(
                f"parameter {name!r} shape {self._tensors[name].shape} is immutable, "
                f"got {a.shape}"
            )
        self._tensors[name] = a

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._tensors.items():
            out._tensors[name] = t.copy()
        return out

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            self[name] = v


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one slot per parameter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
    """One in-place Adam step over every parameter in the store."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---- fully-connected networks -------------------------------------------


@dataclass(frozen=True)
class Layer:
    width: int
    activation: str = "none"
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class MlpSpec:
    """Width/activation chain for one fully-connected network."""

    in_dim: int
    layers: tuple[Layer, ...]
    prefix: str = "mlp"

    def widths(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [l.width for l in self.layers]
        return list(zip(dims[:-1], dims[1:]))

    def param_names(self) -> list[str]:
        out = []
        for i in range(len(self.layers)):
            out += [f"{self.prefix}.w{i}", f"{self.prefix}.b{i}"]
        return out


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp_params(params: ParamStore, spec: MlpSpec, rng: np.random.Generator) -> None:
    """Glorot-uniform weights, zero biases, registered under the spec prefix."""
    for i, (fan_in, fan_out) in enumerate(spec.widths()):
        params.create(f"{spec.prefix}.w{i}", glorot_uniform(rng, fan_in, fan_out))
        params.create(f"{spec.prefix}.b{i}", np.zeros(fan_out))


def mlp_forward(
    params: ParamStore,
    spec: MlpSpec,
    x,
    tape: Tape | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Var:
    """Run the affine/activation chain; records on `tape` when given.

    Dropout layers draw train-time Bernoulli masks (scaled by 1/(1-p)) from
    `rng` and are the identity when ``train`` is false.
    """
    if tape is None:
        tape = Tape()
    h = tape._wrap(x)
    if h.value.ndim != 2:
        raise ValueError(f"{spec.prefix}: input must be 2-D, got shape {h.value.shape}")
    if h.value.shape[1] != spec.in_dim:
        raise ValueError(
            f"{spec.prefix}: input width {h.value.shape[1]} != expected {spec.in_dim}"
        )
    for i, layer in enumerate(spec.layers):
        w = tape.leaf(f"{spec.prefix}.w{i}", params[f"{spec.prefix}.w{i}"])
        b = tape.leaf(f"{spec.prefix}.b{i}", params[f"{spec.prefix}.b{i}"])
        if h.value.shape[1] != w.value.shape[0]:
            raise ValueError(
                f"layer {spec.prefix}.w{i} expects input width {w.value.shape[0]}, "
                f"got {h.value.shape[1]}"
            )
        h = tape.affine(h, w, b)
        if layer.activation == "tanh":
            h = tape.tanh(h)
        elif layer.activation == "softplus":
            h = tape.softplus(h)
        elif layer.activation == "sigmoid":
            h = tape.sigmoid(h)
        elif layer.activation == "softmax":
            h = tape.softmax(h)
        if layer.dropout > 0.0 and train:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = (rng.random(h.value.shape) >= layer.dropout) / (1.0 - layer.dropout)
            h = tape.mul(h, tape.const(keep))
    return h
