"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: each operation computes its value immediately and
records a closure that pushes the output gradient back to its parents. Calling
:func:`backward` on a scalar node walks the graph in reverse topological order
and accumulates gradients into every tensor that requires them. Gradients
accumulate across repeated backward calls until :func:`zero_grad` is invoked.

Every operation validates that its output is finite and fails fast otherwise;
silent NaN/Inf propagation hides training bugs.

Thread contract: a graph being built or backpropagated belongs to a single
thread. Tensors used read-only (frozen parameters, dataset constants) may be
shared freely. There is no internal locking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericsError(FloatingPointError):
    """An operation produced NaN or Inf values."""


class GraphError(RuntimeError):
    """The autodiff API was used outside its contract."""


_GradFn = Callable[[np.ndarray], tuple]


class Tensor:
    """A dense float64 array that participates in the autodiff graph.

    A tensor created directly from data is a leaf; tensors returned by
    operations carry references to their parents and a gradient rule. The
    ``grad`` buffer exists only when ``requires_grad`` is set and always
    matches the value shape.
    """

    __slots__ = ("values", "requires_grad", "grad", "op", "_parents", "_grad_fn")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._grad_fn: _GradFn | None = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's values, cut off from the graph."""
        return Tensor(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


def _make(values: np.ndarray, parents: tuple, grad_fn: _GradFn, op: str) -> Tensor:
    """Build an op node. Used by every operation; exposed for extension."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(values, dtype=np.float64)
    _check_finite(arr, op)
    out.values = arr
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = np.zeros_like(arr) if out.requires_grad else None
    out.op = op
    out._parents = parents
    out._grad_fn = grad_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every requires_grad tensor.

    The root must be scalar. Repeated calls without zeroing add up, so callers
    own explicit zeroing between optimization steps.
    """
    if loss.values.ndim != 0:
        raise GraphError(f"backward root must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node.grad is not None:
            node.grad += g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports adding a 1-D bias to every row of a matrix."""
    if a.shape == b.shape:
        return _make(a.values + b.values, (a, b), lambda g: (g, g), "add")
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise ShapeError(f"add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape}")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes {a.shape} and {b.shape}")
        av, bv = a.values, b.values
        return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")
    c = float(b)
    return _make(a.values * c, (a,), lambda g: (g * c,), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _make(a.values.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of zero tensors")
    counts = [p.shape[0] for p in parts]
    splits = np.cumsum(counts)[:-1]
    out = np.concatenate([p.values for p in parts], axis=0)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=0)), "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of zero tensors")
    counts = [p.shape[1] for p in parts]
    splits = np.cumsum(counts)[:-1]
    out = np.concatenate([p.values for p in parts], axis=1)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=1)), "concat_cols")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"slice_cols needs a matrix, got {a.shape}")

    def grad_fn(g):
        da = np.zeros_like(a.values)
        da[:, start:stop] = g
        return (da,)

    return _make(a.values[:, start:stop], (a,), grad_fn, "slice_cols")


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise GraphError("gather_rows with no indices")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(f"gather_rows index out of range for {a.shape[0]} rows")

    def grad_fn(g):
        da = np.zeros_like(a.values)
        np.add.at(da, idx, g)
        return (da,)

    return _make(a.values[idx], (a,), grad_fn, "gather_rows")


def element(a: Tensor, index: tuple) -> Tensor:
    """Extract a single element as a scalar node."""

    def grad_fn(g):
        da = np.zeros_like(a.values)
        da[index] = g
        return (da,)

    return _make(np.asarray(a.values[index]), (a,), grad_fn, "element")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradients pass only through unclipped entries."""
    inside = (a.values > lo) & (a.values < hi)
    return _make(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def relu(a: Tensor) -> Tensor:
    active = a.values > 0
    return _make(a.values * active, (a,), lambda g: (g * active,), "relu")


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return _make(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shp).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    shp = a.shape
    return _make(
        np.asarray(a.values.mean()), (a,), lambda g: (np.broadcast_to(g / n, shp).copy(),), "mean"
    )


def mean_rows(a: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Mean over the rows of a matrix, restricted to rows where ``valid`` is True.

    Returns a 1 x d matrix. Raises when no row is valid.
    """
    if a.values.ndim != 2:
        raise ShapeError(f"mean_rows needs a matrix, got {a.shape}")
    if valid is None:
        mask = np.ones(a.shape[0], dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != (a.shape[0],):
            raise ShapeError(f"valid mask shape {mask.shape} for {a.shape[0]} rows")
    count = int(mask.sum())
    if count == 0:
        raise GraphError("mean_rows over zero valid rows")
    out = a.values[mask].mean(axis=0, keepdims=True)

    def grad_fn(g):
        da = np.zeros_like(a.values)
        da[mask] = g / count
        return (da,)

    return _make(out, (a,), grad_fn, "mean_rows")


# ---------------------------------------------------------------------------
# Normalization, attention weights, losses
# ---------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction for stability."""
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), grad_fn, "softmax")


def masked_softmax(a: Tensor, valid: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``valid`` is True.

    Invalid positions receive exactly zero weight. Any row with no valid
    position is an error: the distribution would be undefined.
    """
    mask = np.asarray(valid, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} for values {a.shape}")
    if not mask.any(axis=-1).all():
        raise GraphError("masked_softmax row with all positions masked")
    shifted = np.where(mask, a.values, -np.inf)
    z = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), grad_fn, "masked_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis with learnable gain/bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} for width {d}")
    mu = a.values.mean(axis=-1, keepdims=True)
    var = a.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mu) * inv
    out = xhat * gain.values + bias.values

    def grad_fn(g):
        dxhat = g * gain.values
        dgain = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        dbias = g.sum(axis=tuple(range(g.ndim - 1)))
        da = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return (da, dgain, dbias)

    return _make(out, (a, gain, bias), grad_fn, "layer_norm")


def cross_entropy_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax of ``logits``.

    ``logits`` is positions x vocabulary; each target id indexes the vocabulary.
    """
    if logits.values.ndim != 2:
        raise ShapeError(f"cross_entropy_logits needs a matrix, got {logits.shape}")
    p, vocab = logits.shape
    idx = np.asarray(targets, dtype=np.intp)
    if idx.shape != (p,):
        raise ShapeError(f"{idx.shape[0]} targets for {p} logit rows")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    z = logits.values - logits.values.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - logsumexp
    loss = -log_probs[np.arange(p), idx].mean()

    def grad_fn(g):
        soft = np.exp(log_probs)
        soft[np.arange(p), idx] -= 1.0
        return (soft * (g / p),)

    return _make(np.asarray(loss), (logits,), grad_fn, "cross_entropy_logits")


BCE_EPS = 1e-7


def binary_cross_entropy(p_hat: Tensor, y: int) -> Tensor:
    """Binary cross-entropy of a scalar probability against a 0/1 label.

    The probability is clamped to [eps, 1 - eps] first, so saturated inputs
    produce a finite loss instead of infinities.
    """
    if p_hat.values.ndim != 0:
        raise ShapeError(f"binary_cross_entropy needs a scalar, got {p_hat.shape}")
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    pc = clamp(p_hat, BCE_EPS, 1.0 - BCE_EPS)
    pv = pc.values
    loss = -(y * math.log(pv) + (1 - y) * math.log(1.0 - pv))

    def grad_fn(g):
        return (g * (pv - y) / (pv * (1.0 - pv)),)

    return _make(np.asarray(loss), (pc,), grad_fn, "binary_cross_entropy")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam state for a fixed parameter list.

    Moment buffers are allocated per parameter, shape-congruent, zero at start.
    The step counter increases by exactly one per ``adam_step`` call.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    slots: list = field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.slots = [(np.zeros_like(p.values), np.zeros_like(p.values)) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and advance the step counter."""
    if len(params) != len(state.slots) or len(grads) != len(params):
        raise ShapeError(
            f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.slots)} slots"
        )
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for p, g, (m, v) in zip(params, grads, state.slots):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape:
            raise ShapeError(f"grad shape {g.shape} for param shape {p.values.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        _check_finite(p.values, "adam_step")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def grad_check(
    fragment: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued fragment to central differences.

    ``fragment`` must rebuild its graph on each call and be pure given the
    current parameter values. Reports the max relative error per parameter;
    the relative error floors its denominator at 1e-3 so near-zero gradients
    are compared on an absolute scale.
    """
    tensors = [t for _, t in params]
    zero_grad(tensors)
    loss = fragment()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    entries = []
    for (name, t), ana in zip(params, analytic):
        flat = t.values.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = fragment().item()
            flat[i] = keep - h
            f_minus = fragment().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ana.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, abs(a - numeric) / denom)
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, passed=worst < tol))
    return GradCheckReport(tol=tol, entries=entries)
