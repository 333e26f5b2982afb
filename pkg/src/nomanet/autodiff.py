"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Usage::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.sum(x * x)
    grads = backward(tape, y)        # {x.id: array([2., 4.])}

Operations run outside an active tape compute plain values and record nothing,
which is the fast path used for inference. Shapes must match exactly; the only
implicit broadcasting is between a tensor and a rank-0 scalar. Anything else
goes through :func:`broadcast_to`.

Piecewise-linear primitives (relu, leaky_relu, maximum) use subgradient 0 at
their kink and log their branch pattern on the tape, which :func:`grad_check`
uses to skip coordinates whose finite-difference stencil crosses a kink.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731


class Tape:
    """Append-only record of operations; activate with ``with Tape() as t:``."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.patterns: list[np.ndarray] = []
        self._ids: set[int] = set()

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._ids

    def _record(self, out: Tensor):
        self.nodes.append(out)
        self._ids.add(out.id)

    def branch_pattern(self) -> np.ndarray:
        if not self.patterns:
            return np.zeros(0, dtype=bool)
        return np.concatenate([p.ravel() for p in self.patterns])


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result; record it when a tape is active and any input needs grad."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape._record(out)
    return out


def _log_pattern(mask: np.ndarray):
    tape = active_tape()
    if tape is not None:
        tape.patterns.append(mask)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(
        a.data * b.data, (a, b), lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    return _make(
        out, (a, b), lambda g: (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape))
    )


# linear algebra and shape


def matvec(w, x) -> Tensor:
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: {w.shape} @ {x.shape}")
    return _make(w.data @ x.data, (w, x), lambda g: (np.outer(g, x.data), w.data.T @ g))


def linear(x, w) -> Tensor:
    """Apply ``w`` (out, in) to the last axis of ``x`` (..., in) -> (..., out)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}")

    def vjp(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    return _make(x.data @ w.data.T, (x, w), vjp)


def bmm(a, b) -> Tensor:
    """Batched matrix product over leading axes: (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def pairwise_add(u, v) -> Tensor:
    """out[..., i, j, :] = u[..., i, :] + v[..., j, :]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim < 2:
        raise ShapeError(f"pairwise_add: {u.shape} vs {v.shape}")
    out = u.data[..., :, None, :] + v.data[..., None, :, :]
    return _make(out, (u, v), lambda g: (g.sum(axis=-2), g.sum(axis=-3)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    lead = len(shape) - a.ndim
    expanded = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def vjp(g):
        return (g.sum(axis=expanded, keepdims=True).reshape(a.shape),)

    return _make(np.array(out), (a,), vjp)


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), vjp)


# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    _log_pattern(pos)
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    _log_pattern(pos)
    factor = np.where(pos, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a constant; gradient 0 at ties."""
    a = as_tensor(a)
    above = a.data > c
    _log_pattern(above)
    return _make(np.where(above, a.data, c), (a,), lambda g: (g * above,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


def masked_softmax(logits, mask, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is true; others are 0.

    ``mask`` is a boolean array broadcastable to ``logits``. Every slice must
    contain at least one selected entry.
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(mask.any(axis=axis)):
        raise ShapeError("masked_softmax: empty index subset")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), vjp)


def softmax_subset(logits, subset: Iterable[int]) -> Tensor:
    """Softmax of a 1-D logit vector over the index subset; zeros elsewhere."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError("softmax_subset expects a vector")
    mask = np.zeros(logits.shape, dtype=bool)
    idx = list(subset)
    mask[idx] = True
    return masked_softmax(logits, mask)


# reverse pass


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` keyed by tensor id.

    Covers every grad-requiring leaf reached from ``loss``; leaves listed in
    ``wrt`` that the loss does not depend on get zero arrays.
    """
    if loss.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and not loss.is_leaf:
        if loss not in tape:
            raise TapeError("loss was not recorded on this tape")
        grads[loss.id] = np.ones(())
        for node in reversed(tape.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    leaves[parent.id] = parent
                grads[parent.id] = grads[parent.id] + pg if parent.id in grads else pg
    elif loss.requires_grad:
        grads[loss.id] = np.ones(())
        leaves[loss.id] = loss
    out = {i: grads.get(i, np.zeros(t.shape)) for i, t in leaves.items()}
    for t in wrt or ():
        if t.id not in out:
            out[t.id] = np.zeros(t.shape)
    return out


def grad_check(
    f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-6, return_details: bool = False
):
    """Max relative error of reverse-mode gradients against central differences.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``. Coordinates
    whose +-eps stencil changes the branch pattern of any piecewise primitive
    (i.e. straddles or sits on a kink) are skipped and reported in the details.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in xs]

    with Tape() as tape:
        out = f(*leaves)
    if not isinstance(out, Tensor) or out.ndim != 0:
        raise ShapeError("grad_check needs a scalar-valued function")
    base_pattern = tape.branch_pattern()
    ad = backward(tape, out, wrt=leaves)

    def evaluate(vals):
        with Tape() as t:
            y = f(*[Tensor(v, requires_grad=True) for v in vals])
        return float(y.data), t.branch_pattern()

    worst = 0.0
    skipped = []
    vals = [t.data.copy() for t in leaves]
    for li, leaf in enumerate(leaves):
        g_ad = ad[leaf.id].reshape(-1)
        flat = vals[li].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp, pp = evaluate(vals)
            flat[k] = orig - eps
            fm, pm = evaluate(vals)
            flat[k] = orig
            if not (np.array_equal(pp, base_pattern) and np.array_equal(pm, base_pattern)):
                skipped.append((li, k))
                continue
            g_fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g_ad[k] - g_fd) / max(1.0, abs(g_fd)))
    if return_details:
        return worst, skipped
    return worst
