"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block). Outside a tape nothing is recorded, which is the fast path
used for generation.

    >>> w = parameter(np.ones(3))
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> tape.backward(loss, [w])[0]
    array([2., 2., 2.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "parameter",
    "constant",
    "backward",
    "grad_check",
    "grad_check_report",
    "GradCheckReport",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "embedding",
    "masked_mean_pool",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "pick",
    "layer_norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, which is already a topological
    order, so the backward pass simply walks the list in reverse. The record is
    dropped after :meth:`backward`.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.entries):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        grads = []
        for p in params:
            g = adj.get(id(p))
            grads.append(np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape))
        self.entries = []
        return grads


def backward(loss: Tensor, params: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` (zeros where unreachable)."""
    tape = tape or Tape.active()
    if tape is None:
        raise RuntimeError("backward: no tape recorded this loss")
    return tape.backward(loss, params)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = Tape.active()
        if tape is not None:
            tape.entries.append((out, inputs, fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


# While a grad check runs with ``skip_kinks`` this list collects every relu
# activation pattern, so probes that cross a kink can be recognized.
_relu_patterns: list[np.ndarray] | None = None


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_patterns is not None:
        _relu_patterns.append(mask)
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (a,), fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (a,), fn)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # (..., n) @ (n, k): fold leading axes into one GEMM each way
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), fn)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(y, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _emit(y, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _emit(y, tensors, fn)


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    y = a.data[index]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def fn(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _emit(np.array(y, dtype=np.float64), (a,), fn)


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``a[..., idx[...]]`` along the last axis (targets for cross-entropy)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {a.shape[:-1]}")
    y = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit(y, (a,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), fn)


def masked_mean_pool(h: Tensor, mask: np.ndarray) -> Tensor:
    """Uniform mean of ``h[b, t, :]`` over positions where ``mask[b, t]`` is set."""
    mask = np.asarray(mask, dtype=np.float64)
    if h.data.ndim != 3 or mask.shape != h.shape[:2]:
        raise ShapeError(f"masked_mean_pool: incompatible shapes {h.shape} and {mask.shape}")
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("masked_mean_pool: a row has no unmasked positions")
    w = mask / counts
    y = np.einsum("bt,btd->bd", w, h.data)
    return _emit(y, (h,), lambda g: (w[:, :, None] * g[:, None, :],))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: incompatible shapes {x.shape} and {gain.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + bias.data, (x, gain, bias), fn)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int


def _eval_with_patterns(loss_fn: Callable[[], Tensor], track: bool) -> tuple[float, list[np.ndarray]]:
    global _relu_patterns
    _relu_patterns = [] if track else None
    try:
        value = loss_fn().item()
        return value, _relu_patterns or []
    finally:
        _relu_patterns = None


def _same_patterns(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    n_samples: int | None = 32,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    ``loss_fn`` is re-evaluated with one coordinate nudged at a time, so it must
    be deterministic. ``n_samples`` coordinates are probed per parameter (all of
    them when ``None``). With ``skip_kinks`` a coordinate is skipped when the
    nudge in either direction flips any relu unit, because the loss is not
    differentiable across that interval and the central difference means nothing.
    The relative error of a coordinate is ``|a - n| / (|a| + |n|)`` after
    discounting the round-off bound of the central difference, so gradients
    too small to resolve at this ``epsilon`` do not register as mismatches.
    """
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    analytic = tape.backward(loss, params)
    base = _eval_with_patterns(loss_fn, skip_kinks)[1]
    worst, checked, skipped = 0.0, 0, 0
    for p, ga in zip(params, analytic):
        if not np.isfinite(ga).all():
            raise FloatingPointError(f"grad_check: non-finite gradient for {p.name or p.shape}")
        flat = p.data.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up, up_pat = _eval_with_patterns(loss_fn, skip_kinks)
            flat[c] = orig - epsilon
            down, down_pat = _eval_with_patterns(loss_fn, skip_kinks)
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("grad_check: non-finite loss under perturbation")
            if skip_kinks and not (_same_patterns(base, up_pat) and _same_patterns(base, down_pat)):
                skipped += 1
                continue
            num = (up - down) / (2.0 * epsilon)
            a = ga.reshape(-1)[c]
            # rounding in up and down alone can move num by about this much
            noise = 4.0 * np.finfo(np.float64).eps * max(abs(up), abs(down), 1.0) / (2.0 * epsilon)
            err = max(0.0, abs(a - num) - noise) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, checked, skipped)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    n_samples: int | None = 32,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> float:
    """Max relative error between tape gradients and central differences.

    See :func:`grad_check_report` for the arguments.
    """
    return grad_check_report(loss_fn, params, epsilon, n_samples, rng, skip_kinks).max_rel_error
