"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what decoding uses.

    with Tape() as tape:
        loss = sum_all(mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TokenIndexError(IndexError):
    pass


class DeterminismError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"


class Parameter(Tensor):
    """A named leaf tensor whose gradient persists across backward passes."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


_active: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Backward replays the records once each, newest first. Gradients of
    intermediate tensors live only for the duration of one replay; leaf
    gradients are added to ``leaf.grad`` at the end of the replay, so two
    replays without a reset give exactly twice the single-pass gradient.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, visit: Callable | None = None) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        produced = {id(out) for out, _, _ in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward in reversed(self.records):
            if visit is not None:
                visit(out)
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g in zip(inputs, backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad = leaf.grad + g


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _active:
        _active[-1].record(out, inputs, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def negate(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError(f"log: non-positive input (min {x.min()!r})")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {"negate": negate, "tanh": tanh, "sigmoid": sigmoid, "log": log, "exp": exp}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *args: Tensor) -> Tensor:
    if op in _UNARY and len(args) == 1:
        return _UNARY[op](args[0])
    if op in _BINARY and len(args) == 2:
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r} with {len(args)} operand(s)")


# ---------------------------------------------------------------- broadcasting


def add_row(a: Tensor, bias: Tensor) -> Tensor:
    """``a[m, n] + bias[n]`` with the bias repeated over rows."""
    if a.data.ndim != 2 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_row: {list(a.shape)} + {list(bias.shape)}")
    return _emit(a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=0)))


def add_query(keys: Tensor, query: Tensor) -> Tensor:
    """``keys[B, T, d] + query[B, d]`` broadcast over the T axis."""
    if keys.data.ndim != 3 or query.shape != (keys.shape[0], keys.shape[2]):
        raise ShapeError(f"add_query: {list(keys.shape)} + {list(query.shape)}")
    return _emit(
        keys.data + query.data[:, None, :],
        (keys, query),
        lambda g: (g, g.sum(axis=1)),
    )


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def sum_cols(a: Tensor) -> Tensor:
    """Row sums: ``[m, n] -> [m]``."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_cols expects a matrix, got {list(a.shape)}")
    n = a.shape[1]
    return _emit(a.data.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], n, axis=1),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


# ---------------------------------------------------------------- softmax


def softmax_rows(logits: Tensor) -> Tensor:
    x = logits.data
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (logits,), backward)


def log_softmax_rows(logits: Tensor) -> Tensor:
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (logits,), backward)


# ---------------------------------------------------------------- indexing / layout


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    n = table.shape[0]
    idx = np.asarray(list(indices), dtype=np.int64)
    bad = idx[(idx < 0) | (idx >= n)]
    if bad.size:
        raise TokenIndexError(f"gather_rows: id {int(bad[0])} outside [0, {n})")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: incompatible shapes {[list(p.shape) for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[list(p.shape) for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, start:stop] = g
        return (out,)

    return _emit(a.data[:, start:stop], (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def stack_steps(steps: Sequence[Tensor]) -> Tensor:
    """Stack ``T`` tensors of shape ``[B, d]`` into ``[B, T, d]``."""
    if len({s.shape for s in steps}) != 1:
        raise ShapeError("stack_steps: all steps must share one shape")
    n = len(steps)
    return _emit(
        np.stack([s.data for s in steps], axis=1),
        tuple(steps),
        lambda g: tuple(g[:, t] for t in range(n)),
    )


def attend(weights: Tensor, values: Tensor) -> Tensor:
    """Per-row convex combination: ``weights[B, T]``, ``values[B, T, d]`` -> ``[B, d]``."""
    if values.data.ndim != 3 or weights.shape != values.shape[:2]:
        raise ShapeError(f"attend: weights {list(weights.shape)} vs values {list(values.shape)}")
    w, v = weights.data, values.data

    def backward(g):
        return np.einsum("bd,btd->bt", g, v), w[:, :, None] * g[:, None, :]

    return _emit(np.einsum("bt,btd->bd", w, v), (weights, values), backward)


# ---------------------------------------------------------------- verification


def _flat_views(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.data.reshape(-1) for p in params]


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``loss_fn`` is called with no arguments and must read the current values
    of ``params``. If ``max_coords`` is set, that many coordinates per
    parameter are sampled with ``rng`` instead of checking all of them.
    ``order=4`` uses the five-point central stencil, whose truncation error
    is small enough to take ``eps`` around 1e-3 and keep roundoff out of the
    comparison for gradients near 1e-9.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    first = float(loss_fn().data)
    if float(loss_fn().data) != first:
        raise DeterminismError("loss_fn returned different values for identical parameters")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [p.grad.reshape(-1).copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, flat, g in zip(params, _flat_views(params), analytic):
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]

            def at(offset):
                flat[i] = orig + offset
                return float(loss_fn().data)

            if order == 2:
                numeric = (at(eps) - at(-eps)) / (2.0 * eps)
            else:
                numeric = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
            flat[i] = orig
            denom = max(abs(g[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(g[i] - numeric) / denom)
    if math.isnan(worst):
        return math.inf
    return worst
