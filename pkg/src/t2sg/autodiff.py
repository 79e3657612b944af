"""Dense 64-bit matrix numerics with a tape-based reverse-mode sweep.

Every value is a 2-D ``float64`` array wrapped in :class:`Tensor`. Operations
executed while a :class:`Tape` is active (``with Tape() as tape:``) are
recorded together with a closure mapping the output gradient to input
gradients; :meth:`Tape.backward` replays those closures in exact reverse
order. Outside a tape nothing is recorded, which is what the
finite-difference oracle in :func:`grad_check` relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Tensor",
    "Parameter",
    "Tape",
    "no_tape",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "log",
    "power",
    "absolute",
    "clamp",
    "row_softmax",
    "layer_norm",
    "total",
    "mean",
    "reshape",
    "pair_sum",
    "linear",
    "mlp_forward",
    "sigmoid_focal_loss",
    "focal_loss_on_probs",
    "l1_loss",
    "backward",
    "grad_check",
]


class ContractError(RuntimeError):
    """Raised when an operation's contract is violated (shape, tape misuse)."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """Immutable 2-D float64 value, optionally tracked for differentiation."""

    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ContractError(f"Tensor must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` accumulates across backward sweeps until reset."""

    __slots__ = ("grad",)

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def assign(self, new_value: np.ndarray) -> None:
        arr = np.array(new_value, dtype=np.float64).reshape(self.value.shape)
        arr.setflags(write=False)
        self.value = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value) -> Tensor:
    return Tensor(value)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of executed primitives.

    Also tracks the smallest distance of any input to a non-differentiable
    point (ReLU hinge, clamp bound, ``abs`` origin) seen while recording;
    finite-difference checks are only meaningful when that margin exceeds
    the step size by a comfortable factor.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.kink_margin = math.inf
        self._swept = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self.kink_margin = math.inf
        self._swept = False

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, loss: Tensor, visit: Callable[[str], None] | None = None) -> None:
        if self._swept:
            raise ContractError("backward called twice on the same tape without reset()")
        if loss.value.size != 1:
            raise ContractError(f"loss must be a 1x1 scalar, got {loss.shape}")
        self._swept = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        leaves: dict[int, Parameter] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if visit is not None:
                visit(node.op)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        for key, param in leaves.items():
            param.grad = param.grad + grads[key]
        if isinstance(loss, Parameter):
            loss.grad = loss.grad + np.ones((1, 1))


class no_tape:
    """Suspend recording; ops inside the block produce untracked values."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def _record(out_value: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(out_value, requires_grad=track)
    if track:
        _ACTIVE[-1].nodes.append(_Node(out, tuple(inputs), vjp, op))
    return out


def _note_kink(distance: np.ndarray | float) -> None:
    if _ACTIVE:
        d = float(np.min(distance)) if np.size(distance) else math.inf
        tape = _ACTIVE[-1]
        if d < tape.kink_margin:
            tape.kink_margin = d


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ContractError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,), "scale")


def transpose(a: Tensor) -> Tensor:
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    shape = a.shape
    if rows * cols != a.value.size:
        raise ContractError(f"reshape: cannot view {shape} as {(rows, cols)}")
    return _record(
        a.value.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),), "reshape"
    )


def relu(a: Tensor) -> Tensor:
    x = a.value
    _note_kink(np.abs(x))
    mask = x > 0
    # np.maximum keeps NaN, so a poisoned input still reaches the loss check
    return _record(np.maximum(x, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # log(sigmoid(x)) = -softplus(-x), evaluated without overflow
    out = -np.logaddexp(0.0, -x)
    return _record(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise ContractError("log of non-positive entry")
    return _record(np.log(x), (a,), lambda g: (g / x,), "log")


def power(a: Tensor, k: float) -> Tensor:
    x = a.value
    if k == 0:
        return _record(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),), "power")
    return _record(x**k, (a,), lambda g: (g * k * x ** (k - 1),), "power")


def absolute(a: Tensor) -> Tensor:
    x = a.value
    _note_kink(np.abs(x))
    return _record(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def clamp(a: Tensor, lo: float, hi: float, where=None) -> Tensor:
    """Elementwise clip; ``where`` limits kink tracking to entries that reach the output."""
    x = a.value
    dist = np.minimum(np.abs(x - lo), np.abs(x - hi))
    _note_kink(dist if where is None else dist[np.asarray(where, dtype=bool).reshape(x.shape)])
    inside = (x > lo) & (x < hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def row_softmax(m: Tensor) -> Tensor:
    x = m.value
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (m,), vjp, "row_softmax")


def layer_norm(m: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row standardization followed by ``gain * xhat + bias``.

    Zero-variance rows normalize to exactly zero (the numerator vanishes and
    ``eps`` keeps the denominator positive).
    """
    n = m.cols
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ContractError(f"layer_norm: gain/bias must be (1, {n}), got {gain.shape}, {bias.shape}")
    x = m.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def vjp(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record(xhat * gv + bias.value, (m, gain, bias), vjp, "layer_norm")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(
        np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.value.size
    return _record(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean"
    )


def pair_sum(a: Tensor, b: Tensor) -> Tensor:
    """All ordered row pairs: output row ``s * N + e`` is ``a[s] + b[e]``."""
    if a.shape != b.shape:
        raise ContractError(f"pair_sum: shape mismatch {a.shape} vs {b.shape}")
    n, h = a.shape
    out = (a.value[:, None, :] + b.value[None, :, :]).reshape(n * n, h)

    def vjp(g):
        g3 = g.reshape(n, n, h)
        return g3.sum(axis=1), g3.sum(axis=0)

    return _record(out, (a, b), vjp, "pair_sum")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- composites


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def mlp_forward(
    x: Tensor,
    layers: Sequence[tuple[Tensor, Tensor]],
    activation: Callable[[Tensor], Tensor] = relu,
) -> Tensor:
    """Affine/activation chain; the last affine layer is left linear."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i < len(layers) - 1:
            h = activation(h)
    return h


def _masked_mean(per_elem: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return mean(per_elem)
    count = float(np.sum(mask))
    if count == 0:
        return Tensor(0.0)
    return scale(total(mul(per_elem, Tensor(mask))), 1.0 / count)


def sigmoid_focal_loss(
    logits: Tensor,
    targets,
    alpha: float = 0.25,
    gamma: float = 2.0,
    mask=None,
) -> Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` with ``p = sigmoid(logits)``.

    ``targets`` are 0/1 constants; ``mask`` (optional, same shape) restricts
    the mean to the selected entries.
    """
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    alpha_t = Tensor(y * alpha + (1.0 - y) * (1.0 - alpha))
    ls = log_sigmoid(logits)
    # log(1 - sigmoid(x)) = log_sigmoid(x) - x
    log_pt = add(mul(ls, Tensor(y)), mul(sub(ls, logits), Tensor(1.0 - y)))
    p = sigmoid(logits)
    one_minus_pt = add(mul(p, Tensor(1.0 - 2.0 * y)), Tensor(y))
    per = scale(mul(mul(alpha_t, power(one_minus_pt, gamma)), log_pt), -1.0)
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(logits.shape)
    return _masked_mean(per, m)


def focal_loss_on_probs(
    probs: Tensor,
    targets,
    alpha: float = 0.25,
    gamma: float = 2.0,
    mask=None,
    eps: float = 1e-6,
) -> Tensor:
    """Focal loss for inputs that are already probabilities, clamped to [eps, 1-eps]."""
    y = np.asarray(targets, dtype=np.float64).reshape(probs.shape)
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(probs.shape)
    p = clamp(probs, eps, 1.0 - eps, where=None if m is None else m > 0)
    alpha_t = Tensor(y * alpha + (1.0 - y) * (1.0 - alpha))
    pt = add(mul(p, Tensor(2.0 * y - 1.0)), Tensor(1.0 - y))
    per = scale(mul(mul(alpha_t, power(sub(Tensor(1.0), pt), gamma)), log(pt)), -1.0)
    return _masked_mean(per, m)


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    t = _wrap(target)
    if pred.shape != t.shape:
        raise ContractError(f"l1_loss: shape mismatch {pred.shape} vs {t.shape}")
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(pred.shape)
    return _masked_mean(absolute(sub(pred, t)), m)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
    eps: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild its graph on every call from the current parameter
    values. The relative error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + eps)``.

    The ``eps`` floor sits above the rounding noise of a central difference
    (roughly ``ulp(loss) / h``, about 1e-11 for O(1) losses at ``h=1e-5``), so
    coordinates with vanishing gradients are judged on absolute agreement.
    Results are only meaningful when the tape's ``kink_margin`` exceeds ``h``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        base = p.value.copy()
        flat = base.reshape(-1)
        for idx in range(flat.size):
            bumped = flat.copy()
            bumped[idx] = flat[idx] + h
            p.assign(bumped)
            up = f().item()
            bumped[idx] = flat[idx] - h
            p.assign(bumped)
            down = f().item()
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
        p.assign(base)
    return worst
