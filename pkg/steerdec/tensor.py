"""Dense tensors backed by numpy arrays, with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` only when one of
their inputs requires a gradient, so code running outside a tape (inference) pays no
bookkeeping cost.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DEFAULT_DTYPE = np.float32

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None) -> None:
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")
        self.grad = grad.astype(self.data.dtype, copy=True) if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: float) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive operations, replayed backwards by :meth:`backward`."""

    def __init__(self) -> None:
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Vjp]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
        out._tape = self
        self._ops.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # recording order is a topological order, so the reverse visits consumers first
        for out, inputs, vjp in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, ig in zip(inputs, vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    grads[key] = grads[key] + ig if key in grads else ig
                else:
                    inp.accumulate_grad(ig)


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise ContractError("loss was not produced under an active tape")
    loss._tape.backward(loss)


def tensor(data: Any, requires_grad: bool = False, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int] | int, dtype: Any = DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _lift(x: Tensor | float | np.ndarray, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(np.asarray(data), requires_grad=track)
    if track:
        assert tape is not None
        tape.record(out, inputs, vjp)
    return out


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short) :] != short:
        raise DimensionError(f"shapes {a} and {b} are not trailing-broadcast compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# -- elementwise ---------------------------------------------------------------------------


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    assert isinstance(a, Tensor)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    assert isinstance(a, Tensor)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _result(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def max0(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    return _result(
        np.where(mask, x.data, floor).astype(x.dtype), (x,), lambda g: (g * mask,)
    )


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "silu": silu,
    "exp": exp,
    "log": log,
    "max0": max0,
}


def elementwise(op: str, *args: Tensor | float) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"Unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(*args)


# -- linear algebra ------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(
                f"concat shapes {[t.shape for t in tensors]} differ outside axis {axis}"
            )
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def take_rows(x: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), vjp)


# -- reductions ----------------------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalisation and probabilities -------------------------------------------------------


def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    if logits.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dimension")
    x = logits.data
    if temperature == 0:
        # greedy limit: np.argmax returns the lowest index among ties
        out = np.zeros_like(x)
        np.put_along_axis(out, np.argmax(x, axis=-1)[..., None], 1.0, axis=-1)
        return Tensor(out)
    z = x / temperature if temperature != 1.0 else x
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        inner = y * (g - np.sum(g * y, axis=-1, keepdims=True))
        return (inner / temperature if temperature != 1.0 else inner,)

    return _result(y, (logits,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or (bias is not None and bias.shape != (d,)):
        raise DimensionError(f"layer_norm parameters do not match feature size {d}")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    # a zero-variance row with eps=0 normalises to zeros rather than NaN
    safe = np.where(denom > 0, denom, 1.0)
    inv = np.where(denom > 0, 1.0 / safe, 0.0).astype(xd.dtype)
    xhat = xc * inv
    out = xhat * gain.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))
    gd = gain.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).sum(axis=lead)
        if bias is None:
            return dx, dgain
        return dx, dgain, g.sum(axis=lead)

    inputs = (x, gain) if bias is None else (x, gain, bias)
    return _result(out, inputs, vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm gain shape {gain.shape} != ({d},)")
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = g * gd
        dx = inv * (u - xd * inv * inv * (u * xd).mean(axis=-1, keepdims=True))
        return dx, (g * normed).sum(axis=lead)

    return _result(normed * gd, (x, gain), vjp)
