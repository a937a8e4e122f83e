"""Dense n-d arrays with tape-based reverse-mode differentiation.

Only the operation set needed by the denoising network is provided. Arrays
are numpy buffers; a :class:`Tape` records operations while it is active and
replays their backward rules once. Outside any tape, operations evaluate
eagerly with no bookkeeping (inference mode).

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeError",
    "backward",
    "grad_check",
    "CheckReport",
    "matmul",
    "concat",
    "stack",
    "sigmoid",
    "tanh",
    "elu",
    "exp",
    "log",
    "cumsum",
    "flip",
    "layer_norm",
    "batch_norm",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (double backward, empty tape, ...)."""


_ACTIVE: list["Tape"] = []


def _check_finite(data: np.ndarray, op: str) -> None:
    # one reduction on the fast path; the exact test only runs if the sum is off
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = None

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    permute = transpose

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def elu(self):
        return elu(self)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    A tape supports exactly one :meth:`backward`; afterwards it must be
    :meth:`reset` before it records again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(node)
        node.out._node = (self, node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward() already ran on this tape; run a new forward pass")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes or loss._node is None or loss._node[0] is not self:
            raise TapeError("loss was not produced on this tape (empty tape?)")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                _check_finite(gi, "backward")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that produced ``loss``."""
    if loss._node is None:
        raise TapeError("loss has no recorded history (empty tape)")
    loss._node[0].backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output and record it on the active tape.

    ``bwd`` maps the output gradient to a tuple of input gradients (``None``
    for inputs that need none). Public so layers can define fused ops.
    """
    _check_finite(data, op)
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(_Node(out, tuple(inputs), bwd))
    return out


make_op = _make


# -- elementwise --------------------------------------------------------
def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    d = x.data
    neg = alpha * np.expm1(np.minimum(d, 0.0))
    out = np.where(d > 0, d, neg)
    slope = np.where(d > 0, 1.0, neg + alpha).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * slope,), "elu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    if (d <= 0).any():
        raise NumericError("log of non-positive value")
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * g * d,), "square")


# -- contraction ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bwd, "matmul")


# -- shape ----------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def bwd(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(x.data[index], (x,), bwd, "slice")


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)
    return _make(
        out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)), "stack"
    )


def flip(x: Tensor, axis: int) -> Tensor:
    return _make(np.flip(x.data, axis), (x,), lambda g: (np.flip(g, axis),), "flip")


# -- reductions -----------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def cumsum(x: Tensor, axis: int) -> Tensor:
    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), bwd, "cumsum")


# -- normalisation ----------------------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    red = tuple(range(d.ndim - 1))

    def bwd(g):
        gx = g * gd if gd is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        ggam = (g * xhat).sum(axis=red) if gamma is not None else None
        gbet = g.sum(axis=red) if beta is not None else None
        return dx, ggam, gbet

    inputs = [x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0)]
    return _make(out, inputs, bwd, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except axis 1 (channels).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance). In eval mode the op is the fixed
    affine map given by the running statistics.
    """
    d = x.data
    c = d.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels in input {d.shape}, params {gamma.shape}")
    red = (0,) + tuple(range(2, d.ndim))
    bshape = (1, c) + (1,) * (d.ndim - 2)
    gd = gamma.data.reshape(bshape)
    if training:
        m = d.size // c
        mu = d.mean(axis=red)
        xc = d - mu.reshape(bshape)
        var = (xc * xc).mean(axis=red)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
        xhat = xc * inv

        def bwd(g):
            gx = g * gd
            dx = inv * (gx - gx.mean(axis=red, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=red, keepdims=True))
            return dx, (g * xhat).sum(axis=red), g.sum(axis=red)
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(d.dtype).reshape(bshape)
        xhat = (d - running_mean.astype(d.dtype).reshape(bshape)) * inv

        def bwd(g):
            return g * gd * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

    out = xhat * gd + beta.data.reshape(bshape)
    return _make(out.astype(d.dtype, copy=False), (x, gamma, beta), bwd, "batch_norm")


# -- gradient checking ------------------------------------------------------
@dataclass
class CheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    tol: float
    coords: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def grad_check(fn: Callable, point, h: float = 1e-5, tol: float = 1e-6,
               max_coords: int | None = None, seed: int = 0) -> CheckReport:
    """Compare tape gradients of a scalar ``fn(point)`` with central differences.

    ``point`` is a Tensor or a sequence of Tensors; they are perturbed in
    place and restored. Per-coordinate relative error is
    ``|a - n| / max(|a|, |n|, floor)`` with ``floor = 1e-6 * max(1, max|n|)``
    so that coordinates whose true derivative is ~0 are judged on an
    absolute scale. ``max_coords`` subsamples coordinates for large inputs.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    tensors = [point] if isinstance(point, Tensor) else list(point)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(point)
    if out.size != 1:
        raise ShapeError(f"grad_check: fn must be scalar-valued, got shape {out.shape}")
    tape.backward(out)

    coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    for n, (i, j) in enumerate(coords):
        t = tensors[i]
        flat = t.data.reshape(-1)
        g = t.grad.reshape(-1)[j] if t.grad is not None else 0.0
        orig = flat[j]
        flat[j] = orig + h
        fp = float(fn(point).data)
        flat[j] = orig - h
        fm = float(fn(point).data)
        flat[j] = orig
        numeric[n] = (fp - fm) / (2.0 * h)
        analytic[n] = g
    if not np.isfinite(numeric).all():
        raise NumericError("non-finite numeric gradient")
    floor = 1e-6 * max(1.0, float(np.abs(numeric).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return CheckReport(analytic, numeric, float(rel.max(initial=0.0)), tol, coords)


# -- checkpoint container ----------------------------------------------------
_DTYPES = {"float32": "<f4"}


def save_tensors(tensors: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Serialise named arrays.

    Layout: a UTF-8 JSON manifest (list of ``{name, dtype, shape}``) on the
    first line, then the little-endian float32 payloads concatenated in
    manifest order.
    """
    manifest, payload = [], []
    for name, arr in tensors:
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        manifest.append({"name": name, "dtype": "float32", "shape": list(a.shape)})
        payload.append(a.tobytes())
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8") + b"\n"
    return head + b"".join(payload)


def load_tensors(blob: bytes) -> list[tuple[str, np.ndarray]]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError("checkpoint: missing manifest line")
    try:
        manifest = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"checkpoint: bad manifest ({exc})") from None
    out, pos = [], nl + 1
    for entry in manifest:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ValueError(f"checkpoint: unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ValueError(f"checkpoint: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // 4, offset=pos).reshape(shape)
        out.append((entry["name"], arr.astype(np.float32)))
        pos += nbytes
    if pos != len(blob):
        raise ValueError("checkpoint: trailing bytes after payload")
    return out

