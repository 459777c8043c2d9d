"""Dense tensors with tape-based reverse-mode differentiation.

Tracking is opt-in: operations are recorded only while a :class:`Tape` is
active and at least one input has ``requires_grad=True``. Outside a tape every
operation is a plain numpy evaluation, which is what samplers and evaluation
use.

Broadcasting is deliberately narrow. Elementwise binary operations accept two
tensors of identical shape, or a tensor and a scalar. Anything else has to be
spelled out with :func:`broadcast_to`, :func:`linear` (row bias) or a reshape.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "grad_check", "GradCheckReport",
    "precision", "get_default_dtype", "no_tape",
    "add", "sub", "mul", "scale", "neg", "silu", "square", "sqrt", "elementwise",
    "matmul", "transpose", "softmax_rows", "layer_norm", "linear",
    "sum", "mean", "reshape", "broadcast_to", "concat", "take_rows",
    "avg_pool_last",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_default_dtype: contextvars.ContextVar = contextvars.ContextVar("agedit_dtype", default=np.float32)
_active_tape: contextvars.ContextVar = contextvars.ContextVar("agedit_tape", default=None)


def get_default_dtype():
    return _default_dtype.get()


@contextlib.contextmanager
def precision(mode: str = "high"):
    """Switch the dtype used for newly created tensors ("high" = float64, "single" = float32)."""
    dtype = {"high": np.float64, "single": np.float32}[mode]
    token = _default_dtype.set(dtype)
    try:
        yield dtype
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_tape():
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tensor:
    """An n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype.kind == "f" else get_default_dtype()))
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return out

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not produced under an active tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Use as a context manager. After :meth:`backward` the tape is consumed and
    must be :meth:`reset` before it can record again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape already consumed; call reset() first")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, out: Tensor, parents: tuple, backward, name: str) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, parents, backward, name))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward called twice on the same tape without reset()")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in produced:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads[key]
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient")
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.consumed = True
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# Ops that cannot turn finite inputs into NaN/Inf (short of float overflow) skip
# the check; the training loop still verifies the loss and every gradient.
_UNCHECKED = frozenset({"linear", "matmul", "reshape", "transpose", "broadcast_to", "concat",
                        "take_rows", "neg", "sum"})


def _result(data: np.ndarray, parents: tuple, backward, name: str) -> Tensor:
    if name not in _UNCHECKED and not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _active_tape.get()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, parents, backward, name)
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.size == 1 and x.ndim == 0


def _scalar_value(x):
    return x.data if isinstance(x, Tensor) else x


def _binary_shapes(a, b, name):
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        if not (_is_scalar(a) or _is_scalar(b)):
            raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_like(g: np.ndarray, operand) -> np.ndarray | None:
    if not isinstance(operand, Tensor):
        return None
    if operand.shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(operand.shape)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    _binary_shapes(a, b, "add")
    out = np.add(_scalar_value(a), _scalar_value(b))
    return _result(out, (a, b), lambda g: (_reduce_like(g, a), _reduce_like(g, b)), "add")


def sub(a, b) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = np.subtract(_scalar_value(a), _scalar_value(b))
    return _result(out, (a, b), lambda g: (_reduce_like(g, a), _reduce_like(-g, b)), "sub")


def mul(a, b) -> Tensor:
    _binary_shapes(a, b, "mul")
    av, bv = _scalar_value(a), _scalar_value(b)
    out = np.multiply(av, bv)
    return _result(out, (a, b), lambda g: (_reduce_like(g * bv, a), _reduce_like(g * av, b)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def back(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)
    return _result(out, (a,), back, "silu")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale,
                "silu": silu, "square": square, "sqrt": sqrt}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand or, for ``scale``, the factor."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    a = _as_tensor(a)
    if op_kind in ("silu", "square", "sqrt"):
        return fn(a)
    if b is None:
        raise ValueError(f"{op_kind} needs a second operand")
    return fn(a, b if op_kind == "scale" else _as_tensor(b) if not np.isscalar(b) else b)


# linear algebra ------------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D while ``a`` carries leading batch axes (a shared weight);
    otherwise both operands must have identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    out = av @ bv

    def back(g):
        ga = g @ _swap(bv) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(av) @ g
        return ga, gb
    return _result(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError("linear: bias shape must equal output width")
    xv, wv = x.data, w.data
    lead = xv.shape[:-1]
    x2 = xv.reshape(-1, xv.shape[-1])
    out = x2 @ wv
    if b is not None:
        out += b.data
    out = out.reshape(lead + (wv.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ wv.T).reshape(xv.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return ga, gw, gb
    return _result(out, (x, w, b), back, "linear")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _result(s, (a,), back, "softmax_rows")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = a.shape[-1]
    if n == 0:
        raise ValueError("layer_norm over a zero-length axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError("layer_norm: gain/bias must match the last dimension")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if a.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        gg = (flat_g * xhat.reshape(-1, n)).sum(axis=0) if gain.requires_grad else None
        gb = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb
    return _result(out, (a, gain, bias), back, "layer_norm")


# reductions and shape plumbing ---------------------------------------------

def sum(a: Tensor, axis: int | tuple | None = None) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _result(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis: int | tuple | None = None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); the gradient sums over the expanded axes."""
    shape = tuple(shape)
    old = a.shape
    lead = len(shape) - len(old)
    expanded = tuple(i for i, (s, t) in enumerate(zip((1,) * lead + old, shape)) if s == 1 and t != 1)

    def back(g):
        g = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (g.reshape(old),)
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), back, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``index.shape + (width,)``."""
    idx = np.asarray(index, dtype=np.int64)

    def back(g):
        flat = idx.reshape(-1)
        onehot = np.zeros((flat.size, table.shape[0]), dtype=g.dtype)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, table.shape[1]),)
    return _result(table.data[idx], (table,), back, "take_rows")


def avg_pool_last(a: Tensor, factor: int) -> Tensor:
    """Average-pool the last two (spatial) axes by ``factor``."""
    *lead, h, w = a.shape
    if h % factor or w % factor:
        raise ValueError("avg_pool_last: spatial size not divisible by factor")
    x = reshape(a, (*lead, h // factor, factor, w // factor, factor))
    nd = len(lead)
    return mean(x, axis=(nd + 1, nd + 3))


# gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    probes: int
    errors: list[tuple[int, tuple, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} over {self.probes} probes"


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4, probes: int = 100, rng=None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    ``probes`` random coordinates are drawn across all inputs with
    ``requires_grad``; if there are fewer coordinates than that, every one is
    checked. Relative error is ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    tracked = [t for t in inputs if t.requires_grad]
    for t in tracked:
        t.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tracked]

    coords: list[tuple[int, tuple]] = []
    total = int(np.sum([t.size for t in tracked]))
    if total <= probes:
        for k, t in enumerate(tracked):
            coords.extend((k, idx) for idx in np.ndindex(*t.shape))
    else:
        sizes = np.array([t.size for t in tracked], dtype=float)
        for _ in range(probes):
            k = int(rng.choice(len(tracked), p=sizes / sizes.sum()))
            flat = int(rng.integers(tracked[k].size))
            coords.append((k, np.unravel_index(flat, tracked[k].shape)))

    errors = []
    worst = 0.0
    with no_tape():
        for k, idx in coords:
            arr = tracked[k].data
            orig = arr[idx].copy()
            arr[idx] = orig + step
            fp = float(fn(*inputs).data)
            arr[idx] = orig - step
            fm = float(fn(*inputs).data)
            arr[idx] = orig
            fd = (fp - fm) / (2.0 * step)
            g = float(grads[k][idx])
            rel = abs(g - fd) / max(abs(g), abs(fd), floor)
            errors.append((k, tuple(int(i) for i in idx), g, fd, rel))
            worst = max(worst, rel)
    for t in tracked:
        t.grad = None
    return GradCheckReport(worst, tolerance, len(coords), errors)


def tracked_parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
