"""Small dense-tensor engine with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Every differentiable op records its parents
and a closure mapping the upstream gradient to one gradient per parent, so a
graph is rebuilt on every forward pass (dynamic tape).

Broadcasting is deliberately narrow: a tensor may be combined with a scalar,
with a row vector matching its last dimension (bias add / per-feature scale),
or with an identically shaped tensor.  Anything else goes through an explicit
op such as :func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "parameter",
    "no_grad",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "save_archive",
    "load_archive",
    "ArchiveError",
]

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's contract."""

    def __init__(self, primitive: str, *shapes):
        dims = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {dims}")
        self.primitive = primitive
        self.shapes = shapes


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_ids)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

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
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _is_row(t: Tensor, ref: Tensor) -> bool:
    return t.ndim == 1 and ref.ndim >= 1 and t.shape[0] == ref.shape[-1] and ref.ndim > 1


def _reduce_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if _is_row(b, a) or _is_scalar(b):
        red = _reduce_to_row if _is_row(b, a) else (lambda g: np.sum(g).reshape(b.shape))
        return _node(a.data + b.data, (a, b), lambda g: (g, red(g)), "add")
    if _is_row(a, b) or _is_scalar(a):
        return add(b, a)
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    return add(a, scale(_lift(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if _is_scalar(b):
        return _node(a.data * b.data, (a, b),
                     lambda g: (g * b.data, np.sum(g * a.data).reshape(b.shape)), "mul")
    if _is_row(b, a):
        return _node(a.data * b.data, (a, b),
                     lambda g: (g * b.data, _reduce_to_row(g * a.data)), "mul")
    if _is_scalar(a) or _is_row(a, b):
        return mul(b, a)
    raise ShapeError("mul", a.shape, b.shape)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,), "scale")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        if _is_scalar(b) and not b.requires_grad:
            return scale(a, 1.0 / b.item())
        raise ShapeError("div", a.shape, b.shape)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("maximum", a.shape, b.shape)
    mask = a.data >= b.data
    return _node(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (g * mask, g * ~mask), "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("minimum", a.shape, b.shape)
    mask = a.data <= b.data
    return _node(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (g * mask, g * ~mask), "minimum")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _stable_sigmoid(-x),), "log_sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def power(a: Tensor, k: float) -> Tensor:
    k = float(k)
    x = a.data
    if k == 2.0:
        return _node(x * x, (a,), lambda g: (2.0 * g * x,), "power")
    return _node(x ** k, (a,), lambda g: (g * k * x ** (k - 1.0),), "power")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# normalisations along the last axis
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), grad, "softmax")


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over the last axis (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def grad(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), grad, "layernorm")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + eps
    out = x / norm

    def grad(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _node(out, (a,), grad, "l2_normalize")


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def grad(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(out, (a, b), grad, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose-2d", a.shape)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Tile ``a`` along new leading axes so that it has ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or shape[lead:] != a.shape:
        raise ShapeError("broadcast_to", a.shape, shape)
    out = np.broadcast_to(a.data, shape)
    axes = tuple(range(lead))
    return _node(out, (a,), lambda g: (g.sum(axis=axes),), "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = isinstance(index, (int, slice)) or (
        isinstance(index, tuple) and all(isinstance(i, (int, slice)) for i in index))
    if not basic:
        arr = np.asarray(index)
        basic = arr.dtype.kind in "iu" and arr.ndim == 1 and np.unique(arr).size == arr.size

    def grad(g):
        full = np.zeros_like(a.data)
        if basic:  # no repeated targets, plain assignment is exact
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), grad, "getitem")


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim < 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError("gather-rows", a.shape, idx.shape)
    return getitem(a, idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def sum_(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.data.sum(axis=axis)
    return _node(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / max(n, 1))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softmax-lastdim": softmax,
    "layernorm-lastdim": layernorm,
    "relu": relu,
    "gather-rows": gather_rows,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "mean": mean,
    "sum": sum_,
    "transpose-2d": transpose,
    # extensions used by the box and classification losses
    "sub": sub,
    "div": div,
    "maximum": maximum,
    "minimum": minimum,
    "abs": abs_,
    "power": power,
    "log-sigmoid": log_sigmoid,
    "l2-normalize-lastdim": l2_normalize,
    "reshape": reshape,
    "permute": permute,
    "broadcast-to": broadcast_to,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("matmul", a, b)``."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every grad-requiring ancestor."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {root.node_id: np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        # gradients are never mutated in place, so sharing ``g`` is safe
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative gap between the analytic gradient and central differences.

    ``f`` maps the tensor ``x`` to a scalar tensor; ``x`` is perturbed in place
    and restored.
    """
    x.grad = None
    x.requires_grad = True
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(x).item()
            flat[i] = orig - step
            lo = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    x.grad = None
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


# ---------------------------------------------------------------------------
# named-tensor archive
# ---------------------------------------------------------------------------

MAGIC = b"LWA1"


class ArchiveError(ValueError):
    def __init__(self, message: str, record: str | None = None):
        super().__init__(message if record is None else f"{message} (record {record!r})")
        self.record = record


def encode_archive(arrays: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Serialise ``(name, array)`` pairs in order.

    Layout: ``LWA1`` then per record ``u32 name_len | name utf-8 | u32 rank |
    u32 dims[rank] | float64 payload``, all little-endian.
    """
    chunks = [MAGIC]
    for name, arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode_archive(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ArchiveError("bad magic bytes")
    out: dict[str, np.ndarray] = {}
    pos, n = 4, len(blob)
    name = None
    try:
        while pos < n:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + nlen > n:
                raise ArchiveError("truncated name", name)
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > n:
                raise ArchiveError("truncated payload", name)
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise ArchiveError(f"corrupt archive: {exc}", name) from None
    return out


def save_archive(path, arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_archive(arrays))


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_archive(fh.read())
