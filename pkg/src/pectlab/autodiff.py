"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation of one forward pass. ``backward`` walks
the records in exact reverse order, once; a tape cannot be reused.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.constant(np.arange(3.0)[None, :])
    y = ad.sum(x @ w)
    tape.backward(y)
    w.grad   # broadcast of x
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SQRT_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "id", "requires_grad", "grad", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool, name: str | None = None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = tape._next_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.id}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_const(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: list[Tensor] = []
        self._count = 0
        self._used = False

    def _next_id(self) -> int:
        self._count += 1
        return self._count

    def leaf(self, value, requires_grad: bool = True, name: str | None = None) -> Tensor:
        v = np.array(value, dtype=np.float64)
        _check_finite(v, "leaf")
        t = Tensor(v, self, requires_grad, name)
        if requires_grad:
            self._leaves.append(t)
        return t

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, out: Tensor) -> None:
        """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every gradient leaf."""
        if self._used:
            raise TapeError("backward was already called on this tape")
        if out.tape is not self:
            raise TapeError("output tensor belongs to a different tape")
        if out.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {out.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
        for node, parents, fn in reversed(self._records):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p.id in grads:
                    grads[p.id] = grads[p.id] + gp
                else:
                    grads[p.id] = gp
        for leaf in self._leaves:
            leaf.grad = grads.get(leaf.id, np.zeros_like(leaf.value))


def _check_finite(v: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise TapeError("tensors from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _emit(op: str, value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(value, op)
    tape = parents[0].tape
    rg = any(p.requires_grad for p in parents)
    out = Tensor(value, tape, rg)
    if rg:
        tape._records.append((out, tuple(parents), backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant broadcastable to ``x.shape`` (no gradient to ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ValueError(f"mul_const: constant of shape {c.shape} does not broadcast to {x.shape}")
    return _emit("mul_const", x.value * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _emit("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def square(x: Tensor) -> Tensor:
    v = x.value
    return _emit("square", v * v, (x,), lambda g: (2.0 * g * v,))


def sqrt(x: Tensor, eps: float = SQRT_EPS) -> Tensor:
    """``sqrt(x + eps)``; differentiable at 0."""
    y = np.sqrt(x.value + eps)
    return _emit("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def identity(x: Tensor) -> Tensor:
    return x


def detach(x: Tensor) -> Tensor:
    return x.tape.constant(x.value.copy())


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D/3-D operands; a 2-D right operand is shared across the batch."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {av.shape} vs {bv.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        if bv.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *bv.shape).sum(axis=0)
        if av.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *av.shape).sum(axis=0)
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), back)


def bias_add(x: Tensor, b) -> Tensor:
    """Add ``b`` over the trailing ``b.ndim`` axes of ``x``."""
    b = _lift(b, x.tape)
    k = b.ndim
    if x.shape[x.ndim - k:] != b.shape:
        raise ValueError(f"bias_add: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - k))
    return _emit("bias_add", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    for x in xs:
        if x.ndim != xs[0].ndim or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ValueError("concat: shape mismatch off the concatenation axis")
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([x.value for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _emit("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather from the per-sample flattened trailing axes.

    ``x`` has shape ``(B, ...)``; output is ``(B,) + index.shape``. Used to
    build convolution patches.
    """
    index = np.asarray(index, dtype=np.int64)
    b = x.shape[0]
    flat = x.value.reshape(b, -1)
    src = x.shape

    def back(g):
        acc = np.zeros_like(flat)
        np.add.at(acc, (slice(None), index), g)
        return (acc.reshape(src),)

    return _emit("take", flat[:, index], (x,), back)


# --------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    src = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _emit("sum", np.asarray(x.value.sum(axis=axis)), (x,), back)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    n = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul_const(sum(x, axis), 1.0 / n)


def l2_norm(x: Tensor, axis: int | None = -1, eps: float = SQRT_EPS) -> Tensor:
    """``sqrt(sum(x**2) + eps)`` along ``axis`` (all elements when ``None``)."""
    return sqrt(sum(square(x), axis), eps)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    mu = x.value.mean(axis=-1, keepdims=True)
    c = x.value - mu
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    y = c * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer_norm", y, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), back)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy ``-log softmax(logits)[label]``, shape ``(B,)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("label out of range")
    logp = log_softmax_np(logits.value)
    rows = np.arange(labels.size)
    p = np.exp(logp)

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _emit("softmax_cross_entropy", -logp[rows, labels], (logits,), back)


# --------------------------------------------------------------------------
# parameter checkpoints

CKPT_MAGIC = b"PECTCKPT"
CKPT_VERSION = 1


def save_params(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Flat little-endian checkpoint: magic, version, JSON meta, named float64 blocks."""
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, len(meta_blob), len(params)), meta_blob]
    for name in sorted(params):
        arr = np.array(params[name], dtype="<f8", order="C")
        key = name.encode()
        parts.append(struct.pack("<HB", len(key), arr.ndim))
        parts.append(key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, meta_len, count = struct.unpack_from("<III", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    meta = json.loads(blob[pos:pos + meta_len].decode())
    pos += meta_len
    params = {}
    for _ in range(count):
        klen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + klen].decode()
        pos += klen
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return params, meta
