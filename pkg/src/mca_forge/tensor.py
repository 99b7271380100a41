"""Dense tensors with a tape-based reverse mode.

Storage is float32 unless a tensor is explicitly built as float64 (gradient
checking does this). Reductions and matrix products accumulate in float64 and
round back to the storage dtype.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_ACC = np.float64


class Tensor:
    """Immutable dense array. ``array`` is a read-only numpy view."""

    __slots__ = ("_array", "__weakref__")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data._array
        if dtype is None:
            dtype = np.float32
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path; caller hands over ownership of ``arr``
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")
        arr.setflags(write=False)
        t._array = arr
        return t

    @classmethod
    def zeros(cls, *shape, dtype=np.float32) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=dtype))

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def dtype(self):
        return self._array.dtype

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array.copy()

    def item(self) -> float:
        return float(self._array.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._array, dtype=dtype)

    def __len__(self):
        return self._array.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # operator sugar; every operator goes through a recorded op
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def bit_equal(a: Tensor, b: Tensor) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.array.tobytes() == b.array.tobytes()


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


# --------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records ops applied to watched tensors and replays them in reverse.

    Single-owner: a tape is bound to the thread that entered it.

        with GradTape() as tape:
            tape.watch(x)
            y = sum_all(square(x))
        (gx,) = tape.gradient(y, [x])
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._pinned: list[Tensor] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, *tensors: Tensor):
        for t in tensors:
            self._tracked.add(id(t))
            self._pinned.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        if not any(id(t) in self._tracked for t in inputs):
            return
        self._tracked.add(id(out))
        self._records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` (summed if not scalar) w.r.t. ``sources``."""
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones(target.shape, dtype=target.dtype)
        grads[id(target)] = np.asarray(seed, dtype=target.dtype)
        source_ids = {id(s) for s in sources}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or id(t) not in self._tracked:
                    continue
                prev = grads.get(id(t))
                # fan-out: accumulate
                grads[id(t)] = gi if prev is None else prev + gi
            if id(out) in source_ids:
                grads[id(out)] = g
        result = []
        for s in sources:
            g = grads.get(id(s))
            result.append(np.zeros(s.shape, dtype=s.dtype) if g is None else g.astype(s.dtype, copy=False))
        return result


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=_ACC)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True, dtype=_ACC)
    return g


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.dtype for t in ts))


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    dt = _result_dtype(a, b)
    a64 = a.array.astype(_ACC)
    b64 = b.array.astype(_ACC)
    out = Tensor._wrap((a64 @ b64).astype(dt))

    def backward(g):
        g64 = g.astype(_ACC)
        return (g64 @ b64.T).astype(a.dtype), (a64.T @ g64).astype(b.dtype)

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    out = Tensor._wrap(a.array.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        arr = a.array + b.array
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    out = Tensor._wrap(arr)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        arr = a.array - b.array
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    out = Tensor._wrap(arr)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        arr = a.array * b.array
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    out = Tensor._wrap(arr)

    def backward(g):
        return _unbroadcast(g * b.array, a.shape), _unbroadcast(g * a.array, b.shape)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.array * a.dtype.type(c))
    return _record(out, (a,), lambda g: (g * g.dtype.type(c),))


def square(a: Tensor) -> Tensor:
    out = Tensor._wrap(a.array * a.array)
    return _record(out, (a,), lambda g: (2 * g * a.array,))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.array.sum(dtype=_ACC), dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.array.size
    out = Tensor._wrap(np.asarray(a.array.sum(dtype=_ACC) / n, dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    x64 = x.array.astype(_ACC)
    if x.shape[1] == 0:
        y = x64
    else:
        e = np.exp(x64 - x64.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(y.astype(x.dtype))

    def backward(g):
        g64 = g.astype(_ACC)
        gx = y * (g64 - (g64 * y).sum(axis=1, keepdims=True))
        return (gx.astype(x.dtype),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    x64 = x.array.astype(_ACC)
    mu = x64.mean(axis=1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    g64 = gain.array.astype(_ACC)
    out = Tensor._wrap((xhat * g64 + bias.array).astype(x.dtype))

    def backward(g):
        go = g.astype(_ACC)
        dgain = (go * xhat).sum(axis=0)
        dbias = go.sum(axis=0)
        dxhat = go * g64
        dx = rstd * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx.astype(x.dtype), dgain.astype(gain.dtype), dbias.astype(bias.dtype)

    return _record(out, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    x64 = x.array.astype(_ACC)
    c = math.sqrt(2.0 / math.pi)
    x2 = x64 * x64
    inner = c * x64 * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = Tensor._wrap((0.5 * x64 * (1.0 + th)).astype(x.dtype))

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x64 * (1.0 - th * th) * dinner
        return ((g.astype(_ACC) * d).astype(x.dtype),)

    return _record(out, (x,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: trailing dims differ, {a.shape} vs {b.shape}")
    m = a.shape[0]
    out = Tensor._wrap(np.concatenate([a.array, b.array.astype(_result_dtype(a, b))], axis=0))
    return _record(out, (a, b), lambda g: (g[:m], g[m:]))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) outside {a.shape[0]} rows")
    out = Tensor._wrap(a.array[start:stop].copy())

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    out = Tensor._wrap(np.concatenate([p.array for p in parts], axis=1))
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) outside {a.shape}")
    out = Tensor._wrap(a.array[:, start:stop].copy())

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def gather_rows(table: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError(f"gather_rows: index outside table of {table.shape}")
    out = Tensor._wrap(table.array[idx])

    def backward(g):
        full = np.zeros(table.shape, dtype=_ACC)
        np.add.at(full, idx, g)
        return (full.astype(table.dtype),)

    return _record(out, (table,), backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax_rows(q k^T / sqrt(d)) v as one recorded op.

    Scores, weights and the value product stay in float64 end to end; the
    composed form ``matmul(attention_weights(q, k), v)`` is the reference.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    dt = _result_dtype(q, k, v)
    c = 1.0 / math.sqrt(q.shape[1])
    q64, k64, v64 = q.array.astype(_ACC), k.array.astype(_ACC), v.array.astype(_ACC)
    s = (q64 @ k64.T) * c
    if k.shape[0]:
        s -= s.max(axis=1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=1, keepdims=True)
    out = Tensor._wrap((w @ v64).astype(dt))

    def backward(g):
        g64 = g.astype(_ACC)
        gv = w.T @ g64
        gw = g64 @ v64.T
        gs = w * (gw - (gw * w).sum(axis=1, keepdims=True))
        gs *= c
        return (gs @ k64).astype(q.dtype), (gs.T @ q64).astype(k.dtype), gv.astype(v.dtype)

    return _record(out, (q, k, v), backward)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    d = q.shape[1]
    return softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))


# --------------------------------------------------------------------------
# finite-difference check


def grad_check(f: Callable[..., Tensor], inputs: Sequence, h: float = 1e-4) -> float:
    """Max over input coordinates of |analytic - central| / max(1, |central|).

    Inputs are promoted to float64; ``f`` must return a scalar Tensor.
    """
    if not 1e-5 < h < 1e-2:
        raise ValueError(f"step h={h} outside (1e-5, 1e-2)")
    base = [np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]

    def evaluate(arrays) -> float:
        val = f(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
        if not math.isfinite(val):
            raise ValueError("grad_check: function value is not finite")
        return val

    ts = [Tensor(a, dtype=np.float64) for a in base]
    with GradTape() as tape:
        tape.watch(*ts)
        y = f(*ts)
    if not math.isfinite(y.item()):
        raise ValueError("grad_check: function value is not finite")
    analytic = tape.gradient(y, ts)

    worst = 0.0
    for i, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = evaluate(base)
            flat[j] = old - h
            down = evaluate(base)
            flat[j] = old
            central = (up - down) / (2 * h)
            err = abs(analytic[i].reshape(-1)[j] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
