"""Dense-tensor math with reverse-mode autodiff on numpy arrays.

Everything the model needs lives here: the taped ops, trainable/frozen
parameters, a seeded RNG (Box-Muller normals), a central-difference
gradient oracle, and the flat binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import math
import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64
DTYPES = {"f32": F32, "f64": F64}
_DTYPE_TAGS = {0: F32, 1: F64}
_TAG_OF = {np.dtype(F32): 0, np.dtype(F64): 1}

MASK_FILL = -1e9  # additive bias on masked attention logits


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NoTargets(ValueError):
    """Raised when a cross-entropy call has no non-pad target positions."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / numeric evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=F64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


class Parameter:
    """Named weight with a trainable flag; frozen parameters never accumulate gradient."""

    __slots__ = ("name", "tensor", "trainable", "decay")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable)
        self.trainable = trainable
        # weight decay targets matrices only, never biases / layer-norm vectors
        self.decay = data.ndim >= 2

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> np.ndarray:
        if self.tensor.grad is None:
            return np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.tensor.requires_grad = flag

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.data.shape}, {state})"


def _trace(inputs: Sequence[Tensor]) -> bool:
    return _grad_enabled and any(t.requires_grad for t in inputs)


def _make(data, inputs, backward):
    if _trace(inputs):
        return Tensor(data, requires_grad=True, parents=tuple(inputs), backward=backward)
    return Tensor(data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else F64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# op suite


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(as_tensor(b, like=a), -1.0))


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * a.data.dtype.type(c))

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _make(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.data.shape}")
    out = a.data.T

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.T)

    return _make(out, (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [p for p in parts if p.data.shape[0] > 0]
    if not parts:
        raise ShapeError("concat_rows: all parts empty")
    widths = {p.data.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: mismatched trailing dims {widths}")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[off:off + n])
            off += n

    return _make(out, tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a.accumulate(full)

    return _make(out, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a.accumulate(full)

    return _make(out, (a,), backward)


def mean_axis0(a: Tensor) -> Tensor:
    n = a.data.shape[0]
    if n == 0:
        raise ShapeError("mean_axis0 over empty axis")
    out = a.data.mean(axis=0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))

    return _make(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, g))

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.min() < 0:
        raise ShapeError("embedding index out of range: negative id")
    try:
        out = table.data[ids]
    except IndexError as exc:
        raise ShapeError(
            f"embedding index out of range: {exc} (table has {table.data.shape[0]} rows)"
        ) from None

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table.accumulate(full)

    return _make(out, (table,), backward)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            a.accumulate(out * (g - dot))

    return _make(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh form of the Gaussian error linear unit
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 0.134145 * x2)
            a.accumulate(g * d.astype(x.dtype))

    return _make(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    if gain.data.shape != (x.shape[-1],) or bias.data.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shape {gain.data.shape} vs feature dim {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        d = x.shape[-1]
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            a.accumulate((gx - s1 / d - xhat * s2 / d) * inv)

    return _make(out, (a, gain, bias), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b with the bias broadcast over rows."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, backward)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, bias: np.ndarray | None = None) -> Tensor:
    """Fused masked multi-head attention over row matrices.

    ``bias`` broadcasts against the (Lq, Lk) score matrix; masked keys carry
    MASK_FILL so their weight underflows to zero in the softmax.
    """
    d = q.data.shape[1]
    if d % n_heads:
        raise ShapeError(f"attention: dim {d} not divisible by {n_heads} heads")
    if k.data.shape != v.data.shape or k.data.shape[1] != d:
        raise ShapeError(f"attention: q{q.data.shape} k{k.data.shape} v{v.data.shape}")
    lq, lk = q.data.shape[0], k.data.shape[0]
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)

    def heads(m, n):
        return m.reshape(n, n_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = heads(q.data, lq), heads(k.data, lk), heads(v.data, lk)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * inv
    if bias is not None:
        scores = scores + np.asarray(bias, dtype=scores.dtype)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, vh).transpose(1, 0, 2).reshape(lq, d)

    def backward(g):
        gh = heads(g, lq)
        if v.requires_grad:
            dvh = np.matmul(attn.transpose(0, 2, 1), gh)
            v.accumulate(dvh.transpose(1, 0, 2).reshape(lk, d))
        if q.requires_grad or k.requires_grad:
            d_attn = np.matmul(gh, vh.transpose(0, 2, 1))
            ds = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                dqh = np.matmul(ds, kh) * inv
                q.accumulate(dqh.transpose(1, 0, 2).reshape(lq, d))
            if k.requires_grad:
                dkh = np.matmul(ds.transpose(0, 2, 1), qh) * inv
                k.accumulate(dkh.transpose(1, 0, 2).reshape(lk, d))

    return _make(out, (q, k, v), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[:, off:off + n])
            off += n

    return _make(out, tuple(parts), backward)


def softmax_cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-likelihood (nats) over non-pad target positions."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs targets {t.shape}")
    vocab = logits.data.shape[1]
    valid = t != pad_id
    n = int(valid.sum())
    if n == 0:
        raise NoTargets("cross_entropy: every target position is pad")
    if t[valid].max() >= vocab or t[valid].min() < 0:
        raise ShapeError(f"cross_entropy: target id outside vocab of {vocab}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    safe_t = np.where(valid, t, 0)
    nll = lse - x[np.arange(len(t)), safe_t]
    out = np.asarray(nll[valid].sum() / n, dtype=x.dtype)

    def backward(g):
        if logits.requires_grad:
            sm = np.exp(x - m)
            sm /= sm.sum(axis=-1, keepdims=True)
            sm[np.arange(len(t)), safe_t] -= 1.0
            sm[~valid] = 0.0
            logits.accumulate(sm * (g / n))

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into .grad fields."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # interior activations are single-use


# ---------------------------------------------------------------------------
# seeded randomness


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2s(f"{seed}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RandomStream:
    """Deterministic random stream: PCG64 uniforms, normals via Box-Muller."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, label: str) -> "RandomStream":
        """Independent child stream keyed on a stable label."""
        return RandomStream(_derive_seed(self.seed, label))

    def uniform(self, shape=None) -> np.ndarray | float:
        if shape is None:
            return float(self._gen.random(dtype=np.float64))
        return self._gen.random(size=shape, dtype=np.float64)

    def normal(self, shape=None, std: float = 1.0, mean: float = 0.0):
        n = 1 if shape is None else int(np.prod(shape))
        u1 = self._gen.random(size=n, dtype=np.float64)
        u2 = self._gen.random(size=n, dtype=np.float64)
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)
        z = mean + std * z
        if shape is None:
            return float(z[0])
        return z.reshape(shape)

    def randint(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def choice(self, items: Sequence):
        return items[self.randint(len(items))]

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample_indices(self, n: int, k: int) -> list[int]:
        """First k slots of a Fisher-Yates shuffle of range(n)."""
        k = min(k, n)
        arr = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k]


def seeded_rng(seed: int) -> RandomStream:
    return RandomStream(seed)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Evaluates f twice per parameter element, so keep the model micro-sized.
    Requires f64 parameters; returns 0.0 for an empty parameter set.
    """
    params = [p for p in params]
    if not params:
        return 0.0
    for p in params:
        if p.data.dtype != np.dtype(F64):
            raise ValueError(f"finite_diff_check needs f64 parameters, {p.name} is {p.data.dtype}")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    max_rel = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)  # reshape below must be a view
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                denom = max(abs(aflat[i]), abs(numeric), 1e-8)
                rel = abs(aflat[i] - numeric) / denom
                if rel > max_rel:
                    max_rel = rel
    return max_rel


# ---------------------------------------------------------------------------
# checkpoint format: magic "IDRW", version, count, then per-parameter records


CHECKPOINT_MAGIC = b"IDRW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    """Write parameters sorted by name; byte-identical for identical weights."""
    items = sorted(params, key=lambda p: p.name)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for p in items:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.data)
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", _TAG_OF[arr.dtype]))
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (tag,) = struct.unpack("<B", fh.read(1))
            dtype = _DTYPE_TAGS[tag]
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = fh.read(n * np.dtype(dtype).itemsize)
            arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
            out[name] = arr.reshape(dims)
        return out
