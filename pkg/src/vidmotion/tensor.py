"""Dense float32 tensors, a reverse-mode autodiff tape, and an Adam step.

Tensors are immutable numpy-backed values; every public operation returns a
new tensor. Gradient tracking is opt-in: a Tape records primitive
applications in construction (= topological) order, and backward() walks the
record once, accumulating gradients per node.
"""
from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Gradient bookkeeping misuse: wrong tape, non-scalar loss, mixed tapes."""


class Node:
    """One recorded primitive application."""

    __slots__ = ("tape", "idx", "op", "parents", "backward_fn")

    def __init__(self, tape, idx, op, parents, backward_fn):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional row-major float32 array, optionally tracked on a tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Node | None = None):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.node is None else f", node={self.node.idx}"
        return f"Tensor(shape={self.shape}{tracked})"

    # small amount of operator sugar; everything routes through module ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications plus the gradient map."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, Tensor] = {}

    def watch(self, t: Tensor) -> Tensor:
        """Return a copy of ``t`` tracked as a leaf on this tape."""
        node = self._record("leaf", (), None)
        return Tensor(t.data, node)

    def _record(self, op, parents, backward_fn) -> Node:
        node = Node(self, len(self.nodes), op, parents, backward_fn)
        self.nodes.append(node)
        return node

    def grad(self, t: Tensor) -> Tensor | None:
        """Gradient of the last backward() for ``t``, or None if unreached."""
        if t.node is None or t.node.tape is not self:
            return None
        return self.gradients.get(t.node.idx)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Populate tape.gradients for every node reachable from a scalar loss."""
    if loss.node is None or loss.node.tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node.idx: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.idx)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent is None or pg is None:
                continue
            acc = grads.get(parent.idx)
            grads[parent.idx] = pg if acc is None else acc + pg
    tape.gradients = {idx: Tensor(g) for idx, g in grads.items()}
    return tape.gradients


def _find_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.node.tape
            elif tape is not t.node.tape:
                raise TapeError("inputs were recorded on different tapes")
    return tape


def _result(op: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _find_tape(inputs)
    if tape is None:
        return Tensor(out)
    node = tape._record(op, tuple(t.node for t in inputs), backward_fn)
    return Tensor(out, node)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return _result("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
    return _result("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    return _result("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result("scale", (a,), a.data * np.float32(c), lambda g: (g * np.float32(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return _result("matmul", (a, b), out,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over one leading axis: (B,m,k) x (B,k,n) -> (B,m,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"cannot bmm shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return _result("bmm", (a, b), out,
                   lambda g: (g @ b.data.transpose(0, 2, 1),
                              a.data.transpose(0, 2, 1) @ g))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    in_shape = a.shape
    return _result("reshape", (a,), out, lambda g: (g.reshape(in_shape),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat requires at least one part")
    rank = parts[0].data.ndim
    if not 0 <= axis < rank:
        raise ShapeError(f"concat axis {axis} out of range for rank {rank}")
    for p in parts[1:]:
        if p.data.ndim != rank or any(
                p.shape[i] != parts[0].shape[i] for i in range(rank) if i != axis):
            raise ShapeError(
                f"concat extents disagree off axis {axis}: "
                f"{parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g):
        sl = [slice(None)] * rank
        pieces = []
        for i in range(len(offsets) - 1):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _result("concat", parts, out, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    rank = a.data.ndim
    if not 0 <= axis < rank:
        raise ShapeError(f"slice axis {axis} out of range for rank {rank}")
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] invalid for extent {a.shape[axis]}")
    sl = [slice(None)] * rank
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=np.float32)
        full[sl] = g
        return (full,)

    return _result("slice", (a,), np.ascontiguousarray(a.data[sl]), bwd)


def repeat_axis(a: Tensor, axis: int, times: int) -> Tensor:
    """Repeat each element ``times`` times along ``axis`` (nearest upsample)."""
    a = _as_tensor(a)
    if times < 1:
        raise ShapeError("repeat count must be >= 1")
    out = np.repeat(a.data, times, axis=axis)
    in_shape = a.shape

    def bwd(g):
        folded = g.reshape(in_shape[:axis] + (in_shape[axis], times) + in_shape[axis + 1:])
        return (folded.sum(axis=axis + 1),)

    return _result("repeat", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)
    in_shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(np.float32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).astype(np.float32),)

    return _result("sum", (a,), np.asarray(out, dtype=np.float32), bwd)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    in_shape = a.shape
    n = a.data.size if axis is None else in_shape[axis]

    def bwd(g):
        if axis is None:
            return ((np.broadcast_to(g, in_shape) / np.float32(n)).astype(np.float32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, in_shape) / np.float32(n)).astype(np.float32),)

    return _result("mean", (a,), np.asarray(out, dtype=np.float32), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    rank = a.data.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"softmax axis {axis} out of range for rank {rank}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", (a,), out, bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig
    x = a.data
    return _result("silu", (a,), out,
                   lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float32)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xh = xc * inv
    out = gamma.data * xh + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xh).sum(axis=lead) if lead else g * xh
        dbeta = g.sum(axis=lead) if lead else g
        dxh = g * gamma.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                    - xh * (dxh * xh).mean(axis=-1, keepdims=True))
        return (dx.astype(np.float32), dgamma.astype(np.float32),
                dbeta.astype(np.float32))

    return _result("layer_norm", (x, gamma, beta), out, bwd)


def conv_temporal(x: Tensor, kernel: Tensor) -> Tensor:
    """Convolve along the frame axis (axis 0) with same-size zero padding.

    A rank-1 kernel (kw,) filters every channel/location identically; a
    rank-3 kernel (C_out, C_in, kw) also mixes channels, with channels on
    axis 1 of ``x``. Kernel width must be odd.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    kw = kernel.shape[-1]
    if kw % 2 == 0:
        raise ShapeError(f"temporal kernel width must be odd, got {kw}")
    if kernel.data.ndim not in (1, 3):
        raise ShapeError(f"kernel must be rank 1 or 3, got shape {kernel.shape}")
    frames = x.shape[0]
    pad = kw // 2
    pad_block = np.zeros((pad,) + x.shape[1:], dtype=np.float32)
    xp = np.concatenate([pad_block, x.data, pad_block], axis=0)

    if kernel.data.ndim == 1:
        out = np.zeros_like(x.data)
        for j in range(kw):
            out += kernel.data[j] * xp[j:j + frames]

        def bwd(g):
            dxp = np.zeros_like(xp)
            dk = np.zeros_like(kernel.data)
            for j in range(kw):
                dxp[j:j + frames] += kernel.data[j] * g
                dk[j] = np.float32((g * xp[j:j + frames]).sum(dtype=np.float64))
            return (dxp[pad:pad + frames], dk)

        return _result("conv_t", (x, kernel), out, bwd)

    c_out, c_in, _ = kernel.shape
    if x.data.ndim < 2 or x.shape[1] != c_in:
        raise ShapeError(f"input channels {x.shape} do not match kernel {kernel.shape}")
    tail = x.shape[2:]
    xpf = xp.reshape(frames + 2 * pad, c_in, -1)
    out = np.zeros((frames, c_out, xpf.shape[2]), dtype=np.float32)
    for j in range(kw):
        out += np.matmul(kernel.data[:, :, j], xpf[j:j + frames])

    def bwd3(g):
        gf = g.reshape(frames, c_out, -1)
        dxp = np.zeros_like(xpf)
        dk = np.zeros_like(kernel.data)
        for j in range(kw):
            dxp[j:j + frames] += np.matmul(kernel.data[:, :, j].T, gf)
            dk[:, :, j] = np.tensordot(gf, xpf[j:j + frames], axes=([0, 2], [0, 2]))
        return (dxp[pad:pad + frames].reshape((frames, c_in) + tail), dk)

    return _result("conv_t", (x, kernel),
                   out.reshape((frames, c_out) + tail).astype(np.float32), bwd3)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moment accumulators; step counter strictly increases."""

    def __init__(self, lr: float = 3e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor | None],
              state: AdamState) -> dict[str, Tensor]:
    """One Adam update; returns new parameter tensors (inputs untouched)."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        garr = np.zeros_like(p.data) if g is None else g.data
        if garr.shape != p.data.shape:
            raise ShapeError(f"gradient shape {garr.shape} does not match "
                             f"parameter {name} shape {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * garr
        v = state.beta2 * v + (1.0 - state.beta2) * garr * garr
        state.m[name] = m
        state.v[name] = v
        mhat = m / bc1
        vhat = v / bc2
        out[name] = Tensor(p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# randomness and the tensor container


class Rng:
    """The library's single named pseudorandom stream (PCG64)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Sequence[int], std: float = 1.0) -> Tensor:
        return Tensor(self._gen.normal(0.0, std, size=tuple(shape)).astype(np.float32))

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
        return Tensor(self._gen.uniform(low, high, size=tuple(shape)).astype(np.float32))

    def integer(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float32))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=np.float32))


_MAGIC = b"MELT"
_VERSION = 1
_DTYPE_F32 = 0


def tensor_bytes(t: Tensor) -> bytes:
    """Serialize: magic, version, dtype code, rank u32, dims u32, f32 payload (LE)."""
    dims = t.shape
    head = _MAGIC + bytes([_VERSION, _DTYPE_F32]) + struct.pack("<I", len(dims))
    head += b"".join(struct.pack("<I", d) for d in dims)
    return head + t.data.astype("<f4", copy=False).tobytes(order="C")


def tensor_from_bytes(raw: bytes) -> Tensor:
    if raw[:4] != _MAGIC:
        raise ValueError("not a MELT container (bad magic)")
    if raw[4] != _VERSION:
        raise ValueError(f"unsupported MELT version {raw[4]}")
    if raw[5] != _DTYPE_F32:
        raise ValueError(f"unsupported dtype code {raw[5]}")
    (rank,) = struct.unpack_from("<I", raw, 6)
    dims = struct.unpack_from(f"<{rank}I", raw, 10)
    offset = 10 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return Tensor(data.reshape(dims).astype(np.float32))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
