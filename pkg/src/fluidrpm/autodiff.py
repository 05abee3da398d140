"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in order;
``Tape.backward`` walks the record in reverse and accumulates gradients into
every leaf tensor created with ``requires_grad=True``.

Image tensors use NHWC layout. Convolution kernels are ``(kh, kw, C_in, C_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = "FLUIDRPM-CKPT-1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised on misuse of the tape (e.g. backward from a non-scalar)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


# backward(g, need) -> per-input gradient (None where need[i] is False)
BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]
# weighted(g, weights, need) -> per-input (K, *shape) sample-weighted gradient
WeightedFn = Callable[[np.ndarray, np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str
    weighted: WeightedFn | None = None


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for reverse traversal.

    Use as a context manager; ops run while it is active are recorded when
    any of their inputs requires a gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.out))

    def _is_leaf(self, t: Tensor) -> bool:
        return id(t) not in self._produced

    def backward(
        self,
        loss: Tensor,
        seed: np.ndarray | None = None,
        sample_weights: np.ndarray | None = None,
    ) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Gradients are added to whatever ``grad`` already holds; call
        ``zero_grad`` on the leaves between independent backward passes.

        With ``sample_weights`` of shape (K, N), ``loss`` must be an (N,)
        vector whose entries depend on disjoint rows (axis 0) of every
        recorded tensor, e.g. a per-image encoder output. Each leaf then
        receives a (K, *shape) gradient whose k-th slice is the gradient of
        ``sum_i sample_weights[k, i] * loss[i]``, at the cost of a single
        reverse pass.
        """
        weights = None
        if sample_weights is not None:
            weights = np.asarray(sample_weights, dtype=loss.dtype)
            if loss.data.ndim != 1 or weights.ndim != 2 or weights.shape[1] != loss.shape[0]:
                raise ShapeError(f"sample_weights {weights.shape} incompatible with output {loss.shape}")
            seed = np.ones_like(loss.data)
        elif seed is None:
            if loss.size != 1:
                raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        elif np.shape(seed) != loss.shape:
            raise ShapeError(f"seed shape {np.shape(seed)} != output shape {loss.shape}")
        seed = np.asarray(seed, dtype=loss.dtype)

        if self._is_leaf(loss):
            if not loss.requires_grad:
                raise UsageError("loss was not recorded on this tape; compute it inside the `with Tape()` block")
            _accumulate_leaf(loss, seed if weights is None else weights * seed)
            return

        pending: dict[int, np.ndarray] = {id(loss): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            leaf = [inp.requires_grad and self._is_leaf(inp) for inp in node.inputs]
            inner = [inp.requires_grad and not self._is_leaf(inp) for inp in node.inputs]
            if weights is None:
                need = [a or b for a, b in zip(leaf, inner)]
                grads = node.backward(g, need)
                for inp, gi, is_leaf, needed in zip(node.inputs, grads, leaf, need):
                    if not needed or gi is None:
                        continue
                    if is_leaf:
                        _accumulate_leaf(inp, gi, owned=not np.may_share_memory(gi, g))
                    else:
                        _push(pending, inp, gi)
                continue

            if any(inner):
                for inp, gi, needed in zip(node.inputs, node.backward(g, inner), inner):
                    if needed and gi is not None:
                        _push(pending, inp, gi)
            if any(leaf):
                wfn = node.weighted or _weighted_fallback(node)
                for inp, gi, needed in zip(node.inputs, wfn(g, weights, leaf), leaf):
                    if needed and gi is not None:
                        _accumulate_leaf(inp, gi, owned=not np.may_share_memory(gi, g))


def _push(pending: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    prev = pending.get(id(t))
    pending[id(t)] = g if prev is None else prev + g


def _weighted_fallback(node: _Node) -> WeightedFn:
    # Generic route: one masked reverse step per sample row.
    def fn(g, weights, need):
        n = g.shape[0]
        total: list[np.ndarray | None] = [None] * len(node.inputs)
        for i in range(n):
            gi = np.zeros_like(g)
            gi[i] = g[i]
            parts = node.backward(gi, need)
            for j, part in enumerate(parts):
                if not need[j] or part is None:
                    continue
                contrib = weights[:, i].reshape((-1,) + (1,) * part.ndim) * part
                total[j] = contrib if total[j] is None else total[j] + contrib
        return total

    return fn


def _accumulate_leaf(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    g = np.asarray(g)
    if t.grad is None:
        # an owned array was freshly allocated by the op and can be adopted
        t.grad = g.astype(t.dtype, copy=not (owned and g.flags.c_contiguous))
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape | None = None, seed: np.ndarray | None = None) -> None:
    """Run reverse accumulation on ``tape`` (default: the innermost active tape)."""
    if tape is None:
        if not _ACTIVE:
            raise UsageError("no active tape")
        tape = _ACTIVE[-1]
    tape.backward(loss, seed)


def _make(data, inputs: tuple[Tensor, ...], fn: BackwardFn, op: str, weighted: WeightedFn | None = None) -> Tensor:
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _ACTIVE[-1].record(_Node(out, inputs, fn, op, weighted))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g, need: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g, need: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g, need: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    # derivative at exactly 0 is taken as 0
    return _make(y, (x,), lambda g, need: (g * (x.data > 0),), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g, need: (g * (1 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g, need: (g * y,), "exp")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(x.data), (x,), lambda g, need: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g, need: (2 * g * x.data,), "square")


# ---------------------------------------------------------------------------
# reductions and indexing
# ---------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _make(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g, need: (np.full(x.shape, g, dtype=x.dtype),),
        "sum",
    )


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g, need: (np.full(x.shape, g / n, dtype=x.dtype),),
        "mean",
    )


def reduce_max(x: Tensor) -> Tensor:
    """Global maximum; the gradient goes to the first maximal element."""
    flat = x.data.reshape(-1)
    k = int(np.argmax(flat))

    def fn(g, need):
        dx = np.zeros(x.size, dtype=x.dtype)
        dx[k] = g
        return (dx.reshape(x.shape),)

    return _make(np.asarray(flat[k], dtype=x.dtype), (x,), fn, "reduce_max")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g, need: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""

    def fn(g, need):
        dx = np.zeros(x.shape, dtype=x.dtype)
        dx[index] = g
        return (dx,)

    return _make(np.array(x.data[index]), (x,), fn, "take")


def constant(value, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for ``x`` of shape (N, I) and ``W`` of shape (I, O)."""
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match output width {weights.shape[1]}")
    xd, wd = x.data, weights.data
    out = xd @ wd + bias.data

    def fn(g, need):
        return (
            g @ wd.T if need[0] else None,
            xd.T @ g if need[1] else None,
            g.sum(axis=0) if need[2] else None,
        )

    def weighted(g, sw, need):
        dw = np.matmul(xd.T[None], g[None] * sw[:, :, None]) if need[1] else None
        db = sw @ g if need[2] else None
        dx = sw[:, :, None] * (g @ wd.T)[None] if need[0] else None
        return dx, dw, db

    return _make(out, (x, weights, bias), fn, "dense", weighted)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (N, Ho, Wo, C, kh, kw) -> rows ordered (kh, kw, C) to match the kernel layout
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NHWC batch."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and 4-d kernels, got {x.shape}, {kernels.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, o = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kd = kernels.data
    out = (cols @ kd.reshape(kh * kw * c, o)).reshape(n, ho, wo, o)
    out += bias.data

    def grad_input(g):
        dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g @ kd[i, j].T
        return dxp[:, padding : padding + h, padding : padding + w, :] if padding else dxp

    def fn(g, need):
        g2 = g.reshape(-1, o)
        return (
            grad_input(g) if need[0] else None,
            (g2.T @ cols).T.reshape(kd.shape) if need[1] else None,
            g2.sum(axis=0) if need[2] else None,
        )

    def weighted(g, sw, need):
        g3 = g.reshape(n, ho * wo, o)
        dk = db = dx = None
        if need[1]:
            per_image = np.matmul(g3.transpose(0, 2, 1), cols.reshape(n, ho * wo, -1))
            dk = (sw @ per_image.reshape(n, -1)).reshape((-1, o, kh * kw * c)).transpose(0, 2, 1).reshape((-1,) + kd.shape)
        if need[2]:
            db = sw @ g3.sum(axis=1)
        if need[0]:
            dx = sw.reshape(sw.shape + (1, 1, 1)) * grad_input(g)[None]
        return dx, dk, db

    return _make(out, (x, kernels, bias), fn, "conv2d", weighted)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over an NHWC batch.

    Output size is ``(H - window) // stride + 1``; trailing rows/columns that
    do not fill a whole window are dropped. The gradient of each window goes
    to its first (row-major) maximum.
    """
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    if window < 1 or stride < 1:
        raise ShapeError("maxpool2d: window and stride must be positive")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    xd = x.data

    def tap(i, j):
        return (
            slice(None),
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride),
            slice(None),
        )

    taps = [tap(*divmod(k, window)) for k in range(window * window)]
    # elementwise max over strided taps; far cheaper than a reshaped axis reduction
    out = np.maximum(xd[taps[0]], xd[taps[1]]) if len(taps) > 1 else xd[taps[0]].copy()
    for sl in taps[2:]:
        np.maximum(out, xd[sl], out=out)

    def fn(g, need):
        dx = np.zeros(x.shape, dtype=g.dtype)
        # walk taps in row-major order so ties resolve to the earliest element
        taken = np.zeros(out.shape, dtype=bool)
        for sl in taps:
            hit = xd[sl] == out
            hit &= ~taken
            taken |= hit
            dx[sl] += g * hit
        return (dx,)

    return _make(out, (x,), fn, "maxpool2d")


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: dict[str, Tensor]) -> None:
    """Write ``params`` as little-endian float32 preceded by a shape manifest line.

    Layout: ``FLUIDRPM-CKPT-1\\n``, then one line ``name:d0xd1x...;name:...``,
    then the concatenated raw values in manifest order.
    """
    entries = []
    for name, t in params.items():
        if any(ch in name for ch in ":;\n"):
            raise ValueError(f"parameter name {name!r} may not contain ':', ';' or newlines")
        entries.append(f"{name}:{'x'.join(str(d) for d in t.shape) or '1'}")
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}\n{';'.join(entries)}\n".encode("ascii"))
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 2)
    if len(parts) != 3:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, manifest, payload = parts
    if magic.decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint header {magic[:32]!r}")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest.decode("ascii").split(";") if manifest else []:
        name, dims = entry.split(":")
        shape = tuple(int(d) for d in dims.split("x"))
        count = int(np.prod(shape))
        chunk = payload[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise ValueError(f"{path}: payload too short for {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return arrays


PIECEWISE_OPS = frozenset({"relu", "abs", "maxpool2d", "reduce_max"})


def active_pattern(tape: Tape) -> list[np.ndarray]:
    """Which branch every piecewise-linear op on ``tape`` took.

    Two forwards with equal patterns lie in the same smooth region, which is
    what a finite-difference check needs to be meaningful.
    """
    out = []
    for node in tape.nodes:
        if node.op in PIECEWISE_OPS:
            g = node.backward(np.ones_like(node.out.data), (True,))[0]
            out.append(np.sign(g).astype(np.int8))
    return out


__all__ = [
    "CHECKPOINT_MAGIC",
    "ShapeError",
    "Tape",
    "Tensor",
    "UsageError",
    "PIECEWISE_OPS",
    "abs",
    "active_pattern",
    "add",
    "backward",
    "constant",
    "conv2d",
    "dense",
    "exp",
    "load_checkpoint",
    "maxpool2d",
    "mean",
    "mul",
    "reduce_max",
    "relu",
    "reshape",
    "save_checkpoint",
    "square",
    "sub",
    "sum",
    "take",
    "tanh",
]
