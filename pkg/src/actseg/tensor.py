"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly the primitives the segmentation model needs: matmul/bmm,
shape movement, windowed gathers, 1-d convolution/pooling/upsampling,
softmax, layer norm, gelu, soft cross-entropy, and Adam. Forward values
live in numpy arrays; gradients are produced by walking a Tape of recorded
operations in reverse. Correctness of every backward rule is anchored by
central finite-difference checks (see gradcheck).

f32 is the working precision, f64 exists for tight gradient checks.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not satisfy an op's contract."""


class ConfigError(ValueError):
    """An op was configured outside its contract (e.g. even same-pad kernel)."""


class NumericError(RuntimeError):
    """A non-finite value surfaced where the pipeline requires finiteness."""


DTYPES = {"f32": np.float32, "f64": np.float64}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

# Debug-mode finite check: when on, every op output is validated.
DEBUG_FINITE = False


class Tensor:
    """Dense N-d value with an optional same-shape gradient.

    `data` is a row-major numpy array (f32 or f64); `grad` stays None until
    a backward pass deposits into it. Single-writer: one tensor must not be
    mutated from two threads.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype: str | None = None):
        if dtype is not None:
            if dtype not in DTYPES:
                raise ConfigError(f"unknown dtype {dtype!r}, expected one of {sorted(DTYPES)}")
            arr = np.asarray(data, dtype=DTYPES[dtype])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the module-level ops.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable[[np.ndarray], None]):
        self.out = out
        self.parents = parents
        self.fn = fn


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Execution-ordered record of differentiable ops.

    Ops executed inside `with Tape() as tape:` are appended in order, which
    is a topological order by construction (an op's inputs exist before it
    runs). `backward` sweeps the record once in reverse, accumulating into
    each parent's `.grad`. A tape is single-use.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> int:
        return backward(self, root, seed)


def backward(tape: Tape, root: Tensor, seed: np.ndarray | None = None) -> int:
    """Reverse sweep from `root`; returns the number of nodes visited.

    Every recorded node is visited exactly once; nodes whose output received
    no gradient are skipped (they do not feed `root`).
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if not root.requires_grad:
        raise RuntimeError("root does not require grad (was it produced outside the tape?)")
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"backward without seed needs a scalar root, got shape {root.shape}")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.data.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.shape}")
    root.grad = seed if root.grad is None else root.grad + seed
    visited = 0
    for node in reversed(tape.nodes):
        visited += 1
        g = node.out.grad
        if g is None:
            continue
        node.fn(g)
    tape.consumed = True
    return visited


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    if DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value in op output (debug finite check)")
    tape = _active_tape()
    req = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        tape.nodes.append(_Node(out, tuple(parents), fn))
    return out


def _check_same_dtype(*ts: Tensor) -> None:
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise ShapeError(f"mixed dtypes: {[_NAMES[x.data.dtype] for x in ts]}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product; backward dA = dC @ B^T, dB = A^T @ dC."""
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (m,k)@(k,n), got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def fn(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched 3-d matmul (B,m,k)@(B,k,n)."""
    _check_same_dtype(a, b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm expects (B,m,k)@(B,k,n), got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def fn(g: np.ndarray) -> None:
        _accum(a, g @ np.swapaxes(b.data, 1, 2))
        _accum(b, np.swapaxes(a.data, 1, 2) @ g)

    return _make(out_data, (a, b), fn)


# ---------------------------------------------------------------------------
# pointwise and broadcast arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add expects equal shapes, got {a.shape} + {b.shape}")

    def fn(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul expects equal shapes, got {a.shape} * {b.shape}")

    def fn(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * s)

    return _make(x.data * np.asarray(s, dtype=x.data.dtype), (x,), fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]; bias grad sums over leading axes."""
    _check_same_dtype(x, b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias expects x[...,n] + b[n], got {x.shape} + {b.shape}")
    n = b.shape[0]

    def fn(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(b, g.reshape(-1, n).sum(axis=0))

    return _make(x.data + b.data, (x, b), fn)


def add_const(x: Tensor, c) -> Tensor:
    """x + constant array (no grad through c); c must broadcast to x.shape."""
    c = np.asarray(c, dtype=x.data.dtype)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"constant of shape {c.shape} does not broadcast into {x.shape}")

    def fn(g: np.ndarray) -> None:
        _accum(x, g)

    return _make(x.data + c, (x,), fn)


def mul_const(x: Tensor, c) -> Tensor:
    """x * constant array (no grad through c); c must broadcast to x.shape."""
    c = np.asarray(c, dtype=x.data.dtype)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"constant of shape {c.shape} does not broadcast into {x.shape}")

    def fn(g: np.ndarray) -> None:
        _accum(x, g * c)

    return _make(x.data * c, (x,), fn)


# ---------------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    x_shape = x.shape

    def fn(g: np.ndarray) -> None:
        _accum(x, g.reshape(x_shape))

    return _make(x.data.reshape(shape), (x,), fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g: np.ndarray) -> None:
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty tensor list")
    _check_same_dtype(*xs)
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum(sizes)[:-1]

    def fn(g: np.ndarray) -> None:
        for t, piece in zip(xs, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[i] = x[idx[i]] along axis 0; backward scatter-adds into x."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows index must be a 1-d int array, got {idx.dtype} {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows index out of range for axis of extent {x.shape[0]}")

    def fn(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accum(x, gx)

    return _make(x.data[idx], (x,), fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def fn(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), fn)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def fn(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.data.dtype, copy=False))

    return _make(x.data.sum(axis=axis), (x,), fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-subtraction)."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g: np.ndarray) -> None:
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(x, p * (g - inner))

    return _make(p, (x,), fn)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)

    def fn(g: np.ndarray) -> None:
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du))

    return _make(0.5 * xd * (1.0 + t), (x,), fn)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then affine: gain * xhat + bias."""
    _check_same_dtype(x, gain, bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def fn(g: np.ndarray) -> None:
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))
        lead = g.reshape(-1, c)
        _accum(gain, (lead * xhat.reshape(-1, c)).sum(axis=0))
        _accum(bias, lead.sum(axis=0))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), fn)


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; rate 0 is the identity (returns x unchanged)."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.uniform(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul_const(x, keep)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_soft(logits: Tensor, soft_targets) -> Tensor:
    """-sum_rows sum_c target * log softmax(logits); returns a scalar.

    Targets are plain data (no gradient); each row must sum to 1.
    """
    t = np.asarray(soft_targets, dtype=logits.data.dtype)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"cross_entropy_soft expects matching 2-d shapes, got {logits.shape} vs {t.shape}")
    row_sums = t.sum(axis=-1)
    if not np.allclose(row_sums, 1.0, atol=1e-5):
        raise ShapeError("soft target rows must sum to 1")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + logits.data.max(axis=-1, keepdims=True)
    loss = float((lse.squeeze(-1) - (t * logits.data).sum(axis=-1)).sum())

    def fn(g: np.ndarray) -> None:
        p = np.exp(logits.data - lse)
        _accum(logits, (p - t) * g)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), fn)


# ---------------------------------------------------------------------------
# temporal ops
# ---------------------------------------------------------------------------

def conv1d_dilated(x: Tensor, w: Tensor, bias: Tensor, dilation: int = 1, stride: int = 1) -> Tensor:
    """1-d convolution over time with zero same-padding.

    x: [T, C_in], w: [k, C_in, C_out], bias: [C_out]. Output length is
    ceil(T/stride); tap t' is centered on input frame t'*stride, so each tap
    spans (k-1)*dilation + 1 input frames.
    """
    _check_same_dtype(x, w, bias)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d_dilated expects x[T,Cin], w[k,Cin,Cout], got {x.shape}, {w.shape}")
    t_len, c_in = x.shape
    k, w_cin, c_out = w.shape
    if w_cin != c_in:
        raise ShapeError(f"channel mismatch: x has {c_in}, w expects {w_cin}")
    if k % 2 == 0:
        raise ConfigError(f"same-padding convolution needs an odd kernel, got k={k}")
    if stride < 1 or dilation < 1:
        raise ConfigError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    starts = np.arange(0, t_len, stride)
    offs = (np.arange(k) - (k - 1) // 2) * dilation
    idx = starts[:, None] + offs[None, :]
    valid = (idx >= 0) & (idx < t_len)
    t_out = starts.size

    patches = gather_rows(x, np.clip(idx, 0, t_len - 1).ravel())
    patches = reshape(patches, (t_out, k, c_in))
    patches = mul_const(patches, valid[:, :, None].astype(x.data.dtype))
    patches = reshape(patches, (t_out, k * c_in))
    out = matmul(patches, reshape(w, (k * c_in, c_out)))
    return add_bias(out, bias)


def avg_pool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Mean over temporal windows; a truncated tail window averages over its
    present elements only. Output length ceil(T/stride)."""
    if x.ndim != 2:
        raise ShapeError(f"avg_pool1d expects x[T,C], got {x.shape}")
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be >= 1, got {window}, {stride}")
    t_len, c = x.shape
    starts = np.arange(0, t_len, stride)
    idx = starts[:, None] + np.arange(window)[None, :]
    valid = idx < t_len
    counts = valid.sum(axis=1)
    weights = valid.astype(x.data.dtype) / counts[:, None]

    g = gather_rows(x, np.minimum(idx, t_len - 1).ravel())
    g = reshape(g, (starts.size, window, c))
    g = mul_const(g, weights[:, :, None])
    return sum_axis(g, 1)


def nn_upsample1d(x: Tensor, target_len: int) -> Tensor:
    """Nearest-neighbor upsampling: output frame t copies input floor(t*T'/target)."""
    if x.ndim != 2:
        raise ShapeError(f"nn_upsample1d expects x[T',C], got {x.shape}")
    t_in = x.shape[0]
    if target_len < t_in:
        raise ShapeError(f"nn_upsample1d cannot shrink: target {target_len} < input {t_in}")
    idx = (np.arange(target_len) * t_in) // target_len
    return gather_rows(x, idx)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: dict,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. `state` carries m/v/t."""
    if len(params) == 0:
        raise ConfigError("adam_step on an empty parameter list")
    if len(grads) != len(params):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state:
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
        state["t"] = 0
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if not p.requires_grad:
            raise AssertionError("adam_step asked to update a frozen parameter")
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype, copy=False)


class Adam:
    """Stateful wrapper over adam_step reading gradients from the params."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ConfigError("Adam over an empty parameter list")
        for p in self.params:
            if not p.requires_grad:
                raise AssertionError("Adam given a frozen parameter")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
