"""Dense float tensors and tape-based reverse-mode differentiation.

Every op takes :class:`Tensor` arguments, computes its forward value with
numpy and, when a :class:`GradientTape` is active, records a closure that maps
the upstream gradient to gradients for each input.  :func:`backward` replays
the tape in reverse.

Spatial ops accept either a single image ``C x H x W`` or a batch
``N x C x H x W``.  Data is float32 unless a tensor is explicitly created as
float64 (used by the finite-difference oracles in the test-suite); ops keep
the dtype of their inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable-by-convention n-d float array (row-major)."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 and _KEEP_F64[0] else FLOAT
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, dtype={self.data.dtype})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"tensor of shape {list(t.shape)} is not a scalar")


# float64 tensors are kept as float64 only inside `float64_mode()`; elsewhere
# everything is coerced to float32.
_KEEP_F64 = [False]


class float64_mode:
    """Context manager: float64 inputs stay float64 (finite-difference oracles)."""

    def __enter__(self):
        self._prev = _KEEP_F64[0]
        _KEEP_F64[0] = True
        return self

    def __exit__(self, *exc):
        _KEEP_F64[0] = self._prev


def _wrap(arr: np.ndarray, like: np.dtype) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(arr, dtype=like)
    out.name = None
    return out


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class _TapeStack(threading.local):
    def __init__(self):
        self.tapes: list["GradientTape"] = []


# per-thread, so concurrent inference/explanations never share a tape
_ACTIVE = _TapeStack()


class GradientTape:
    """Ordered record of executed ops.

    A tape is single-writer: use one tape per forward/backward pass.

    >>> with GradientTape() as tape:
    ...     y = sum_all(relu(x))
    >>> grads = backward(tape, y)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _ACTIVE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    for tape in _ACTIVE.tapes:
        tape.nodes.append(_Node(out, inputs, vjp, op))
    return out


def recording() -> bool:
    return bool(_ACTIVE.tapes)


class Gradients(Mapping[Tensor, Tensor]):
    """Gradient lookup keyed by tensor identity.

    Every input of a recorded op has an entry (zeros when the output does not
    depend on it); intermediate op outputs are included as well.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor], visited: list[int]):
        self._grads = grads
        self._tensors = tensors
        self.visited = visited

    def __getitem__(self, t: Tensor) -> Tensor:
        key = id(t)
        if key not in self._tensors:
            raise KeyError(f"{t!r} was not recorded on the tape")
        g = self._grads.get(key)
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        return _wrap(g, t.dtype)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def array(self, t: Tensor) -> np.ndarray:
        return self[t].data


def backward(tape: GradientTape, output: Tensor, seed: float = 1.0) -> Gradients:
    """Reverse-mode gradients of the scalar ``output`` w.r.t. everything on ``tape``."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {list(output.shape)}")
    grads: dict[int, np.ndarray] = {id(output): np.full(output.shape, seed, dtype=output.dtype)}
    tensors: dict[int, Tensor] = {id(output): output}
    visited: list[int] = []
    for idx in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[idx]
        tensors.setdefault(id(node.out), node.out)
        for t in node.inputs:
            tensors.setdefault(id(t), t)
        g = grads.get(id(node.out))
        if g is None:
            continue
        visited.append(idx)
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return Gradients(grads, tensors, visited)


# --------------------------------------------------------------------------
# elementwise / reductions


def relu(t: Tensor) -> Tensor:
    x = t.data
    mask = x > 0
    out = _wrap(np.maximum(x, 0), x.dtype)
    return _record("relu", out, (t,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {list(a.shape)} vs {list(b.shape)}")
    out = _wrap(a.data + b.data, a.dtype)
    return _record("add", out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {list(a.shape)} vs {list(b.shape)}")
    out = _wrap(a.data - b.data, a.dtype)
    return _record("sub", out, (a, b), lambda g: (g, -g))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _wrap(t.data * c, t.dtype)
    return _record("scale", out, (t,), lambda g: (g * c,))


def sum_all(t: Tensor) -> Tensor:
    out = _wrap(np.sum(t.data, dtype=t.dtype).reshape(()), t.dtype)
    shape = t.shape
    return _record("sum", out, (t,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(t: Tensor) -> Tensor:
    n = t.size
    out = _wrap(np.mean(t.data, dtype=t.dtype).reshape(()), t.dtype)
    shape = t.shape
    return _record("mean", out, (t,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def take(t: Tensor, index: int) -> Tensor:
    """Select ``index`` along the last axis (drops that axis)."""
    n = t.shape[-1]
    if not -n <= index < n:
        raise IndexError(f"index {index} out of range for last axis of size {n}")
    out = _wrap(t.data[..., index], t.dtype)
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., index] = g
        return (full,)

    return _record("take", out, (t,), vjp)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    out = _wrap(t.data.reshape(shape), t.dtype)
    return _record("reshape", out, (t,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# convolution family


def _as_batch(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected C x H x W or N x C x H x W, got {list(x.shape)}")


def _out_size(size: int, k: int, stride: int, pad: int, op: str) -> int:
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if k > size + 2 * pad:
        raise ShapeError(f"{op}: kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation. ``kernels`` is K x C x kh x kw.

    The padded batch is laid out channel-last and flattened to rows
    (N*Hp*Wp, C); kernel tap (i, j) is then a contiguous row shift of
    ``i*Wp + j``, so each tap is one GEMM on a view.  Rows that straddle
    image borders are computed and cropped.  Strided convolutions subsample
    the stride-1 result.
    """
    X, squeeze = _as_batch(x.data, "conv2d")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be K x C x kh x kw, got {list(kernels.shape)}")
    N, C, H, W = X.shape
    K, Ck, kh, kw = kernels.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input has {C} channels but kernels expect {Ck}")
    if bias is not None and bias.shape != (K,):
        raise ShapeError(f"conv2d: bias shape {list(bias.shape)} != [{K}]")
    s, p = stride, padding
    Ho = _out_size(H, kh, s, p, "conv2d")
    Wo = _out_size(W, kw, s, p, "conv2d")
    dt = x.dtype
    Xl = X.transpose(0, 2, 3, 1)
    if p:
        Xl = np.pad(Xl, ((0, 0), (p, p), (p, p), (0, 0)))
    else:
        Xl = np.ascontiguousarray(Xl)
    Hp, Wp = Xl.shape[1:3]
    H1, W1 = Hp - kh + 1, Wp - kw + 1  # stride-1 output extent
    rows = N * Hp * Wp
    flat = Xl.reshape(rows, C)
    shifts = [i * Wp + j for i in range(kh) for j in range(kw)]
    M = rows - shifts[-1]
    taps = [np.ascontiguousarray(kernels.data[:, :, i, j].T) for i in range(kh) for j in range(kw)]  # C x K
    full = np.zeros((rows, K), dtype=dt)
    for sh, wk in zip(shifts, taps):
        full[:M] += flat[sh : sh + M] @ wk
    res = full.reshape(N, Hp, Wp, K)[:, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s, :]
    if bias is not None:
        res = res + bias.data
    out_arr = np.ascontiguousarray(res.transpose(0, 3, 1, 2))
    out = _wrap(out_arr[0] if squeeze else out_arr, dt)

    def vjp(g):
        G = g[None] if squeeze else g
        gfull = np.zeros((N, Hp, Wp, K), dtype=dt)
        gfull[:, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s, :] = G.transpose(0, 2, 3, 1)
        gflat = gfull.reshape(rows, K)
        # shifted copies of the (narrow) upstream gradient: column block t
        # holds g[r - shift_t], zero where that falls off the front
        lead = shifts[-1]
        gpad = np.zeros((rows + lead, K), dtype=dt)
        gpad[lead:] = gflat
        gcols = np.empty((rows, len(shifts) * K), dtype=dt)
        for t, sh in enumerate(shifts):
            gcols[:, t * K : (t + 1) * K] = gpad[lead - sh : lead - sh + rows]
        # weight gradient for every tap in one GEMM (C x taps*K)
        gw = (flat.T @ gcols).reshape(C, kh, kw, K).transpose(3, 0, 1, 2)
        gw = np.ascontiguousarray(gw)
        # input gradient: transposed convolution as one GEMM
        wstack = np.concatenate([wk.T for wk in taps], axis=0)  # (taps*K) x C
        dflat = gcols @ wstack
        dXl = dflat.reshape(N, Hp, Wp, C)
        if p:
            dXl = dXl[:, p : p + H, p : p + W, :]
        dX = np.ascontiguousarray(dXl.transpose(0, 3, 1, 2))
        gx = dX[0] if squeeze else dX
        gb = G.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _record("conv2d", out, inputs, lambda g: vjp(g)[: len(inputs)])


def depthwise_conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation: channel c uses ``kernels[c]`` (C x kh x kw)."""
    X, squeeze = _as_batch(x.data, "depthwise_conv2d")
    if kernels.data.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: kernels must be C x kh x kw, got {list(kernels.shape)}")
    N, C, H, W = X.shape
    Ck, kh, kw = kernels.shape
    if C != Ck:
        raise ShapeError(f"depthwise_conv2d: input has {C} channels but kernels expect {Ck}")
    s, p = stride, padding
    Ho = _out_size(H, kh, s, p, "depthwise_conv2d")
    Wo = _out_size(W, kw, s, p, "depthwise_conv2d")
    dt = x.dtype
    Xp = _pad(X, p)
    K = kernels.data
    acc = np.zeros((N, C, Ho, Wo), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            acc += Xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] * K[:, i, j][None, :, None, None]
    out = _wrap(acc[0] if squeeze else acc, dt)

    def vjp(g):
        G = g[None] if squeeze else g
        gw = np.empty(K.shape, dtype=dt)
        dXp = np.zeros(Xp.shape, dtype=dt)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))
                gw[:, i, j] = np.einsum("nchw,nchw->c", G, Xp[sl])
                dXp[sl] += G * K[:, i, j][None, :, None, None]
        dX = dXp[:, :, p : p + H, p : p + W] if p else dXp
        return (dX[0] if squeeze else dX, gw)

    return _record("depthwise_conv2d", out, (x, kernels), vjp)


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalisation.

    ``mean``/``var`` are ``None`` until initialised; inference mode refuses to
    run on uninitialised stats.  While ``count`` is an integer, training-mode
    updates form an equal-weight average of the batches seen since it was set
    to 0 (population statistics) instead of an exponential moving average.
    """

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    count: int | None = None

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=FLOAT), np.ones(channels, dtype=FLOAT))

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats | None = None,
    training: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    Training mode normalises with batch moments and, if ``stats`` is given,
    folds them into the running averages (unbiased variance).  Inference mode
    uses ``stats``.
    """
    X, squeeze = _as_batch(x.data, "batchnorm2d")
    N, C, H, W = X.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape [{C}]")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be > 0")
    dt = x.dtype
    gam = gamma.data.reshape(1, C, 1, 1)
    bet = beta.data.reshape(1, C, 1, 1)
    m = N * H * W
    if training:
        mu = X.mean(axis=(0, 2, 3), keepdims=True)
        xc = X - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + dt.type(eps))
        xhat = xc * inv
        if stats is not None:
            unbiased = var.reshape(C) * (m / (m - 1) if m > 1 else 1.0)
            if stats.count is not None:
                momentum = 1.0 / (stats.count + 1)
                stats.count += 1
            if stats.initialized:
                stats.mean = ((1 - momentum) * stats.mean + momentum * mu.reshape(C)).astype(FLOAT)
                stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(FLOAT)
            else:
                stats.mean = mu.reshape(C).astype(FLOAT)
                stats.var = unbiased.astype(FLOAT)
    else:
        if stats is None or not stats.initialized:
            raise ValueError("batchnorm2d: inference mode requires initialised running stats")
        inv = (1.0 / np.sqrt(stats.var.astype(dt) + dt.type(eps))).reshape(1, C, 1, 1)
        xhat = (X - stats.mean.astype(dt).reshape(1, C, 1, 1)) * inv
    y = xhat * gam + bet
    out = _wrap(y[0] if squeeze else y, dt)

    def vjp(g):
        G = g[None] if squeeze else g
        gbeta = G.sum(axis=(0, 2, 3))
        ggamma = (G * xhat).sum(axis=(0, 2, 3))
        gxhat = G * gam
        if training:
            gx = inv * (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv
        return (gx[0] if squeeze else gx, ggamma, gbeta)

    return _record("batchnorm2d", out, (x, gamma, beta), vjp)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    X, squeeze = _as_batch(x.data, "avg_pool2d")
    s = window if stride is None else stride
    N, C, H, W = X.shape
    Ho = _out_size(H, window, s, 0, "avg_pool2d")
    Wo = _out_size(W, window, s, 0, "avg_pool2d")
    dt = x.dtype
    acc = np.zeros((N, C, Ho, Wo), dtype=dt)
    for i in range(window):
        for j in range(window):
            acc += X[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
    acc *= dt.type(1.0 / (window * window))
    out = _wrap(acc[0] if squeeze else acc, dt)

    def vjp(g):
        G = (g[None] if squeeze else g) * dt.type(1.0 / (window * window))
        dX = np.zeros(X.shape, dtype=dt)
        for i in range(window):
            for j in range(window):
                dX[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += G
        return (dX[0] if squeeze else dX,)

    return _record("avg_pool2d", out, (x,), vjp)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    X, squeeze = _as_batch(x.data, "max_pool2d")
    s = window if stride is None else stride
    N, C, H, W = X.shape
    Ho = _out_size(H, window, s, 0, "max_pool2d")
    Wo = _out_size(W, window, s, 0, "max_pool2d")
    dt = x.dtype
    win = sliding_window_view(X, (window, window), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    res = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = _wrap(res[0] if squeeze else res, dt)

    def vjp(g):
        G = g[None] if squeeze else g
        dX = np.zeros(X.shape, dtype=dt)
        for i in range(window):
            for j in range(window):
                dX[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += G * (arg == i * window + j)
        return (dX[0] if squeeze else dX,)

    return _record("max_pool2d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes: K x H x W -> K, N x K x H x W -> N x K."""
    if x.data.ndim < 2:
        raise ShapeError("global_avg_pool: need at least two spatial axes")
    H, W = x.shape[-2:]
    dt = x.dtype
    out = _wrap(x.data.mean(axis=(-2, -1), dtype=dt), dt)
    shape = x.shape
    inv = dt.type(1.0 / (H * W))
    return _record(
        "global_avg_pool", out, (x,), lambda g: (np.broadcast_to((g * inv)[..., None, None], shape).copy(),)
    )


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis (third from last)."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_channels: need at least one tensor")
    lead = parts[0].shape[:-3]
    hw = parts[0].shape[-2:]
    for p in parts:
        if p.data.ndim not in (3, 4) or p.shape[-2:] != hw or p.shape[:-3] != lead:
            raise ShapeError("concat_channels: all parts must share batch and spatial dims")
    sizes = [p.shape[-3] for p in parts]
    offsets = [int(v) for v in np.cumsum([0] + sizes)]
    n_parts = len(parts)
    out = _wrap(np.concatenate([p.data for p in parts], axis=-3), parts[0].dtype)

    def vjp(g):
        return tuple(g[..., offsets[i] : offsets[i + 1], :, :] for i in range(n_parts))

    return _record("concat_channels", out, parts, vjp)


def split_channels(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat_channels` for the given channel sizes."""
    if sum(sizes) != t.shape[-3]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {t.shape[-3]}")
    pieces = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n
        piece = _wrap(t.data[..., lo:hi, :, :], t.dtype)

        def vjp(g, lo=lo, hi=hi):
            full = np.zeros(t.shape, dtype=g.dtype)
            full[..., lo:hi, :, :] = g
            return (full,)

        pieces.append(_record("split_channels", piece, (t,), vjp))
        start = hi
    return pieces


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ W.T + b`` for a D-vector or an N x D batch; ``W`` is O x D."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"fully_connected: x {list(x.shape)}, W {list(weight.shape)}, b {list(bias.shape)} incompatible"
        )
    X = x.data
    Wd = weight.data
    out = _wrap(X @ Wd.T + bias.data, x.dtype)

    def vjp(g):
        if X.ndim == 1:
            return (g @ Wd, np.outer(g, X), g)
        return (g @ Wd, g.T @ X, g.sum(axis=0))

    return _record("fully_connected", out, (x, weight, bias), vjp)


# --------------------------------------------------------------------------
# losses


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid(z: np.ndarray | float) -> np.ndarray:
    return _sigmoid(np.asarray(z, dtype=np.float64))


def sigmoid_bce(logit: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logit)`` against 0/1 targets."""
    z = logit.data
    t = np.broadcast_to(np.asarray(target, dtype=z.dtype), z.shape)
    if np.any((t != 0) & (t != 1)):
        raise ValueError("sigmoid_bce: targets must be 0 or 1")
    n = max(z.size, 1)
    losses = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _wrap(np.asarray(losses.mean(), dtype=z.dtype).reshape(()), z.dtype)
    p = _sigmoid(z)
    return _record("sigmoid_bce", out, (logit,), lambda g: (g * (p - t) / n,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy; ``logits`` is N x K, ``targets`` integer class ids."""
    Z = logits.data
    if Z.ndim == 1:
        Z = Z[None]
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    if idx.shape[0] != Z.shape[0]:
        raise ShapeError("softmax_cross_entropy: one target per row required")
    n = Z.shape[0]
    P = softmax(Z)
    logp = np.log(np.clip(P[np.arange(n), idx], 1e-30, None))
    out = _wrap(np.asarray(-logp.mean(), dtype=Z.dtype).reshape(()), Z.dtype)
    shape = logits.shape

    def vjp(g):
        d = P.copy()
        d[np.arange(n), idx] -= 1
        return ((g * d / n).reshape(shape),)

    return _record("softmax_cross_entropy", out, (logits,), vjp)


# --------------------------------------------------------------------------
# resampling


def interp_matrix(src: int, dst: int, align_corners: bool = False) -> np.ndarray:
    """Row-stochastic ``dst x src`` matrix of 1-D linear interpolation weights."""
    R = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        R[:, 0] = 1.0
        return R
    if align_corners:
        pos = np.arange(dst) * ((src - 1) / (dst - 1)) if dst > 1 else np.zeros(1)
    else:
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(R, (rows, lo), 1 - frac)
    np.add.at(R, (rows, hi), frac)
    return R


def bilinear_upsample(m: Tensor, height: int, width: int, align_corners: bool = False) -> Tensor:
    """Bilinear interpolation of the two trailing axes up to ``height x width``."""
    if m.data.ndim < 2:
        raise ShapeError("bilinear_upsample: need a 2-D map")
    h, w = m.shape[-2:]
    if height < h or width < w:
        raise ShapeError(f"bilinear_upsample: target {height}x{width} smaller than source {h}x{w}")
    dt = m.dtype
    Rh = interp_matrix(h, height, align_corners).astype(dt)
    Rw = interp_matrix(w, width, align_corners).astype(dt)
    out = _wrap(Rh @ m.data @ Rw.T, dt)
    return _record("bilinear_upsample", out, (m,), lambda g: (Rh.T @ g @ Rw,))
