"""Dense float64 tensors with reverse-mode differentiation.

Only the layer types needed by the video encoder and the regression head are
provided. Every operation accepts an optional leading batch axis, so a
``T x H x W x C`` volume and an ``N x T x H x W x C`` batch go through the same
code path.

Each call builds graph nodes that keep references to their parents; calling
:func:`backward` on a scalar walks that graph once. There is no global tape
and no global "grad enabled" switch.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "conv3d",
    "conv2d_1x1",
    "linear",
    "relu",
    "sigmoid",
    "apply_activation",
    "dropout",
    "temporal_avg_pool",
    "max_pool3d",
    "reshape",
    "concat",
    "add",
    "mul",
    "mean",
    "tensor_sum",
    "mse",
    "grad_check",
]


class Tensor:
    """Immutable float64 array that remembers how it was computed.

    Parameters
    ----------
    value : array_like
        Data; copied to a contiguous float64 array.
    parents : sequence of Tensor, optional
        Inputs of the operation that produced this tensor.
    backward_fn : callable, optional
        Maps the upstream gradient to a tuple of gradients, one per parent.
    """

    __slots__ = ("value", "parents", "backward_fn")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None):
        value = np.ascontiguousarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(())
        value.setflags(write=False)
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor with a mutable value and an accumulated gradient."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str = ""):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros(self.value.shape, dtype=np.float64)

    def assign(self, new_value) -> None:
        new_value = np.ascontiguousarray(new_value, dtype=np.float64)
        if new_value.shape != self.value.shape:
            raise ValueError(
                f"cannot assign shape {new_value.shape} to parameter "
                f"{self.name!r} of shape {self.value.shape}"
            )
        new_value.setflags(write=False)
        self.value = new_value

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.value.shape, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_constant(t: Tensor) -> bool:
    # leaf that is not trainable: nothing upstream needs its gradient
    return not t.parents and not isinstance(t, Parameter)


def _unbatch(has_batch: bool, arr: np.ndarray) -> np.ndarray:
    return arr if has_batch else arr[0]


def backward(output: Tensor) -> dict:
    """Back-propagate from a scalar and accumulate into ``Parameter.grad``.

    Returns
    -------
    dict
        Maps ``id(node)`` to the gradient of ``output`` with respect to that
        node, for every node reachable from ``output``.
    """
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node in order:
        if isinstance(node, Parameter) and id(node) in grads:
            node.grad = node.grad + grads[id(node)]
    return grads


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return Tensor(a.value + b.value, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return _sum_to(g * b.value, a.shape), _sum_to(g * a.value, b.shape)

    return Tensor(a.value * b.value, (a, b), fn)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def tensor_sum(x: Tensor) -> Tensor:
    return Tensor(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    return Tensor(x.value.mean(), (x,), lambda g: (np.full(x.shape, g.item() / n),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return Tensor(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (default: channels)."""
    tensors = [_as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(out, tensors, fn)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


def apply_activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor(x.value * keep, (x,), lambda g: (g * keep,))


def mse(scores: Tensor, labels) -> Tensor:
    """Mean squared error between a vector of scores and fixed labels."""
    labels = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    if scores.value.size == 0:
        raise ValueError("mse over an empty batch")
    diff = scores.value - labels
    n = diff.size
    return Tensor(np.mean(diff**2), (scores,), lambda g: (g * 2.0 * diff / n,))


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for ``x`` of shape ``n`` or ``N x n``."""
    xv, wv, bv = x.value, weights.value, bias.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ValueError(
            f"linear shape mismatch: input {xv.shape}, weights {wv.shape}, bias {bv.shape}"
        )
    batched = xv.ndim == 2
    x2 = xv if batched else xv[None]
    out = x2 @ wv + bv

    def fn(g):
        g2 = g if batched else g[None]
        gx = g2 @ wv.T
        return _unbatch(batched, gx), x2.T @ g2, g2.sum(axis=0)

    return Tensor(_unbatch(batched, out), (x, weights, bias), fn)


def conv2d_1x1(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution of an ``S x S x Cin`` map with ``1 x 1 x Cin x Cout`` kernels."""
    xv, kv, bv = x.value, kernels.value, bias.value
    if kv.ndim != 4 or kv.shape[:2] != (1, 1) or xv.shape[-1] != kv.shape[2] or bv.shape != (kv.shape[3],):
        raise ValueError(
            f"conv2d_1x1 shape mismatch: input {xv.shape}, kernels {kv.shape}, bias {bv.shape}"
        )
    if xv.ndim not in (3, 4):
        raise ValueError(f"conv2d_1x1 expects S x S x C input (optionally batched), got {xv.shape}")
    w = kv[0, 0]
    out = xv @ w + bv

    def fn(g):
        gx = g @ w.T
        flat_x = xv.reshape(-1, w.shape[0])
        flat_g = g.reshape(-1, w.shape[1])
        gw = (flat_x.T @ flat_g)[None, None]
        return gx, gw, flat_g.sum(axis=0)

    return Tensor(out, (x, kernels, bias), fn)


def _triple(v) -> tuple:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected a triple, got {v}")
    return v


def conv3d(x: Tensor, kernels: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """3-D convolution (cross-correlation) of a ``T x H x W x Cin`` volume.

    Kernels are laid out ``kT x kH x kW x Cin x Cout``. Output extent per axis
    is ``floor((D + 2p - k) / s) + 1``.
    """
    xv, kv, bv = x.value, kernels.value, bias.value
    stride, padding = _triple(stride), _triple(padding)
    batched = xv.ndim == 5
    if xv.ndim not in (4, 5) or kv.ndim != 5 or xv.shape[-1] != kv.shape[3] or bv.shape != (kv.shape[4],):
        raise ValueError(
            f"conv3d shape mismatch: input {xv.shape}, kernels {kv.shape}, bias {bv.shape}"
        )
    if min(stride) < 1:
        raise ValueError(f"conv3d stride must be >= 1, got {stride}")
    x5 = xv if batched else xv[None]
    n, cin = x5.shape[0], x5.shape[-1]
    ksz = kv.shape[:3]
    cout = kv.shape[4]
    padded_dims = [x5.shape[i + 1] + 2 * padding[i] for i in range(3)]
    if any(k > d for k, d in zip(ksz, padded_dims)):
        raise ValueError(
            f"conv3d kernel {kv.shape} larger than padded input {tuple(padded_dims)} "
            f"(input {xv.shape})"
        )
    out_dims = [(padded_dims[i] - ksz[i]) // stride[i] + 1 for i in range(3)]

    pad_width = [(0, 0)] + [(p, p) for p in padding] + [(0, 0)]
    xp = np.pad(x5, pad_width) if any(padding) else x5
    windows = sliding_window_view(xp, ksz, axis=(1, 2, 3))
    windows = windows[:, :: stride[0], :: stride[1], :: stride[2]]
    windows = windows[:, : out_dims[0], : out_dims[1], : out_dims[2]]
    # (N, T', H', W', Cin, kT, kH, kW) -> (rows, kT*kH*kW*Cin)
    cols = windows.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(-1, int(np.prod(ksz)) * cin)
    wmat = kv.reshape(-1, cout)
    out = (cols @ wmat + bv).reshape(n, *out_dims, cout)

    def fn(g):
        g5 = g if batched else g[None]
        gflat = g5.reshape(-1, cout)
        gw = (cols.T @ gflat).reshape(kv.shape)
        gb = gflat.sum(axis=0)
        if _is_constant(x):
            return None, gw, gb
        gxp = np.zeros(xp.shape)
        st, sh, sw = stride
        for a in range(ksz[0]):
            ts = slice(a, a + st * (out_dims[0] - 1) + 1, st)
            for b in range(ksz[1]):
                hs = slice(b, b + sh * (out_dims[1] - 1) + 1, sh)
                for c in range(ksz[2]):
                    ws = slice(c, c + sw * (out_dims[2] - 1) + 1, sw)
                    contrib = (gflat @ kv[a, b, c].T).reshape(n, *out_dims, cin)
                    gxp[:, ts, hs, ws, :] += contrib
        if any(padding):
            pt, ph, pw = padding
            gxp = gxp[:, pt : pt + x5.shape[1], ph : ph + x5.shape[2], pw : pw + x5.shape[3]]
        return _unbatch(batched, gxp), gw, gb

    return Tensor(_unbatch(batched, out), (x, kernels, bias), fn)


def temporal_avg_pool(x: Tensor) -> Tensor:
    """Average over the temporal axis of ``T x S x S x C`` (optionally batched)."""
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ValueError(f"temporal_avg_pool expects T x S x S x C input, got {x.shape}")
    axis = 1 if batched else 0
    t = x.shape[axis]

    def fn(g):
        return (np.repeat(np.expand_dims(g / t, axis), t, axis=axis),)

    return Tensor(x.value.mean(axis=axis), (x,), fn)


def max_pool3d(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling over ``T x H x W``; gradient routes to the first maximum."""
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    batched = x.ndim == 5
    xv = x.value if batched else x.value[None]
    dims = xv.shape[1:4]
    if any(w > d for w, d in zip(window, dims)):
        raise ValueError(f"max_pool3d window {window} larger than input {x.shape}")
    out_dims = [(dims[i] - window[i]) // stride[i] + 1 for i in range(3)]
    win = sliding_window_view(xv, window, axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    win = win[:, : out_dims[0], : out_dims[1], : out_dims[2]]
    k = int(np.prod(window))
    flat = win.reshape(*win.shape[:5], k)
    # argmax returns the first hit; window flattening follows input flat order
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        g5 = g if batched else g[None]
        gx = np.zeros(xv.shape)
        if stride == window:
            # non-overlapping windows: scatter through a blocked view
            n, c = xv.shape[0], xv.shape[-1]
            (t1, h1, w1), (kt, kh, kw) = out_dims, window
            onehot = (np.arange(k) == arg[..., None]) * g5[..., None]
            onehot = onehot.reshape(n, t1, h1, w1, c, kt, kh, kw).transpose(0, 1, 5, 2, 6, 3, 7, 4)
            gx[:, : t1 * kt, : h1 * kh, : w1 * kw] = onehot.reshape(n, t1 * kt, h1 * kh, w1 * kw, c)
            return (_unbatch(batched, gx),)
        offsets = np.unravel_index(arg, window)
        st, sh, sw = stride
        for a in range(window[0]):
            ts = slice(a, a + st * (out_dims[0] - 1) + 1, st)
            for b in range(window[1]):
                hs = slice(b, b + sh * (out_dims[1] - 1) + 1, sh)
                for c in range(window[2]):
                    ws = slice(c, c + sw * (out_dims[2] - 1) + 1, sw)
                    hit = (offsets[0] == a) & (offsets[1] == b) & (offsets[2] == c)
                    gx[:, ts, hs, ws, :] += g5 * hit
        return (_unbatch(batched, gx),)

    return Tensor(_unbatch(batched, out), (x,), fn)


# --------------------------------------------------------------------------
# verification


def grad_check(
    build: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``build`` must rebuild the graph from the current parameter values and
    return a scalar. Returns the max over all parameter elements of
    ``|g_a - g_n| / max(1, |g_a| + |g_n|)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(build())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.value.copy()
        flat = base.reshape(-1)
        gn = np.zeros(flat.size)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            p.assign(bumped.reshape(base.shape))
            f_plus = build().item()
            bumped[i] = flat[i] - step
            p.assign(bumped.reshape(base.shape))
            f_minus = build().item()
            gn[i] = (f_plus - f_minus) / (2.0 * step)
        p.assign(base)
        err = np.abs(ga.reshape(-1) - gn) / np.maximum(1.0, np.abs(ga.reshape(-1)) + np.abs(gn))
        if err.size:
            worst = max(worst, float(err.max()))
    for p in params:
        p.zero_grad()
    return worst
