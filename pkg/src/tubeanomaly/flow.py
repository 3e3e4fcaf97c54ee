"""Dense two-frame optical flow by polynomial expansion (Farnebäck).

Each neighbourhood is approximated by a quadratic ``x^T A x + b^T x + c``
fitted with Gaussian-weighted least squares. If the second frame is the first
one displaced by ``d``, then ``b2 = b1 - 2 A d``, which gives ``d`` from the
two expansions. Estimates are pooled over a window, refined iteratively and
propagated coarse-to-fine over an image pyramid.

All functions operate on a leading batch of frames so the 15 frame pairs of a
clip are estimated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tubes import CLIP_LENGTH, VideoClip

__all__ = ["FlowParams", "polynomial_expansion", "estimate_flow", "flow_for_clip"]

# Intensities are expanded on a 0..255 scale so the near-singularity test is
# independent of the [0, 1] storage convention.
_INTENSITY_SCALE = 255.0


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    pyr_scale: float = 0.5
    window: int = 5
    sigma: float = 1.1
    iterations: int = 3
    eps: float = 1e-6

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if self.window < 2:
            raise ValueError(f"window half-width must be >= 2, got {self.window}")
        if self.pyr_scale != 0.5:
            raise ValueError("only a pyramid scale of 0.5 is supported")


def _basis_gram(n: int, sigma: float):
    t = np.arange(-n, n + 1, dtype=np.float64)
    a = np.exp(-(t**2) / (2.0 * sigma**2))
    xs, ys = np.meshgrid(t, t)  # xs varies along columns
    weights = np.outer(a, a)
    basis = np.stack([np.ones_like(xs), xs, ys, xs**2, ys**2, xs * ys], axis=-1)
    gram = np.einsum("ij,ijk,ijl->kl", weights, basis, basis)
    return a, t, gram


def polynomial_expansion(frame: np.ndarray, sigma: float = 1.1, n: int = 5):
    """Per-pixel quadratic fit over a ``(2n+1)^2`` Gaussian-weighted window.

    Parameters
    ----------
    frame : ndarray
        ``H x W`` grayscale, ``H x W x 3`` RGB (averaged to gray), or a batch
        ``F x H x W`` of grayscale frames.
    sigma : float
        Width of the Gaussian applicability.
    n : int
        Half-width of the window.

    Returns
    -------
    A : ndarray, ``... x 2 x 2`` (symmetric)
    b : ndarray, ``... x 2`` with components ordered ``(x, y)`` = (column, row)
    c : ndarray, ``...``
    """
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3 and f.shape[-1] == 3:
        f = f.mean(axis=-1)
    if n < 2:
        raise ValueError(f"window half-width must be >= 2, got {n}")
    if min(f.shape[-2:]) < 2 * n + 1:
        raise ValueError(f"frame {f.shape[-2:]} smaller than the {2 * n + 1}x{2 * n + 1} window")

    a, t, gram = _basis_gram(n, sigma)
    k0, k1, k2 = a, a * t, a * t**2
    row_ax, col_ax = f.ndim - 2, f.ndim - 1

    def sep(row_k, col_k):
        tmp = ndimage.correlate1d(f, col_k, axis=col_ax, mode="reflect")
        return ndimage.correlate1d(tmp, row_k, axis=row_ax, mode="reflect")

    r = np.stack(
        [sep(k0, k0), sep(k0, k1), sep(k1, k0), sep(k0, k2), sep(k2, k0), sep(k1, k1)],
        axis=-1,
    )
    coef = r @ np.linalg.inv(gram).T
    c, bx, by, axx, ayy, axy = (coef[..., i] for i in range(6))
    A = np.empty(f.shape + (2, 2))
    A[..., 0, 0] = axx
    A[..., 1, 1] = ayy
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * axy
    b = np.stack([bx, by], axis=-1)
    return A, b, c


def _bilinear(field: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``F x H x W x K`` at per-frame coordinates ``F x h x w`` (edge clamped)."""
    h, w = field.shape[1:3]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    fidx = np.arange(field.shape[0])[:, None, None]
    top = field[fidx, y0, x0] * (1 - fx) + field[fidx, y0, x1] * fx
    bot = field[fidx, y1, x0] * (1 - fx) + field[fidx, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _downsample(frames: np.ndarray) -> np.ndarray:
    blurred = ndimage.gaussian_filter(frames, sigma=(0, 1.0, 1.0), mode="reflect")
    return blurred[:, ::2, ::2]


def _upsample_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h) / 2.0, np.arange(w) / 2.0, indexing="ij")
    ys = np.broadcast_to(ys, (flow.shape[0], h, w))
    xs = np.broadcast_to(xs, (flow.shape[0], h, w))
    return 2.0 * _bilinear(flow, ys, xs)


def _refine(A1, b1, A2, b2, flow, params: FlowParams) -> np.ndarray:
    f, h, w = b1.shape[:3]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    packed = np.concatenate([A2.reshape(f, h, w, 4), b2], axis=-1)
    warped = _bilinear(packed, ys + flow[..., 1], xs + flow[..., 0])
    A2w = warped[..., :4].reshape(f, h, w, 2, 2)
    b2w = warped[..., 4:]

    A = 0.5 * (A1 + A2w)
    db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, flow)

    # normal equations A^T A d = A^T db pooled over the window
    g11 = A[..., 0, 0] ** 2 + A[..., 1, 0] ** 2
    g12 = A[..., 0, 0] * A[..., 0, 1] + A[..., 1, 0] * A[..., 1, 1]
    g22 = A[..., 0, 1] ** 2 + A[..., 1, 1] ** 2
    h1 = A[..., 0, 0] * db[..., 0] + A[..., 1, 0] * db[..., 1]
    h2 = A[..., 0, 1] * db[..., 0] + A[..., 1, 1] * db[..., 1]
    size = (1, 2 * params.window + 1, 2 * params.window + 1)
    g11, g12, g22, h1, h2 = (
        ndimage.uniform_filter(v, size=size, mode="reflect") for v in (g11, g12, g22, h1, h2)
    )
    det = g11 * g22 - g12**2
    ok = det >= params.eps
    safe = np.where(ok, det, 1.0)
    dx = np.where(ok, (g22 * h1 - g12 * h2) / safe, 0.0)
    dy = np.where(ok, (g11 * h2 - g12 * h1) / safe, 0.0)
    return np.stack([dx, dy], axis=-1)


def _to_gray_batch(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None], False
    if img.ndim == 3 and img.shape[-1] == 3:
        return img.mean(axis=-1)[None], False
    if img.ndim == 3:
        return img, True
    if img.ndim == 4 and img.shape[-1] == 3:
        return img.mean(axis=-1), True
    raise ValueError(f"cannot interpret image of shape {img.shape}")


def estimate_flow(prev: np.ndarray, next: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Dense displacement from ``prev`` to ``next``.

    Inputs may be single frames (``H x W`` or ``H x W x 3``) or batches
    (``F x H x W`` or ``F x H x W x 3``). Returns ``... x H x W x 2`` with
    channels ``(dx, dy)`` in pixels.
    """
    params = params or FlowParams()
    p, batched = _to_gray_batch(prev)
    q, _ = _to_gray_batch(next)
    if p.shape != q.shape:
        raise ValueError(f"frame dimensions differ: {np.shape(prev)} vs {np.shape(next)}")
    if min(p.shape[1:]) < 2 * params.window + 1:
        raise ValueError(f"frames {p.shape[1:]} smaller than the flow window")

    pyramid = [(p * _INTENSITY_SCALE, q * _INTENSITY_SCALE)]
    while len(pyramid) < params.levels:
        cp, cq = pyramid[-1]
        nxt = (_downsample(cp), _downsample(cq))
        if min(nxt[0].shape[1:]) < 2 * params.window + 1:
            break
        pyramid.append(nxt)

    flow = None
    for lp, lq in reversed(pyramid):
        shape = lp.shape[1:]
        flow = np.zeros(lp.shape + (2,)) if flow is None else _upsample_flow(flow, shape)
        A1, b1, _ = polynomial_expansion(lp, params.sigma, params.window)
        A2, b2, _ = polynomial_expansion(lq, params.sigma, params.window)
        for _ in range(params.iterations):
            flow = _refine(A1, b1, A2, b2, flow, params)
    return flow if batched else flow[0]


def flow_for_clip(clip: VideoClip, params: FlowParams | None = None) -> np.ndarray:
    """Flow between consecutive frames, ``16 x H x W x 2``.

    The 15 pairwise fields are followed by a copy of the last one so the
    motion stream has the same temporal extent as the RGB stream.
    """
    frames = clip.frames
    flows = estimate_flow(frames[:-1], frames[1:], params)
    out = np.concatenate([flows, flows[-1:]], axis=0)
    assert out.shape[0] == CLIP_LENGTH
    return out
