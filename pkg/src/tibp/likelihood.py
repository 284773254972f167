"""Image composition, visibility, residuals and the Gaussian likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ModelState

__all__ = [
    "image_log_likelihood",
    "visibility_owner",
    "visibility_indicators",
    "compose_image",
    "residual",
    "LayerContext",
    "layer_context",
    "placed",
    "log_likelihood_with",
]

_LOG_2PI = math.log(2 * math.pi)


def image_log_likelihood(x: np.ndarray, mean: np.ndarray, sigma_x: float) -> float:
    """Sum of independent ``N(mean, sigma_x**2)`` log densities over every entry."""
    if sigma_x <= 0:
        raise ValueError("sigma_x must be positive")
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != mean.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {mean.shape}")
    sq = float(np.sum((x - mean) ** 2))
    return -0.5 * x.size * (_LOG_2PI + 2 * math.log(sigma_x)) - sq / (2 * sigma_x ** 2)


def placed(state: ModelState, k: int, index: int, mask: np.ndarray | None = None,
           canvas: np.ndarray | None = None):
    """Image slices, landed values ``(h, w, C)`` and landed mask ``(h, w)``."""
    space = state.space
    img, src = space.landing(index)
    a = state.A[k] if canvas is None else canvas
    values = a.reshape(-1, a.shape[-1])[src]
    m = None if mask is None else mask.reshape(-1)[src].astype(bool)
    return img, values, m


def _ranked_active(state: ModelState, n: int, exclude: int | None = None):
    ks = np.flatnonzero(state.Z[n])
    if exclude is not None:
        ks = ks[ks != exclude]
    if state.masked:
        ks = ks[np.argsort(state.order[ks], kind="stable")]
    return ks


def _paint(state: ModelState, n: int, exclude: int | None = None):
    """Painter's-algorithm composite for image ``n`` and its owner map."""
    H, W = state.space.image_shape
    comp = np.zeros((H, W, state.C))
    owner = np.full((H, W), -1, dtype=np.int64)
    for k in _ranked_active(state, n, exclude):
        img, vals, m = placed(state, k, state.R[n, k], state.S[n, k])
        sub_c = comp[img]
        sub_o = owner[img]
        sub_c[m] = vals[m]
        sub_o[m] = k
    return comp, owner


def visibility_owner(state: ModelState, n: int, exclude: int | None = None) -> np.ndarray:
    """Index of the uppermost unmasked feature at each pixel, -1 where none."""
    if not state.masked:
        raise ValueError("visibility is defined for the masked variant only")
    return _paint(state, n, exclude)[1]


def visibility_indicators(state: ModelState, n: int) -> np.ndarray:
    """Boolean ``(K, H, W)`` tensor, true where feature k is the visible layer."""
    owner = visibility_owner(state, n)
    return owner[None, :, :] == np.arange(state.K)[:, None, None]


def _superpose(state: ModelState, n: int, exclude: int | None = None) -> np.ndarray:
    H, W = state.space.image_shape
    out = np.zeros((H, W, state.C))
    for k in np.flatnonzero(state.Z[n]):
        if k == exclude:
            continue
        img, vals, _ = placed(state, k, state.R[n, k])
        out[img] += vals
    return out


def compose_image(state: ModelState, n: int) -> np.ndarray:
    """Noise-free mean of image ``n`` under the state's composition rule."""
    if state.masked:
        return _paint(state, n)[0]
    return _superpose(state, n)


def residual(state: ModelState, n: int, k: int | None) -> np.ndarray:
    """What is left for feature ``k`` to explain in image ``n``.

    Linear variants subtract every other active feature.  The masked variant
    keeps the observed pixels whose visible layer (computed without ``k``)
    lies behind ``k``; pixels nobody explains, or that features in front of
    ``k`` explain, are zero.  A candidate without a depth rank (``k`` is None
    or beyond the current features) is treated as uppermost, so it sees the
    whole image.
    """
    x = state.X[n]
    if not state.masked:
        return x - _superpose(state, n, exclude=k)
    if k is None or k >= state.K:
        return x.copy()
    _, owner = _paint(state, n, exclude=k)
    behind = np.zeros(owner.shape, dtype=bool)
    has = owner >= 0
    behind[has] = state.order[owner[has]] < state.order[k]
    return np.where(behind[..., None], x, 0.0)


@dataclass
class LayerContext:
    """Image ``n`` composed without feature ``k``.

    ``open`` marks pixels where ``k`` would be the visible layer if it covered
    them unmasked (always true for the linear variants).
    """

    n: int
    k: int | None
    x: np.ndarray
    base: np.ndarray
    open: np.ndarray | None
    masked: bool
    base_sq: float
    behind: np.ndarray | None = None

    @property
    def residual(self) -> np.ndarray:
        if not self.masked:
            return self.x - self.base
        if self.behind is None:
            return self.x.copy()
        return np.where(self.behind[..., None], self.x, 0.0)

    def sq_error_with(self, state: ModelState, index: int, mask: np.ndarray | None = None,
                      canvas: np.ndarray | None = None) -> float:
        """Total squared error of the image once ``k`` is placed at ``index``."""
        k = self.k if canvas is None else None
        img, vals, m = placed(state, k, index, mask, canvas)
        x = self.x[img]
        b = self.base[img]
        if self.masked:
            vis = m & self.open[img]
            new = np.where(vis[..., None], vals, b)
        else:
            new = b + vals
        return self.base_sq - float(np.sum((x - b) ** 2)) + float(np.sum((x - new) ** 2))


def layer_context(state: ModelState, n: int, k: int | None) -> LayerContext:
    x = state.X[n]
    if state.masked:
        base, owner = _paint(state, n, exclude=k)
        if k is None or k >= state.K:
            open_ = np.ones(owner.shape, dtype=bool)
            behind = None
        else:
            has = owner >= 0
            behind = np.zeros(owner.shape, dtype=bool)
            behind[has] = state.order[owner[has]] < state.order[k]
            open_ = behind | ~has
    else:
        base = _superpose(state, n, exclude=k)
        open_ = behind = None
    return LayerContext(n, k, x, base, open_, state.masked,
                        float(np.sum((x - base) ** 2)), behind)


def log_likelihood_from_sq(sq: float, size: int, sigma_x: float) -> float:
    return -0.5 * size * (_LOG_2PI + 2 * math.log(sigma_x)) - sq / (2 * sigma_x ** 2)


def log_likelihood_with(state: ModelState, ctx: LayerContext, index: int,
                        mask: np.ndarray | None = None) -> float:
    sq = ctx.sq_error_with(state, index, mask)
    return log_likelihood_from_sq(sq, ctx.x.size, state.hyper.sigma_x)


def data_log_likelihood(state: ModelState) -> float:
    """Sum of image log-likelihoods over the whole dataset."""
    return sum(image_log_likelihood(state.X[n], compose_image(state, n), state.hyper.sigma_x)
               for n in range(state.N))

