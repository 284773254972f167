"""Full linear cross-correlation and correlation-driven transformation proposals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .transform import Transformation, TransformationSpace, rotate_scale_canvas

__all__ = [
    "TransformationProposal",
    "cross_correlate_full",
    "brute_force_cross_correlate",
    "transformation_proposal",
    "proposal_from_scores",
    "sample_transformation",
]


def _check(residual, template):
    residual = np.asarray(residual, dtype=float)
    template = np.asarray(template, dtype=float)
    if residual.ndim == 1:
        residual = residual[None, :]
    if template.ndim == 1:
        template = template[None, :]
    if residual.ndim != template.ndim:
        raise ValueError("residual and template must have the same rank")
    if not (np.all(np.isfinite(residual)) and np.all(np.isfinite(template))):
        raise FloatingPointError("non-finite input to cross-correlation")
    return residual, template


def _full_xcorr(residual: np.ndarray, template: np.ndarray) -> np.ndarray:
    # residual (H, W, ...), template (h, w, ...); trailing axes are summed
    H, W = residual.shape[:2]
    h, w = template.shape[:2]
    shape = (H + h - 1, W + w - 1)
    fr = np.fft.rfft2(residual, s=shape, axes=(0, 1))
    ft = np.fft.rfft2(template, s=shape, axes=(0, 1))
    prod = fr * np.conj(ft)
    if prod.ndim > 2:
        prod = prod.reshape(prod.shape[:2] + (-1,)).sum(axis=2)
    circ = np.fft.irfft2(prod, s=shape)
    # circular lag -(h-1) sits at the end of each axis
    return np.roll(circ, (h - 1, w - 1), axis=(0, 1))


def cross_correlate_full(residual: np.ndarray, template: np.ndarray) -> np.ndarray:
    """FFT cross-correlation over every lag at which the arrays overlap.

    ``out[i, j]`` is ``sum_tau template(tau) * residual(tau + (i - h + 1, j - w + 1))``
    with the residual taken as zero outside its frame.  One-dimensional inputs
    are treated as single rows.
    """
    residual, template = _check(residual, template)
    return _full_xcorr(residual, template)


def brute_force_cross_correlate(residual: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Direct summation version of :func:`cross_correlate_full`."""
    residual, template = _check(residual, template)
    H, W = residual.shape[:2]
    h, w = template.shape[:2]
    padded = np.zeros((H + 2 * (h - 1), W + 2 * (w - 1)) + residual.shape[2:])
    padded[h - 1:h - 1 + H, w - 1:w - 1 + W] = residual
    out = np.empty((H + h - 1, W + w - 1))
    for i in range(H + h - 1):
        for j in range(W + w - 1):
            out[i, j] = np.sum(padded[i:i + h, j:j + w] * template)
    return out


@dataclass
class TransformationProposal:
    """Normalized categorical distribution over a transformation space."""

    log_weights: np.ndarray
    log_norm: float
    space: TransformationSpace | None = None

    @property
    def log_probs(self) -> np.ndarray:
        return self.log_weights - self.log_norm

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def log_prob(self, index: int) -> float:
        return float(self.log_weights[index] - self.log_norm)


def proposal_from_scores(scores: np.ndarray, temperature: float = 1.0,
                         space: TransformationSpace | None = None) -> TransformationProposal:
    """Exponentiate correlation scores into a proposal, stably."""
    scores = np.asarray(scores, dtype=float).ravel()
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite correlation scores")
    w = scores / temperature
    w = w - w.max()
    return TransformationProposal(w, float(logsumexp(w)), space)


def correlation_scores(residual: np.ndarray, canvas: np.ndarray,
                       space: TransformationSpace) -> np.ndarray:
    """Channel-summed correlation for every transformation, in enumeration order."""
    residual = np.asarray(residual, dtype=float)
    canvas = np.asarray(canvas, dtype=float)
    if residual.ndim == 2:
        residual = residual[..., None]
    if canvas.ndim == 2:
        canvas = canvas[..., None]
    if residual.shape[:2] != space.image_shape or canvas.shape[:2] != space.canvas_shape:
        raise ValueError("residual or canvas does not match the transformation space")
    if residual.shape[2] != canvas.shape[2]:
        raise ValueError("channel mismatch between residual and canvas")
    H, W = space.image_shape
    C = canvas.shape[2]
    flat = canvas.reshape(-1, C)
    out = np.empty(space.size)
    spectra: dict[tuple[int, int], np.ndarray] = {}
    for pair in space.pairs:
        ph, pw = pair.shape
        shape = (H + ph - 1, W + pw - 1)
        fr = spectra.get(shape)
        if fr is None:
            fr = spectra[shape] = np.fft.rfft2(residual, s=shape, axes=(0, 1))
        ft = np.fft.rfft2(flat[pair.src], s=shape, axes=(0, 1))
        circ = np.fft.irfft2((fr * np.conj(ft)).sum(axis=2), s=shape)
        lag = np.roll(circ, (ph - 1, pw - 1), axis=(0, 1))
        r0, c0 = pair.origin[0] + ph - 1, pair.origin[1] + pw - 1
        lag = lag[r0:r0 + pair.grid[0], c0:c0 + pair.grid[1]]
        out[pair.offset:pair.offset + lag.size] = lag.ravel()
    return out


def transformation_proposal(residual: np.ndarray, canvas: np.ndarray,
                            space: TransformationSpace,
                            temperature: float = 1.0) -> TransformationProposal:
    """Proposal proportional to ``exp(sum_c (residual_c * canvas_c)(r) / temperature)``.

    Each (scale, rotation) version of the canvas is correlated with the
    residual separately and the lag maps are concatenated in enumeration
    order.
    """
    return proposal_from_scores(correlation_scores(residual, canvas, space),
                                temperature, space)


def sample_transformation(proposal: TransformationProposal,
                          rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw; returns the flat index and its log proposal probability."""
    p = proposal.probs
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    i = min(int(np.searchsorted(cdf, u, side="right")), p.size - 1)
    return i, proposal.log_prob(i)


def draw(proposal: TransformationProposal, rng: np.random.Generator) -> tuple[Transformation, float]:
    """Like :func:`sample_transformation` but decoded through the proposal's space."""
    i, lq = sample_transformation(proposal, rng)
    return proposal.space.decode(i), lq
