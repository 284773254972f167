"""MCMC moves for the transformed IBP models and the full sweep schedule.

Indicator, transformation and mask moves use Metropolis-Hastings with
proposals built from the cross-correlation of a feature with the image
residual.  :func:`naive_enumeration_update` is the exhaustive Gibbs
comparator that scores every transformation explicitly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .core import ModelState, prune_empty_features
from .likelihood import compose_image, image_log_likelihood, layer_context, visibility_owner
from .xcorr import correlation_scores, proposal_from_scores, sample_transformation

__all__ = [
    "SweepReport",
    "FeaturePosteriorStats",
    "feature_use_log_ratio",
    "resample_log_ratio",
    "mh_update_feature_use",
    "mh_birth_new_features",
    "mask_proposal_probability",
    "proposal_target",
    "placement_scores",
    "resample_transform_and_mask",
    "gibbs_mask_pixel",
    "gibbs_masks",
    "mh_swap_adjacent_order",
    "feature_posterior_stats",
    "gibbs_feature_pixel",
    "gibbs_feature",
    "gibbs_hyperparameters",
    "naive_transformation_log_conditional",
    "naive_enumeration_update",
    "joint_log_likelihood",
    "sweep",
]

# keeps the birth mask proposal away from 0 and 1 so reverse moves stay possible
_MASK_EPS = 1e-3


@dataclass
class SweepReport:
    iteration: int
    log_likelihood: float
    data_log_likelihood: float
    k_plus: int
    proposals: dict = field(default_factory=dict)
    accepts: dict = field(default_factory=dict)
    births: int = 0
    times: dict = field(default_factory=dict)
    alpha: float = float("nan")
    sigma_x: float = float("nan")
    sigma_a: float = float("nan")

    @property
    def seconds(self) -> float:
        return sum(self.times.values())


class _Tally:
    def __init__(self):
        self.proposals: dict[str, int] = {}
        self.accepts: dict[str, int] = {}

    def add(self, move: str, accepted: bool):
        self.proposals[move] = self.proposals.get(move, 0) + 1
        self.accepts[move] = self.accepts.get(move, 0) + int(accepted)


def _accept(log_ratio: float, rng: np.random.Generator) -> bool:
    # one uniform per decision keeps the random stream aligned across outcomes
    u = rng.random()
    if log_ratio >= 0 or u == 0.0:
        return True
    return math.log(u) < log_ratio


def _rng(state: ModelState, rng):
    return state.rng if rng is None else rng


# --------------------------------------------------------------------------
# indicators, transformations and masks
# --------------------------------------------------------------------------

def feature_use_log_ratio(delta_ll: float, m_minus: int, N: int, T: int,
                          log_q: float) -> float:
    """Log MH ratio for switching a shared feature on (0 -> 1).

    ``delta_ll`` is ``log L1 - log L0`` and ``log_q`` the log proposal
    probability of the drawn transformation.  The 1 -> 0 move uses the
    negation with ``log_q`` taken at the current transformation.
    """
    p = m_minus / N
    return delta_ll + math.log(p) - math.log1p(-p) - math.log(T) - log_q


def resample_log_ratio(delta_ll: float, log_q_old: float, log_q_new: float) -> float:
    return delta_ll + log_q_old - log_q_new


def mask_proposal_probability(state: ModelState, n: int, k: int, d=None):
    """Probability that mask bit ``d`` of ``(n, k)`` is on given every other image.

    Returns the whole ``(Fh, Fw)`` array when ``d`` is None.
    """
    if not state.masked:
        raise ValueError("masks exist for the masked variant only")
    beta = state.hyper.beta
    on = state.S[:, k].sum(axis=0) - state.S[n, k]
    users = state.Z[:, k].sum() - state.Z[n, k]
    p = (on + beta) / (users + 2 * beta)
    return p if d is None else float(p[d])


def _draw_mask(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(p.shape) < p).astype(np.int64)


def proposal_target(ctx) -> np.ndarray:
    """Image the correlation proposal matches a feature against.

    Linear variants use the residual.  For the masked variant this is the
    data on every pixel where the feature would be the visible layer: pixels
    shown by features behind it and pixels nothing explains yet.  Zeroing
    the unexplained ones leaves the proposal blind to exactly the places an
    unused feature should move to.
    """
    if not ctx.masked or ctx.open is None:
        return ctx.residual
    return np.where(ctx.open[..., None], ctx.x, 0.0)


def placement_scores(state: ModelState, ctx, k: int) -> np.ndarray:
    """Log proposal weights (up to a constant) for placing feature ``k``.

    The correlation with the proposal target over ``sigma_x**2``.  For the
    linear variants half the energy of the in-frame part of the canvas is
    subtracted, which makes this the exact log conditional of the placement;
    the bare correlation ignores the noise scale and overrates placements
    that hang over the border.  Masked canvases carry arbitrary values off
    their masks, so no energy term is used for them.
    """
    a = state.A[k]
    space = state.space
    scores = correlation_scores(proposal_target(ctx), a, space)
    if not ctx.masked:
        ones = np.ones(space.image_shape + (1,))
        scores = scores - 0.5 * correlation_scores(ones, np.sum(a ** 2, axis=-1)[..., None], space)
    return scores / state.hyper.sigma_x ** 2


def _proposal(state: ModelState, ctx, k: int):
    return proposal_from_scores(placement_scores(state, ctx, k), state.temperature, state.space)


def mh_update_feature_use(state: ModelState, n: int, k: int, rng=None) -> bool:
    """Joint MH flip of ``z_nk`` with its transformation and mask."""
    rng = _rng(state, rng)
    z = int(state.Z[n, k])
    m_minus = int(state.Z[:, k].sum()) - z
    if m_minus < 1:
        raise ValueError(f"feature {k} is not used by any image other than {n}")
    ctx = layer_context(state, n, k)
    prop = _proposal(state, ctx, k)
    sigma2 = state.hyper.sigma_x ** 2
    if z == 0:
        r, log_q = sample_transformation(prop, rng)
        s = _draw_mask(mask_proposal_probability(state, n, k), rng) if state.masked else None
        sq1 = ctx.sq_error_with(state, r, s)
        delta = (ctx.base_sq - sq1) / (2 * sigma2)
        log_ratio = feature_use_log_ratio(delta, m_minus, state.N, state.space.size, log_q)
        if _accept(log_ratio, rng):
            state.Z[n, k] = 1
            state.R[n, k] = r
            if state.masked:
                state.S[n, k] = s
            return True
        return False
    r = int(state.R[n, k])
    s = state.S[n, k] if state.masked else None
    sq1 = ctx.sq_error_with(state, r, s)
    delta = (ctx.base_sq - sq1) / (2 * sigma2)
    log_ratio = -feature_use_log_ratio(delta, m_minus, state.N, state.space.size, prop.log_prob(r))
    if _accept(log_ratio, rng):
        state.Z[n, k] = 0
        state.R[n, k] = -1
        if state.masked:
            state.S[n, k] = 0
        return True
    return False


def _birth_mask_probs(a: np.ndarray) -> np.ndarray:
    mag = np.sqrt(np.sum(a ** 2, axis=-1))
    top = mag.max()
    q = mag / top if top > 0 else np.full(mag.shape, 0.5)
    return np.clip(q, _MASK_EPS, 1 - _MASK_EPS)


def _mask_log_q(s: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(np.where(s == 1, np.log(q), np.log1p(-q))))


def propose_birth_count(state: ModelState, rng=None) -> int:
    """Number of new features proposed for one image, ``Poisson(alpha / N)``."""
    return int(_rng(state, rng).poisson(state.hyper.alpha / state.N))


class _BirthProposal:
    """Data-driven proposal for features private to one image.

    Placement is drawn with probability proportional to
    ``exp(E(r) / (2 sigma_x**2))`` where ``E(r)`` is the unexplained squared
    error under the placed canvas; the appearance is then drawn from its
    conjugate posterior given the image data under that placement.  Both
    densities depend only on the image with the private features removed,
    so the same object scores forward and reverse moves.
    """

    def __init__(self, state: ModelState, n: int, base: np.ndarray):
        self.state = state
        x = state.X[n]
        err = np.sum((x - base) ** 2, axis=-1)
        ones = np.ones(state.space.canvas_shape + (1,))
        energy = correlation_scores(err[..., None], ones, state.space)
        self.placement = proposal_from_scores(energy / (2 * state.hyper.sigma_x ** 2),
                                              space=state.space)
        # what a new feature should reproduce where it lands
        self.target = x if state.masked else x - base

    def appearance(self, index: int):
        state = self.state
        fh, fw = state.space.canvas_shape
        C = state.C
        img, src = state.space.landing(index)
        idx = src.ravel()
        counts = np.bincount(idx, minlength=fh * fw)
        data = self.target[img].reshape(-1, C)
        sums = np.stack([np.bincount(idx, weights=data[:, c], minlength=fh * fw)
                         for c in range(C)], axis=1)
        sx2 = state.hyper.sigma_x ** 2
        var = 1.0 / (1.0 / state.hyper.sigma_a ** 2 + counts / sx2)
        mean = var[:, None] * sums / sx2
        return mean.reshape(fh, fw, C), np.broadcast_to(var.reshape(fh, fw, 1), (fh, fw, C))

    def draw(self, rng):
        """Draw ``(r, a, s)``; ``s`` is None for the linear variants.

        For the masked variant the mask is drawn first, from the normalized
        posterior mean, and only pixels it shows get posterior appearance
        values; hidden pixels are prior draws, as the feature update would
        make them.
        """
        state = self.state
        r, _ = sample_transformation(self.placement, rng)
        mean, var = self.appearance(r)
        a = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        if not state.masked:
            return r, a, None
        s = _draw_mask(_birth_mask_probs(mean), rng)
        prior = rng.normal(0.0, state.hyper.sigma_a, mean.shape)
        return r, np.where(s[..., None] == 1, a, prior), s

    def log_weight(self, r: int, a: np.ndarray, s: np.ndarray | None) -> float:
        """log target / proposal density of one private feature."""
        state = self.state
        sa2 = state.hyper.sigma_a ** 2
        mean, var = self.appearance(r)
        out = -math.log(state.space.size) - self.placement.log_prob(r)
        if s is None:
            return out + _normal_logpdf(a, 0.0, sa2) - _normal_logpdf(a, mean, var)
        on = s == 1
        out += _normal_logpdf(a[on], 0.0, sa2) - _normal_logpdf(a[on], mean[on], var[on])
        return out + s.size * math.log(0.5) - _mask_log_q(s, _birth_mask_probs(mean))


def _normal_logpdf(x, mean, var) -> float:
    return float(np.sum(-0.5 * np.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)))


def _private_log_weight(state: ModelState, proposal, r: int, a: np.ndarray,
                        s: np.ndarray | None = None) -> float:
    """log target / proposal density of one private feature's (r, a, s)."""
    if proposal is not None:
        return proposal.log_weight(r, a, s)
    # prior draw at the identity of a single-transformation space
    if s is None:
        return 0.0
    return s.size * math.log(0.5) - _mask_log_q(s, _birth_mask_probs(a))


def mh_birth_new_features(state: ModelState, n: int, rng=None) -> int:
    """Propose replacing the features private to image ``n`` with new ones.

    The number of new features is ``Poisson(alpha / N)``.  With
    ``state.birth_proposal == "prior"`` each is a prior draw placed at the
    identity transformation; with ``"data"`` placement and appearance come
    from :class:`_BirthProposal`.  New features go on top of the depth order.
    Mask bits are drawn pixel-wise with probability ``|a_d| / max |a|``, with
    ``a`` the prior draw or, for data-driven births, the posterior mean of
    the appearance.  Data-driven draws are sequential: each new feature is proposed given the
    ones drawn before it.
    Features used only by ``n`` are switched off in the same move; they
    become empty and are pruned later.  Returns the number of features born
    (0 on rejection).
    """
    rng = _rng(state, rng)
    n_new = propose_birth_count(state, rng)
    counts = state.Z.sum(axis=0)
    singles = np.flatnonzero((state.Z[n] == 1) & (counts == 1))
    if n_new == 0 and singles.size == 0:
        return 0
    hyper = state.hyper
    x = state.X[n]
    sq_old = float(np.sum((x - compose_image(state, n)) ** 2))
    fh, fw = state.space.canvas_shape
    saved = (state.Z[n, singles].copy(), state.R[n, singles].copy(),
             state.S[n, singles].copy() if state.masked else None)
    state.Z[n, singles] = 0
    state.R[n, singles] = -1
    if state.masked:
        state.S[n, singles] = 0

    data = state.birth_proposal == "data"

    def current_proposal():
        # each private feature is proposed against the image with the
        # previously placed ones included, so later ones target what is left
        return _BirthProposal(state, n, compose_image(state, n)) if data else None

    # reverse move: the private features, scored in the order they would be proposed
    log_w = 0.0
    for i, k in enumerate(singles):
        r = int(saved[1][i])
        mask = saved[2][i] if state.masked else None
        log_w -= _private_log_weight(state, current_proposal(), r, state.A[k], mask)
        state.Z[n, k], state.R[n, k] = 1, r
        if state.masked:
            state.S[n, k] = saved[2][i]
    state.Z[n, singles] = 0
    state.R[n, singles] = -1
    if state.masked:
        state.S[n, singles] = 0

    k0 = state.K
    for _ in range(n_new):
        proposal = current_proposal()
        if proposal is None:
            r = state.space.identity_index
            a = rng.normal(0.0, hyper.sigma_a, (fh, fw, state.C))
            mask = _draw_mask(_birth_mask_probs(a), rng) if state.masked else None
        else:
            r, a, mask = proposal.draw(rng)
        k = int(state.append_features(a[None])[0])
        state.Z[n, k] = 1
        state.R[n, k] = r
        if state.masked:
            state.S[n, k] = mask
        log_w += _private_log_weight(state, proposal, r, a, mask)
    sq_new = float(np.sum((x - compose_image(state, n)) ** 2))
    log_ratio = (sq_old - sq_new) / (2 * hyper.sigma_x ** 2) + log_w
    if _accept(log_ratio, rng):
        return n_new
    state.keep_features(np.arange(k0))
    state.Z[n, singles], state.R[n, singles] = saved[0], saved[1]
    if state.masked:
        state.S[n, singles] = saved[2]
    return 0


def resample_transform_and_mask(state: ModelState, n: int, k: int, rng=None) -> bool:
    """MH move for ``r_nk`` (and ``s_nk``) with the correlation proposal."""
    rng = _rng(state, rng)
    if state.Z[n, k] != 1:
        raise ValueError(f"feature {k} is not active in image {n}")
    ctx = layer_context(state, n, k)
    prop = _proposal(state, ctx, k)
    r_old = int(state.R[n, k])
    r_new, log_q_new = sample_transformation(prop, rng)
    s_old = s_new = None
    if state.masked:
        s_old = state.S[n, k]
        s_new = _draw_mask(mask_proposal_probability(state, n, k), rng)
    sq_old = ctx.sq_error_with(state, r_old, s_old)
    sq_new = ctx.sq_error_with(state, r_new, s_new)
    delta = (sq_old - sq_new) / (2 * state.hyper.sigma_x ** 2)
    log_ratio = resample_log_ratio(delta, prop.log_prob(r_old), log_q_new)
    if _accept(log_ratio, rng):
        state.R[n, k] = r_new
        if state.masked:
            state.S[n, k] = s_new
        return True
    return False


def _mask_log_odds(state: ModelState, n: int, k: int, ctx=None) -> np.ndarray:
    """Posterior log odds of each mask bit of ``(n, k)`` being on."""
    if ctx is None:
        ctx = layer_context(state, n, k)
    img, src = state.space.landing(int(state.R[n, k]))
    C = state.C
    vals = state.A[k].reshape(-1, C)[src]
    x = ctx.x[img]
    b = ctx.base[img]
    diff = (np.sum((x - vals) ** 2, axis=-1) - np.sum((x - b) ** 2, axis=-1)) * ctx.open[img]
    fh, fw = state.space.canvas_shape
    per_pixel = np.bincount(src.ravel(), weights=diff.ravel(), minlength=fh * fw).reshape(fh, fw)
    p = mask_proposal_probability(state, n, k)
    return np.log(p) - np.log1p(-p) - per_pixel / (2 * state.hyper.sigma_x ** 2)


def gibbs_mask_pixel(state: ModelState, n: int, k: int, d: tuple[int, int], rng=None) -> int:
    """Gibbs draw of one mask bit from likelihood times the leave-one-out prior."""
    rng = _rng(state, rng)
    if not state.masked or state.Z[n, k] != 1:
        raise ValueError("mask bits exist only for active pairs of the masked variant")
    p_on = expit(_mask_log_odds(state, n, k)[d])
    bit = int(rng.random() < p_on)
    state.S[n, k][d] = bit
    return bit


def gibbs_masks(state: ModelState, n: int, k: int, rng=None) -> np.ndarray:
    """Gibbs update of every mask bit of ``(n, k)`` at once.

    Distinct canvas pixels land on disjoint image pixels and share no prior
    terms within one image, so the bits are conditionally independent.
    """
    rng = _rng(state, rng)
    p_on = expit(_mask_log_odds(state, n, k))
    state.S[n, k] = (rng.random(p_on.shape) < p_on).astype(np.int64)
    return state.S[n, k]


def mh_swap_adjacent_order(state: ModelState, rng=None) -> bool:
    """Propose exchanging the depth ranks of two adjacent features."""
    rng = _rng(state, rng)
    if not state.masked:
        raise ValueError("depth order exists for the masked variant only")
    K = state.K
    if K < 2:
        return False
    r = int(rng.integers(1, K))
    lo = int(np.flatnonzero(state.order == r)[0])
    hi = int(np.flatnonzero(state.order == r + 1)[0])
    images = np.flatnonzero((state.Z[:, lo] == 1) & (state.Z[:, hi] == 1))
    if images.size == 0:
        state.order[lo], state.order[hi] = r + 1, r
        return True
    sigma = state.hyper.sigma_x
    before = sum(image_log_likelihood(state.X[n], compose_image(state, n), sigma) for n in images)
    state.order[lo], state.order[hi] = r + 1, r
    after = sum(image_log_likelihood(state.X[n], compose_image(state, n), sigma) for n in images)
    if _accept(after - before, rng):
        return True
    state.order[lo], state.order[hi] = r, r + 1
    return False


# --------------------------------------------------------------------------
# features and hyperparameters
# --------------------------------------------------------------------------

@dataclass
class FeaturePosteriorStats:
    """Per canvas pixel: observation count, data sum, posterior variance and mean."""

    counts: np.ndarray  # (Fh, Fw)
    sums: np.ndarray  # (Fh, Fw, C)
    variance: np.ndarray  # (Fh, Fw)
    mean: np.ndarray  # (Fh, Fw, C)


def _feature_targets(state: ModelState, k: int, composites=None, owners=None):
    """Yield (landing slices, source indices, data, weight) per image using ``k``."""
    for n in np.flatnonzero(state.Z[:, k]):
        img, src = state.space.landing(int(state.R[n, k]))
        if state.masked:
            owner = owners[n] if owners is not None else visibility_owner(state, n)
            yield src, state.X[n][img], owner[img] == k
        else:
            comp = composites[n] if composites is not None else compose_image(state, n)
            vals = state.A[k].reshape(-1, state.C)[src]
            # residual with k removed: x - (comp - a_k)
            yield src, state.X[n][img] - comp[img] + vals, None


def feature_posterior_stats(state: ModelState, k: int, composites=None, owners=None) -> FeaturePosteriorStats:
    """Conjugate Gaussian posterior of every pixel of feature ``k``."""
    fh, fw = state.space.canvas_shape
    C = state.C
    counts = np.zeros(fh * fw)
    sums = np.zeros((fh * fw, C))
    for src, data, vis in _feature_targets(state, k, composites, owners):
        idx = src.ravel()
        data = data.reshape(-1, C)
        if vis is not None:
            keep = vis.ravel()
            idx, data = idx[keep], data[keep]
        counts += np.bincount(idx, minlength=fh * fw)
        for c in range(C):
            sums[:, c] += np.bincount(idx, weights=data[:, c], minlength=fh * fw)
    sx2 = state.hyper.sigma_x ** 2
    var = 1.0 / (1.0 / state.hyper.sigma_a ** 2 + counts / sx2)
    mean = var[:, None] * sums / sx2
    return FeaturePosteriorStats(counts.reshape(fh, fw), sums.reshape(fh, fw, C),
                                 var.reshape(fh, fw), mean.reshape(fh, fw, C))


def gibbs_feature_pixel(state: ModelState, k: int, d: tuple[int, int], c: int, rng=None) -> float:
    """Draw one feature pixel (one channel) from its conjugate conditional."""
    rng = _rng(state, rng)
    st = feature_posterior_stats(state, k)
    i, j = d
    value = st.mean[i, j, c] + math.sqrt(st.variance[i, j]) * rng.standard_normal()
    state.A[k, i, j, c] = value
    return value


def gibbs_feature(state: ModelState, k: int, rng=None, composites=None, owners=None) -> np.ndarray:
    """Draw every pixel and channel of feature ``k``; pixels are conditionally independent."""
    rng = _rng(state, rng)
    st = feature_posterior_stats(state, k, composites, owners)
    noise = rng.standard_normal(st.mean.shape)
    state.A[k] = st.mean + np.sqrt(st.variance)[..., None] * noise
    return state.A[k]


def gibbs_all_features(state: ModelState, rng=None):
    rng = _rng(state, rng)
    if state.masked:
        owners = [visibility_owner(state, n) for n in range(state.N)]
        for k in range(state.K):
            gibbs_feature(state, k, rng, owners=owners)
        return
    composites = [compose_image(state, n) for n in range(state.N)]
    for k in range(state.K):
        old = state.A[k].copy()
        gibbs_feature(state, k, rng, composites=composites)
        delta = state.A[k] - old
        for n in np.flatnonzero(state.Z[:, k]):
            img, src = state.space.landing(int(state.R[n, k]))
            composites[n][img] += delta.reshape(-1, state.C)[src]


def harmonic(N: int) -> float:
    return float(np.sum(1.0 / np.arange(1, N + 1)))


def gibbs_hyperparameters(state: ModelState, rng=None):
    """Conjugate updates of ``alpha``, ``sigma_x`` and ``sigma_a`` (shape-rate Gamma)."""
    rng = _rng(state, rng)
    h = state.hyper
    h.alpha = float(rng.gamma(h.alpha_a + state.k_plus, 1.0 / (h.alpha_b + harmonic(state.N))))
    sse = sum(float(np.sum((state.X[n] - compose_image(state, n)) ** 2)) for n in range(state.N))
    shape_x = h.sigma_x_a + state.X.size / 2
    h.sigma_x = math.sqrt(1.0 / rng.gamma(shape_x, 1.0 / (h.sigma_x_b + sse / 2)))
    shape_a = h.sigma_a_a + state.A.size / 2
    h.sigma_a = math.sqrt(1.0 / rng.gamma(shape_a, 1.0 / (h.sigma_a_b + float(np.sum(state.A ** 2)) / 2)))
    return h


def _resample_shapes(state: ModelState, rng):
    """Posterior draw of each feature's shape probabilities."""
    beta = state.hyper.beta
    on = state.S.sum(axis=0)
    users = state.Z.sum(axis=0)[:, None, None]
    pi = rng.beta(beta + on, beta + users - on)
    state.pi = np.clip(pi, 1e-12, 1 - 1e-12)


# --------------------------------------------------------------------------
# naive enumeration baseline
# --------------------------------------------------------------------------

def _naive_scores(state: ModelState, n: int, k: int) -> tuple[np.ndarray, float]:
    if state.masked:
        raise ValueError("naive enumeration is defined for the linear variants only")
    ctx = layer_context(state, n, k)
    x, base = ctx.x, ctx.base
    sigma = state.hyper.sigma_x
    a = state.A[k].reshape(-1, state.C)
    out = np.empty(state.space.size)
    for t in range(state.space.size):
        img, src = state.space.landing(t)
        mean = base.copy()
        mean[img] += a[src]
        out[t] = image_log_likelihood(x, mean, sigma)
    return out, image_log_likelihood(x, base, sigma)


def naive_transformation_log_conditional(state: ModelState, n: int, k: int) -> np.ndarray:
    """Normalized log conditional of ``r_nk`` given ``z_nk = 1``, by enumeration.

    The image likelihood is evaluated separately for every transformation.
    """
    ll, _ = _naive_scores(state, n, k)
    return ll - logsumexp(ll)


def naive_enumeration_update(state: ModelState, n: int, k: int, rng=None) -> ModelState:
    """Exact Gibbs step for ``z_nk`` with ``r_nk`` summed out, then ``r_nk``.

    Features private to ``n`` keep ``z_nk = 1`` and only resample ``r_nk``.
    """
    rng = _rng(state, rng)
    if state.masked:
        raise ValueError("naive enumeration is defined for the linear variants only")
    z = int(state.Z[n, k])
    m_minus = int(state.Z[:, k].sum()) - z
    if m_minus == 0 and z == 0:
        return state
    ll, ll0 = _naive_scores(state, n, k)
    T = state.space.size
    on = True
    if m_minus > 0:
        p = m_minus / state.N
        log_on = math.log(p) + float(logsumexp(ll)) - math.log(T)
        log_off = math.log1p(-p) + ll0
        on = rng.random() < expit(log_on - log_off)
    if not on:
        state.Z[n, k] = 0
        state.R[n, k] = -1
        return state
    w = np.exp(ll - ll.max())
    cdf = np.cumsum(w)
    r = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), T - 1)
    state.Z[n, k] = 1
    state.R[n, k] = r
    return state


# --------------------------------------------------------------------------
# joint density and sweep
# --------------------------------------------------------------------------

def log_ibp_prior(Z: np.ndarray, alpha: float) -> float:
    """Log probability of the left-ordered equivalence class of ``Z``."""
    N = Z.shape[0]
    m = Z.sum(axis=0)
    Zp = Z[:, m > 0]
    m = m[m > 0]
    K = m.size
    out = K * math.log(alpha) - alpha * harmonic(N)
    out += float(np.sum(gammaln(N - m + 1) + gammaln(m) - gammaln(N + 1)))
    if K:
        _, mult = np.unique(Zp.T, axis=0, return_counts=True)
        out -= float(np.sum(gammaln(mult + 1)))
    return out


def joint_log_likelihood(state: ModelState) -> float:
    """Data log-likelihood plus the log priors of Z, R, A, and (masked) S and order."""
    h = state.hyper
    out = sum(image_log_likelihood(state.X[n], compose_image(state, n), h.sigma_x)
              for n in range(state.N))
    out += log_ibp_prior(state.Z, h.alpha)
    out -= state.Z.sum() * math.log(state.space.size)
    A = state.A
    out += -0.5 * A.size * math.log(2 * math.pi * h.sigma_a ** 2) - float(np.sum(A ** 2)) / (2 * h.sigma_a ** 2)
    if state.masked and state.K:
        on = state.S.sum(axis=0)
        users = state.Z.sum(axis=0)[:, None, None]
        b = h.beta
        out += float(np.sum(gammaln(b + on) + gammaln(b + users - on) - gammaln(2 * b + users)
                            - 2 * gammaln(b) + gammaln(2 * b)))
        out -= float(gammaln(state.K + 1))
    return out


def sweep(state: ModelState, rng=None, sampler: str = "mh") -> tuple[ModelState, SweepReport]:
    """One full iteration over every latent variable.

    Phases, in order: indicator moves for shared features, births, transformation
    (and mask) resampling, mask Gibbs, depth-order swaps, feature Gibbs,
    hyperparameter Gibbs, pruning.  ``sampler="naive"`` replaces the first and
    third phases with :func:`naive_enumeration_update`.
    """
    rng = _rng(state, rng)
    if sampler not in ("mh", "naive"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if sampler == "naive" and state.masked:
        raise ValueError("naive enumeration is defined for the linear variants only")
    tally = _Tally()
    times: dict[str, float] = {}
    N = state.N

    t0 = time.perf_counter()
    for n in range(N):
        for k in range(state.K):
            z = state.Z[n, k]
            m_minus = state.Z[:, k].sum() - z
            if sampler == "naive":
                if m_minus or z:
                    before = z
                    naive_enumeration_update(state, n, k, rng)
                    tally.add("naive", state.Z[n, k] != before)
            elif m_minus:
                tally.add("flip", mh_update_feature_use(state, n, k, rng))
    times["indicators"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    births = 0
    for n in range(N):
        b = mh_birth_new_features(state, n, rng)
        births += b
    prune_empty_features(state)
    times["births"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if sampler == "mh" and state.space.size > 1:
        for n in range(N):
            for k in np.flatnonzero(state.Z[n]):
                tally.add("transform", resample_transform_and_mask(state, n, k, rng))
    times["transforms"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if state.masked:
        for n in range(N):
            for k in np.flatnonzero(state.Z[n]):
                gibbs_masks(state, n, k, rng)
        for _ in range(state.k_plus):
            tally.add("order", mh_swap_adjacent_order(state, rng))
    times["masks"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gibbs_all_features(state, rng)
    times["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if state.sample_hyper:
        gibbs_hyperparameters(state, rng)
    prune_empty_features(state)
    if state.masked:
        _resample_shapes(state, rng)
    times["hyper"] = time.perf_counter() - t0

    state.iteration += 1
    data_ll = sum(image_log_likelihood(state.X[n], compose_image(state, n), state.hyper.sigma_x)
                  for n in range(N))
    report = SweepReport(
        iteration=state.iteration,
        log_likelihood=joint_log_likelihood(state),
        data_log_likelihood=data_ll,
        k_plus=state.k_plus,
        proposals=tally.proposals,
        accepts=tally.accepts,
        births=births,
        times=times,
        alpha=state.hyper.alpha,
        sigma_x=state.hyper.sigma_x,
        sigma_a=state.hyper.sigma_a,
    )
    return state, report
