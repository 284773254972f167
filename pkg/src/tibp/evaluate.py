"""Held-out reconstruction, RMSE, feature recovery scoring and the sampler benchmark."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import LG_TIBP, ModelState, RunConfig, init_state, normalize_dataset
from .likelihood import compose_image
from .sampler import (gibbs_masks, joint_log_likelihood, mh_update_feature_use,
                      resample_transform_and_mask, sweep)
from .synth import SynthSpec, generate_synthetic_dataset
from .transform import rotate_scale_canvas
from .xcorr import cross_correlate_full

__all__ = [
    "BenchmarkRow",
    "MatchResult",
    "TestReconstruction",
    "reconstruct_test_image",
    "per_pixel_rmse",
    "learned_appearances",
    "feature_match_score",
    "run_benchmark",
    "train_test_split",
    "write_rows",
]


@dataclass
class BenchmarkRow:
    """One sweep of one sampler in the run-time benchmark.

    ``size`` is the image side length and ``pixels`` the image area D.
    """

    sampler: str
    size: int
    pixels: int
    k_plus: int
    seconds: float
    log_likelihood: float
    iteration: int

    def __post_init__(self):
        if not self.seconds > 0:
            raise ValueError("benchmark times must be positive")


@dataclass
class TestReconstruction:
    """Reconstruction of one held-out image with its inferred latents."""

    image: np.ndarray
    z: np.ndarray
    r: np.ndarray
    s: np.ndarray | None


def _with_test_image(trained: ModelState, x: np.ndarray) -> ModelState:
    # the held-out image joins as an extra row with no features on, so the
    # indicator prior for it is the IBP predictive m_k / (N + 1)
    state = trained.copy()
    K = state.K
    state.X = np.concatenate([state.X, x[None]], axis=0)
    state.Z = np.concatenate([state.Z, np.zeros((1, K), np.int64)])
    state.R = np.concatenate([state.R, np.full((1, K), -1, np.int64)])
    if state.masked:
        fh, fw = state.space.canvas_shape
        state.S = np.concatenate([state.S, np.zeros((1, K, fh, fw), np.int64)])
    return state


def reconstruct_test_image(trained: ModelState, x_test: np.ndarray, n_sweeps: int = 10,
                           rng: np.random.Generator | int | None = None
                           ) -> TestReconstruction:
    """Infer which trained features explain ``x_test`` and where.

    Features, depth order and hyperparameters stay fixed.  Each sweep runs the
    indicator flips and the transformation/mask moves on the test image only.
    ``x_test`` must already be normalized with the training statistics.
    """
    x = np.asarray(x_test, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    if x.shape != trained.X.shape[1:]:
        raise ValueError(f"test image shape {x.shape} does not match training "
                         f"images {trained.X.shape[1:]}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(trained.seed))
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    state = _with_test_image(trained, x)
    n = state.N - 1
    for _ in range(n_sweeps):
        for k in range(state.K):
            if state.Z[:n, k].any():
                mh_update_feature_use(state, n, k, rng)
        if state.space.size > 1:
            for k in np.flatnonzero(state.Z[n]):
                resample_transform_and_mask(state, n, k, rng)
        if state.masked:
            for k in np.flatnonzero(state.Z[n]):
                gibbs_masks(state, n, k, rng)
    return TestReconstruction(
        image=compose_image(state, n),
        z=state.Z[n].copy(),
        r=state.R[n].copy(),
        s=state.S[n].copy() if state.masked else None,
    )


def per_pixel_rmse(reconstruction: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared error over every pixel and channel."""
    a = np.asarray(reconstruction, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty images")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def learned_appearances(state: ModelState) -> np.ndarray:
    """Feature canvases as they look when rendered.

    For the masked variant a canvas pixel counts as part of the feature when
    most images using the feature have its mask bit on; elsewhere the
    feature shows whatever lies behind it, here the background level of the
    raw data (0 before normalization). Additive features are shown summed
    onto that background.
    """
    background = -state.mean / state.std
    if not state.masked:
        return state.A + background
    users = np.maximum(state.Z.sum(axis=0), 1)[:, None, None]
    on = state.S.sum(axis=0) / users >= 0.5
    return np.where(on[..., None], state.A, background)


@dataclass
class MatchResult:
    """Optimal one-to-one pairing between learned and true features.

    ``assignment`` lists ``(learned, true)`` index pairs, ``costs[j]`` is the
    matched RMSE of true feature ``j`` (inf if it has no partner) and
    ``surplus`` the learned features left unpaired.
    """

    assignment: list[tuple[int, int]]
    costs: np.ndarray
    mean_rmse: float
    surplus: list[int]
    cost_matrix: np.ndarray


def _as_canvases(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4:
        raise ValueError("features must be (K, h, w) or (K, h, w, C)")
    return a


def _pair_cost(learned: np.ndarray, true: np.ndarray, rotations, scales) -> float:
    # ||t - shift(l)||^2 = ||t||^2 + ||l||^2 - 2 <t, shift(l)>, minimized over
    # every relative offset at which the canvases overlap or not
    t_sq = float(np.sum(true ** 2))
    best = t_sq + float(np.sum(learned ** 2))
    for scale in scales:
        for rot in rotations:
            v = rotate_scale_canvas(learned, rot, scale)
            cross = cross_correlate_full(v, true)
            best = min(best, t_sq + float(np.sum(v ** 2)) - 2 * float(cross.max()))
    return math.sqrt(max(best, 0.0) / true.size)


def feature_match_score(learned, truth, space=None) -> MatchResult:
    """Score learned features against true ones, up to transformation.

    The cost of a (learned, true) pair is the smallest RMSE, taken over the
    true canvas entries, between the true canvas and the learned canvas under
    any rotation and scale of ``space`` and any relative translation.  Mass
    the learned feature puts outside the true canvas counts as error.  The
    Hungarian method then pairs features one to one.

    Parameters
    ----------
    learned : array (K, h, w[, C])
        Learned feature canvases, e.g. from :func:`learned_appearances`.
    truth : array (J, h', w'[, C])
        True feature canvases in the same units.
    space : TransformationSpace, optional
        Supplies the rotations and scales; identity only when omitted.
    """
    L = _as_canvases(learned)
    T = _as_canvases(truth)
    if L.shape[0] < 1:
        raise ValueError("at least one learned feature is needed")
    if L.shape[3] != T.shape[3]:
        raise ValueError("learned and true features differ in channels")
    if space is None:
        rotations, scales = [0.0], [1.0]
    else:
        rotations, scales = space.rotations, space.scales
    cost = np.array([[_pair_cost(l, t, rotations, scales) for t in T] for l in L])
    rows, cols = linear_sum_assignment(cost)
    costs = np.full(T.shape[0], np.inf)
    costs[cols] = cost[rows, cols]
    surplus = sorted(set(range(L.shape[0])) - set(rows.tolist()))
    mean = float(np.mean(cost[rows, cols]))
    return MatchResult([(int(r), int(c)) for r, c in zip(rows, cols)], costs, mean,
                       surplus, cost)


def train_test_split(n: int, test_fraction: float = 0.2,
                     rng: np.random.Generator | int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled index split; the test part has ``round(test_fraction * n)`` items."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n_test >= n:
        raise ValueError(f"cannot split {n} items with test fraction {test_fraction}")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def benchmark_config(seed: int, **overrides) -> RunConfig:
    """Chain settings used by :func:`run_benchmark`.

    LG-tIBP with 5x5 canvases over translations only, on raw images with
    ``sigma_x`` held at 0.1.  Noise-free data would otherwise drive a
    sampled ``sigma_x`` towards zero and the log-likelihood up without
    bound, so the two samplers' traces could not be compared.
    """
    params = dict(variant=LG_TIBP, feature_height=5, feature_width=5, rotations=(0.0,),
                  sigma_x=0.1, sample_hyper=False, normalize=False, seed=seed)
    params.update(overrides)
    return RunConfig(**params)


def run_benchmark(sizes=(9, 15), samplers=("mh", "naive"), n_iterations: int = 100,
                  rng: np.random.Generator | int = 0, progress=None, mode: str = "additive",
                  **config) -> list[BenchmarkRow]:
    """Time the correlation-driven sampler against naive enumeration.

    For each image side length a synthetic glyph dataset is drawn once and
    every sampler runs its own chain from the same seed.  ``mode`` is the
    composition rule of the data; the default additive rule is the one the
    LG model describes.  Extra keyword arguments override
    :func:`benchmark_config`.
    """
    for s in samplers:
        if s not in ("mh", "naive"):
            raise ValueError(f"unknown sampler {s!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    rows: list[BenchmarkRow] = []
    for size in sizes:
        data_seed, chain_seed = (int(v) for v in rng.integers(0, 2 ** 31, 2))
        raw, _ = generate_synthetic_dataset(SynthSpec(height=size, width=size, mode=mode),
                                            data_seed)
        for sampler in samplers:
            config_ = benchmark_config(chain_seed, **config)
            data = normalize_dataset(raw) if config_.normalize else raw
            state = init_state(data, config_)
            for _ in range(n_iterations):
                t0 = time.perf_counter()
                state, report = sweep(state, sampler=sampler)
                seconds = time.perf_counter() - t0
                rows.append(BenchmarkRow(sampler, size, size * size, report.k_plus,
                                         seconds, report.log_likelihood, report.iteration))
                if progress is not None:
                    progress(rows[-1])
    return rows


def write_rows(rows, path, header=None):
    """Write dataclass rows (or dicts) as a comma-separated table."""
    rows = list(rows)
    if header is None:
        if rows and isinstance(rows[0], dict):
            header = list(rows[0])
        elif rows:
            header = [f.name for f in fields(rows[0])]
        else:
            raise ValueError("header needed for an empty table")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            d = row if isinstance(row, dict) else {f.name: getattr(row, f.name) for f in fields(row)}
            w.writerow([_fmt(d[h]) for h in header])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
