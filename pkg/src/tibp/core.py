"""Shared model types, dataset normalization and model-state bookkeeping."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .transform import Transformation, TransformationSpace

__all__ = [
    "IBP_LG",
    "LG_TIBP",
    "M_TIBP",
    "VARIANTS",
    "Dataset",
    "Hyperparameters",
    "RunConfig",
    "ModelState",
    "StateError",
    "normalize_dataset",
    "denormalize",
    "init_state",
    "prune_empty_features",
]

IBP_LG = "ibp-lg"
LG_TIBP = "lg-tibp"
M_TIBP = "m-tibp"
VARIANTS = (IBP_LG, LG_TIBP, M_TIBP)


class StateError(ValueError):
    """A model state violates a structural or domain invariant."""


@dataclass
class Dataset:
    """N images of identical shape ``(H, W, C)`` plus normalization statistics.

    ``mean`` and ``std`` are per channel; they are the identity (0 and 1)
    until :func:`normalize_dataset` has been applied.
    """

    images: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    names: list[str] | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=float)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise ValueError("images must have shape (N, H, W) or (N, H, W, C)")
        if images.shape[0] < 1:
            raise ValueError("a dataset needs at least one image")
        if not np.all(np.isfinite(images)):
            raise ValueError("non-finite pixel values")
        self.images = images
        C = images.shape[3]
        self.mean = np.zeros(C) if self.mean is None else np.asarray(self.mean, dtype=float)
        self.std = np.ones(C) if self.std is None else np.asarray(self.std, dtype=float)

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    @property
    def n_channels(self) -> int:
        return self.images.shape[3]

    def __len__(self):
        return self.n_images


def normalize_dataset(raw: Dataset) -> Dataset:
    """Per-channel zero mean, unit (population) variance over all pixels.

    The returned dataset records the statistics that map it back to the
    input, composed with any normalization the input already carried.
    """
    x = raw.images
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    spread = np.ptp(x.reshape(-1, x.shape[3]), axis=0)
    if np.any(spread == 0) or np.any(std <= 0):
        raise ValueError("degenerate variance: a channel is constant")
    out = (x - mean) / std
    return Dataset(out, mean=raw.mean + raw.std * mean, std=raw.std * std,
                   names=raw.names)


def denormalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Invert :func:`normalize_dataset` for images in normalized units."""
    return np.asarray(images, dtype=float) * std + mean


@dataclass
class Hyperparameters:
    """Current values and conjugate-prior parameters.

    ``alpha ~ Gamma(alpha_a, rate=alpha_b)``, ``sigma_x**2 ~ InvGamma(sigma_x_a,
    sigma_x_b)`` and ``sigma_a**2 ~ InvGamma(sigma_a_a, sigma_a_b)``.
    """

    alpha: float = 1.0
    beta: float = 1.0
    sigma_x: float = 1.0
    sigma_a: float = 1.0
    alpha_a: float = 1.0
    alpha_b: float = 1.0
    sigma_x_a: float = 1.0
    sigma_x_b: float = 1.0
    sigma_a_a: float = 1.0
    sigma_a_b: float = 1.0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise StateError(f"hyperparameter {f.name} must be positive, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, values) -> "Hyperparameters":
        return cls(*[float(v) for v in values])


@dataclass
class RunConfig:
    """Everything needed to start and run one chain.

    Rotations are given in degrees.  ``feature_height``/``feature_width`` of 0
    mean "same as the image".
    """

    variant: str = LG_TIBP
    feature_height: int = 0
    feature_width: int = 0
    rotations: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    scales: tuple[float, ...] = (1.0,)
    alpha: float = 1.0
    beta: float = 1.0
    sigma_x: float = 0.5
    sigma_a: float = 1.0
    alpha_a: float = 1.0
    alpha_b: float = 1.0
    sigma_x_a: float = 1.0
    sigma_x_b: float = 1.0
    sigma_a_a: float = 1.0
    sigma_a_b: float = 1.0
    sample_hyper: bool = True
    birth_proposal: str = "data"
    warm_start: int = 0
    iterations: int = 100
    seed: int = 0
    proposal_temperature: float = 1.0
    data_dir: str = ""
    normalize: bool = True

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.rotations = tuple(float(r) for r in self.rotations)
        self.scales = tuple(float(s) for s in self.scales)
        if self.birth_proposal not in ("data", "prior"):
            raise ValueError("birth_proposal must be 'data' or 'prior'")
        if self.proposal_temperature <= 0:
            raise ValueError("proposal_temperature must be positive")
        if self.iterations < 0 or self.warm_start < 0:
            raise ValueError("iterations and warm_start must be non-negative")
        self.hyperparameters().validate()

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(**{f.name: float(getattr(self, f.name))
                                  for f in fields(Hyperparameters)})

    def space(self, image_shape: tuple[int, int]) -> TransformationSpace:
        H, W = image_shape
        fh = self.feature_height or H
        fw = self.feature_width or W
        if self.variant == IBP_LG:
            return TransformationSpace((H, W), (fh, fw), (0.0,), translate=False)
        return TransformationSpace((H, W), (fh, fw),
                                   [math.radians(r) for r in self.rotations],
                                   self.scales)


@dataclass(eq=False)
class ModelState:
    """All latent variables of one chain.

    Per active pair ``(n, k)`` the transformation is stored as a flat index
    into ``space`` (``R[n, k] == -1`` when ``Z[n, k] == 0``) and, for the
    masked variant, the mask lives in base-canvas coordinates ``S[n, k]``.
    ``order`` holds depth ranks ``1..K``; a higher rank is nearer the viewer.
    """

    variant: str
    X: np.ndarray
    space: TransformationSpace
    A: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    hyper: Hyperparameters
    rng: np.random.Generator
    S: np.ndarray | None = None
    order: np.ndarray | None = None
    pi: np.ndarray | None = None
    ids: np.ndarray | None = None
    next_id: int = 0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    seed: int = 0
    iteration: int = 0
    temperature: float = 1.0
    sample_hyper: bool = True
    birth_proposal: str = "data"
    log: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(self.K, dtype=np.int64)
            self.next_id = max(self.next_id, self.K)
        C = self.X.shape[3]
        if self.mean is None:
            self.mean = np.zeros(C)
        if self.std is None:
            self.std = np.ones(C)

    # shapes -----------------------------------------------------------------
    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def C(self) -> int:
        return self.X.shape[3]

    @property
    def masked(self) -> bool:
        return self.variant == M_TIBP

    @property
    def counts(self) -> np.ndarray:
        return self.Z.sum(axis=0)

    @property
    def k_plus(self) -> int:
        return int(np.count_nonzero(self.counts))

    def transformation(self, n: int, k: int) -> Transformation | None:
        r = int(self.R[n, k])
        return None if r < 0 else self.space.decode(r)

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    # feature bookkeeping ----------------------------------------------------
    def append_features(self, A_new: np.ndarray) -> np.ndarray:
        """Add unused features on top of the depth order; returns their indices."""
        k0, k_new = self.K, A_new.shape[0]
        N = self.N
        fh, fw = self.space.canvas_shape
        self.A = np.concatenate([self.A, A_new], axis=0)
        self.Z = np.concatenate([self.Z, np.zeros((N, k_new), np.int64)], axis=1)
        self.R = np.concatenate([self.R, np.full((N, k_new), -1, np.int64)], axis=1)
        self.ids = np.concatenate([self.ids, self.next_id + np.arange(k_new, dtype=np.int64)])
        self.next_id += k_new
        if self.masked:
            self.S = np.concatenate([self.S, np.zeros((N, k_new, fh, fw), np.int64)], axis=1)
            self.order = np.concatenate([self.order, k0 + 1 + np.arange(k_new, dtype=np.int64)])
            self.pi = np.concatenate([self.pi, np.full((k_new, fh, fw), 0.5)], axis=0)
        return np.arange(k0, k0 + k_new)

    def keep_features(self, keep: np.ndarray):
        """Restrict to the features selected by ``keep``; ranks are recompacted."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        self.A = self.A[keep]
        self.Z = self.Z[:, keep]
        self.R = self.R[:, keep]
        self.ids = self.ids[keep]
        if self.masked:
            self.S = self.S[:, keep]
            self.pi = self.pi[keep]
            self.order = _compact_ranks(self.order[keep])

    # validation -------------------------------------------------------------
    def validate(self) -> "ModelState":
        """Raise :class:`StateError` if any field is inconsistent."""
        if self.variant not in VARIANTS:
            raise StateError(f"unknown variant {self.variant!r}")
        X, A = self.X, self.A
        if X.ndim != 4:
            raise StateError("X must be (N, H, W, C)")
        N, H, W, C = X.shape
        if tuple(self.space.image_shape) != (H, W):
            raise StateError("transformation space does not match the images")
        fh, fw = self.space.canvas_shape
        K = A.shape[0]
        if A.shape != (K, fh, fw, C):
            raise StateError(f"features have shape {A.shape}, expected {(K, fh, fw, C)}")
        if not np.all(np.isfinite(A)):
            raise StateError("non-finite feature values")
        if self.Z.shape != (N, K) or self.R.shape != (N, K):
            raise StateError("Z and R must be (N, K)")
        if not np.isin(self.Z, (0, 1)).all():
            raise StateError("Z must be binary")
        active = self.Z == 1
        if np.any(self.R[~active] != -1):
            raise StateError("transformations set where z = 0")
        if np.any((self.R[active] < 0) | (self.R[active] >= self.space.size)):
            raise StateError("transformation index out of range")
        if self.variant == IBP_LG and np.any(self.R[active] != self.space.identity_index):
            raise StateError("ibp-lg allows the identity transformation only")
        if self.ids is None or self.ids.shape != (K,) or len(set(self.ids.tolist())) != K:
            raise StateError("feature ids must be unique")
        if self.masked:
            if self.S is None or self.S.shape != (N, K, fh, fw):
                raise StateError("masks must be (N, K, Fh, Fw)")
            if not np.isin(self.S, (0, 1)).all():
                raise StateError("masks must be binary")
            if np.any(self.S[~active]):
                raise StateError("mask set where z = 0")
            if self.order is None or sorted(self.order.tolist()) != list(range(1, K + 1)):
                raise StateError("order must be a permutation of 1..K")
            if self.pi is None or self.pi.shape != (K, fh, fw):
                raise StateError("shape probabilities must be (K, Fh, Fw)")
            if np.any((self.pi <= 0) | (self.pi >= 1)):
                raise StateError("shape probabilities must lie in (0, 1)")
        elif self.S is not None or self.order is not None:
            raise StateError("masks and order exist only for the masked variant")
        self.hyper.validate()
        return self


def _compact_ranks(ranks: np.ndarray) -> np.ndarray:
    out = np.empty_like(ranks)
    out[np.argsort(ranks, kind="stable")] = np.arange(1, ranks.size + 1)
    return out


def init_state(dataset: Dataset, config: RunConfig) -> ModelState:
    """Cold-start (K = 0) state, or ``config.warm_start`` unused prior draws."""
    H, W = dataset.image_shape
    fh = config.feature_height or H
    fw = config.feature_width or W
    if fh > H or fw > W:
        raise ValueError(f"feature canvas {fh}x{fw} exceeds image {H}x{W}")
    space = config.space((H, W))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    N, C = dataset.n_images, dataset.n_channels
    masked = config.variant == M_TIBP
    hyper = config.hyperparameters()
    state = ModelState(
        variant=config.variant,
        X=dataset.images,
        space=space,
        A=np.zeros((0, fh, fw, C)),
        Z=np.zeros((N, 0), np.int64),
        R=np.zeros((N, 0), np.int64),
        hyper=hyper,
        rng=rng,
        S=np.zeros((N, 0, fh, fw), np.int64) if masked else None,
        order=np.zeros(0, np.int64) if masked else None,
        pi=np.zeros((0, fh, fw)) if masked else None,
        mean=dataset.mean.copy(),
        std=dataset.std.copy(),
        seed=config.seed,
        temperature=config.proposal_temperature,
        sample_hyper=config.sample_hyper,
        birth_proposal=config.birth_proposal,
    )
    if config.warm_start:
        k0 = config.warm_start
        state.append_features(rng.normal(0.0, hyper.sigma_a, (k0, fh, fw, C)))
        if masked:
            state.pi = rng.beta(hyper.beta, hyper.beta, (k0, fh, fw)).clip(1e-12, 1 - 1e-12)
    return state.validate()


def prune_empty_features(state: ModelState) -> ModelState:
    """Drop features no image uses; depth ranks keep their relative order."""
    keep = state.counts > 0
    if not keep.all():
        state.keep_features(keep)
    return state
