"""scikit-learn style wrapper around a single chain."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import LG_TIBP, Dataset, RunConfig, denormalize, init_state, normalize_dataset
from .evaluate import learned_appearances, reconstruct_test_image
from .likelihood import compose_image
from .sampler import sweep

__all__ = ["TransformedIBP", "check_images"]


def check_images(X, n_channels: int | None = None, image_shape=None) -> np.ndarray:
    """Validate an image stack and return it as ``(N, H, W, C)`` floats.

    Parameters
    ----------
    X : array-like of shape (N, H, W) or (N, H, W, C)
    n_channels, image_shape : optional
        Expected channel count and ``(H, W)``, e.g. from a fitted model.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W[, C]), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("need at least one image")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    if n_channels is not None and X.shape[3] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[3]}")
    if image_shape is not None and tuple(X.shape[1:3]) != tuple(image_shape):
        raise ValueError(f"expected {tuple(image_shape)} images, got {X.shape[1:3]}")
    return X


class TransformedIBP(TransformerMixin, BaseEstimator):
    """Latent feature model whose features may move, turn and scale.

    ``fit`` runs ``n_iter`` sweeps of the sampler on the training images;
    ``transform`` infers the binary feature indicators of new images with
    the learned features held fixed.

    Parameters
    ----------
    variant : {"lg-tibp", "m-tibp", "ibp-lg"}
    feature_shape : (int, int), optional
        Feature canvas size; defaults to the image size.
    rotations : tuple of float
        Allowed rotations in degrees (multiples of 90).
    scales : tuple of float
    n_iter : int
        Training sweeps.
    alpha, beta, sigma_x, sigma_a : float
        Initial hyperparameter values.
    sample_hyper : bool
        Resample alpha, sigma_x and sigma_a every sweep.
    normalize : bool
        Standardize each channel before fitting.
    transform_sweeps : int
        Sweeps per image used by ``transform`` and ``reconstruct``.
    random_state : int
    """

    def __init__(self, variant=LG_TIBP, feature_shape=None,
                 rotations=(0.0, 90.0, 180.0, 270.0), scales=(1.0,), n_iter=100,
                 alpha=1.0, beta=1.0, sigma_x=0.5, sigma_a=1.0, sample_hyper=True,
                 normalize=True, proposal_temperature=1.0, birth_proposal="data", transform_sweeps=10, random_state=0):
        self.variant = variant
        self.feature_shape = feature_shape
        self.rotations = rotations
        self.scales = scales
        self.n_iter = n_iter
        self.alpha = alpha
        self.beta = beta
        self.sigma_x = sigma_x
        self.sigma_a = sigma_a
        self.sample_hyper = sample_hyper
        self.normalize = normalize
        self.proposal_temperature = proposal_temperature
        self.birth_proposal = birth_proposal
        self.transform_sweeps = transform_sweeps
        self.random_state = random_state

    def _config(self) -> RunConfig:
        fh, fw = self.feature_shape if self.feature_shape is not None else (0, 0)
        return RunConfig(variant=self.variant, feature_height=fh, feature_width=fw,
                         rotations=tuple(self.rotations), scales=tuple(self.scales),
                         alpha=self.alpha, beta=self.beta, sigma_x=self.sigma_x,
                         sigma_a=self.sigma_a, sample_hyper=self.sample_hyper,
                         birth_proposal=self.birth_proposal, iterations=self.n_iter,
                         seed=int(self.random_state),
                         proposal_temperature=self.proposal_temperature,
                         normalize=self.normalize)

    def fit(self, X, y=None):
        X = check_images(X)
        config = self._config()
        data = Dataset(X)
        if self.normalize:
            data = normalize_dataset(data)
        state = init_state(data, config)
        trace = []
        for _ in range(self.n_iter):
            state, report = sweep(state)
            trace.append(report)
        self.state_ = state
        self.trace_ = trace
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:3]
        self.n_channels_ = X.shape[3]
        return self

    @property
    def n_features_(self) -> int:
        check_is_fitted(self, "state_")
        return self.state_.K

    @property
    def features_(self) -> np.ndarray:
        """Learned feature canvases as rendered, in normalized units."""
        check_is_fitted(self, "state_")
        return learned_appearances(self.state_)

    def _infer(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X, self.n_channels_, self.image_shape_)
        st = self.state_
        Xn = (X - st.mean) / st.std
        rng = np.random.Generator(np.random.PCG64(st.seed))
        return Xn, [reconstruct_test_image(st, x, self.transform_sweeps, rng) for x in Xn]

    def transform(self, X):
        """Binary indicators ``(n_images, n_features_)`` of the learned features."""
        _, recs = self._infer(X)
        return np.array([r.z for r in recs], dtype=np.int64).reshape(len(recs), -1)

    def reconstruct(self, X):
        """Model reconstruction of each image in the units of ``X``."""
        _, recs = self._infer(X)
        st = self.state_
        return np.stack([denormalize(r.image, st.mean, st.std) for r in recs])

    def training_reconstruction(self):
        """Reconstructions of the training images in the units they were given."""
        check_is_fitted(self, "state_")
        st = self.state_
        return np.stack([denormalize(compose_image(st, n), st.mean, st.std)
                         for n in range(st.N)])
