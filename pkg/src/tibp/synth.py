"""Synthetic glyph datasets with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset
from .transform import TransformationSpace

__all__ = ["GLYPHS", "GLYPH_COLORS", "SynthSpec", "GroundTruth", "generate_synthetic_dataset",
           "glyph_features",
           "normalized_truth_features"]

_STENCILS = {
    "v": ["1...1",
          "1...1",
          ".1.1.",
          ".1.1.",
          "..1.."],
    "T": ["11111",
          "..1..",
          "..1..",
          "..1..",
          "..1.."],
    "U": ["1...1",
          "1...1",
          "1...1",
          "1...1",
          ".111."],
    "x": ["1...1",
          ".1.1.",
          "..1..",
          ".1.1.",
          "1...1"],
}

GLYPHS = {name: np.array([[c == "1" for c in row] for row in rows], dtype=float)
          for name, rows in _STENCILS.items()}

GLYPH_COLORS = {
    "v": (1.0, 0.0, 0.0),
    "T": (0.0, 1.0, 0.0),
    "U": (1.0, 1.0, 0.0),
    "x": (0.0, 0.0, 1.0),
}


def glyph_features(names=("v", "T", "U", "x")) -> tuple[np.ndarray, np.ndarray]:
    """Coloured 5x5 glyph canvases ``(K, 5, 5, 3)`` and their stencils ``(K, 5, 5)``."""
    stencils = np.stack([GLYPHS[n] for n in names])
    colors = np.array([GLYPH_COLORS[n] for n in names])
    return stencils[..., None] * colors[:, None, None, :], stencils


@dataclass
class SynthSpec:
    """How to draw a synthetic dataset.

    ``features``/``stencils`` default to the four built-in glyphs.  With
    ``placement="inside"`` translations keep the transformed glyph inside the
    frame; ``"full"`` samples the whole lag range and clips at the borders.
    Rotations are in degrees.
    """

    n_images: int = 100
    height: int = 9
    width: int = 9
    include_prob: float = 0.5
    mode: str = "occluding"
    noise: float = 0.0
    rotations: tuple[float, ...] = (0.0,)
    scales: tuple[float, ...] = (1.0,)
    placement: str = "inside"
    features: np.ndarray | None = None
    stencils: np.ndarray | None = None
    names: tuple[str, ...] = ("v", "T", "U", "x")

    def __post_init__(self):
        if self.mode not in ("additive", "occluding"):
            raise ValueError(f"mode must be 'additive' or 'occluding', not {self.mode!r}")
        if self.placement not in ("inside", "full"):
            raise ValueError("placement must be 'inside' or 'full'")
        if not 0.0 <= self.include_prob <= 1.0:
            raise ValueError("include_prob must lie in [0, 1]")
        if self.noise < 0 or self.n_images < 1:
            raise ValueError("noise must be non-negative and n_images positive")


@dataclass
class GroundTruth:
    """Everything used to draw the images.

    ``transforms[n, k]`` holds ``(rx, ry, rot, scale)`` for active pairs and
    -1 elsewhere.  ``order`` ranks features (higher is nearer) in occluding
    mode; masks are the stencils.
    """

    features: np.ndarray
    stencils: np.ndarray
    names: list[str]
    Z: np.ndarray
    transforms: np.ndarray
    order: np.ndarray
    mode: str
    noise: float
    rotations: tuple[float, ...]
    scales: tuple[float, ...]
    image_shape: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def space(self) -> TransformationSpace:
        return TransformationSpace(self.image_shape, self.features.shape[1:3],
                                   [math.radians(r) for r in self.rotations], self.scales)


def _admissible(space: TransformationSpace, placement: str) -> np.ndarray:
    if placement == "full":
        return np.arange(space.size)
    H, W = space.image_shape
    keep = []
    for i in range(space.size):
        t = space.decode(i)
        ph, pw = space.pairs[space.pair_index(t.rot, t.scale)].shape
        if 0 <= t.ry <= H - ph and 0 <= t.rx <= W - pw:
            keep.append(i)
    return np.array(keep)


def generate_synthetic_dataset(spec: SynthSpec, rng: np.random.Generator | int = 0
                               ) -> tuple[Dataset, GroundTruth]:
    """Draw images by switching features on independently and placing them at random."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    if spec.features is None:
        features, stencils = glyph_features(spec.names)
        names = list(spec.names)
    else:
        features = np.asarray(spec.features, dtype=float)
        if features.ndim == 3:
            features = features[..., None]
        stencils = (np.asarray(spec.stencils, dtype=float) if spec.stencils is not None
                    else (np.abs(features).sum(axis=-1) > 0).astype(float))
        names = [f"f{i}" for i in range(features.shape[0])]
    K, fh, fw, C = features.shape
    H, W = spec.height, spec.width
    if fh > H or fw > W:
        raise ValueError(f"features {fh}x{fw} do not fit in {H}x{W} images")
    space = TransformationSpace((H, W), (fh, fw),
                                [math.radians(r) for r in spec.rotations], spec.scales)
    choices = _admissible(space, spec.placement)

    N = spec.n_images
    order = rng.permutation(K) + 1
    Z = (rng.random((N, K)) < spec.include_prob).astype(np.int64)
    picks = choices[rng.integers(0, choices.size, (N, K))]
    transforms = np.full((N, K, 4), -1, dtype=np.int64)
    images = np.zeros((N, H, W, C))
    flat_f = features.reshape(K, -1, C)
    flat_s = stencils.reshape(K, -1)
    by_depth = np.argsort(order)
    for n in range(N):
        for k in by_depth:
            if not Z[n, k]:
                continue
            t = int(picks[n, k])
            transforms[n, k] = space.decode(t)
            img, src = space.landing(t)
            vals = flat_f[k][src]
            if spec.mode == "additive":
                images[n][img] += vals
            else:
                on = flat_s[k][src] > 0
                sub = images[n][img]
                sub[on] = vals[on]
    if spec.noise > 0:
        images = images + rng.normal(0.0, spec.noise, images.shape)
    truth = GroundTruth(features=features, stencils=stencils, names=names, Z=Z,
                        transforms=transforms, order=order, mode=spec.mode, noise=spec.noise,
                        rotations=tuple(spec.rotations), scales=tuple(spec.scales),
                        image_shape=(H, W))
    return Dataset(images), truth


def normalized_truth_features(truth: GroundTruth, mean: np.ndarray, std: np.ndarray
                              ) -> np.ndarray:
    """True feature canvases expressed as normalized image patches.

    A glyph seen in isolation over the zero background normalizes to
    ``(f - mean) / std`` across its whole canvas, which is what a model with
    no separate background feature has to learn.
    """
    return (truth.features - mean) / std
