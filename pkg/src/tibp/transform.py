"""Finite transformation spaces and feature rendering.

A transformation is applied to a feature canvas in a fixed order: nearest
neighbour scaling, then an exact quarter-turn rotation, then an integer
translation.  Translations use the full linear-correlation lag range, so a
placed canvas may hang over any image border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Transformation",
    "TransformationSpace",
    "RenderedFeature",
    "enumerate_transformations",
    "rotate_scale_canvas",
    "render_feature",
    "inverse_pixel_map",
]

_QUARTER = math.pi / 2


class Transformation(NamedTuple):
    """Integer translation plus indices into the rotation and scale sets."""

    rx: int
    ry: int
    rot: int = 0
    scale: int = 0


def _quarter_turns(angle: float) -> int:
    q = angle / _QUARTER
    turns = int(round(q))
    if abs(q - turns) > 1e-9:
        raise ValueError(f"rotation {angle!r} is not a multiple of pi/2")
    return turns % 4


def _scaled_size(n: int, scale: float) -> int:
    # round half up, never below one pixel
    return max(1, int(math.floor(n * scale + 0.5)))


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output pixel centre; ties go to the lower index."""
    ratio = n_in / n_out
    centres = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.ceil(centres - 0.5).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def source_map(canvas_shape: tuple[int, int], rotation: float, scale: float) -> np.ndarray:
    """Flat base-canvas index feeding each pixel of the transformed canvas."""
    fh, fw = canvas_shape
    idx = np.arange(fh * fw, dtype=np.int64).reshape(fh, fw)
    if scale != 1.0:
        rows = _nearest_indices(fh, _scaled_size(fh, scale))
        cols = _nearest_indices(fw, _scaled_size(fw, scale))
        idx = idx[np.ix_(rows, cols)]
    # counterclockwise with the row axis pointing up
    return np.ascontiguousarray(np.rot90(idx, -_quarter_turns(rotation)))


def rotate_scale_canvas(canvas: np.ndarray, rotation: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Scale (nearest neighbour) and then rotate a canvas.

    Parameters
    ----------
    canvas : (Fh, Fw) or (Fh, Fw, C) ndarray
    rotation : float
        Angle in radians; must be a multiple of pi/2.
    scale : float
        Positive scale factor.  The output is ``round(scale * Fh)`` by
        ``round(scale * Fw)`` before rotation.
    """
    canvas = np.asarray(canvas)
    if scale <= 0:
        raise ValueError("scale must be positive")
    src = source_map(canvas.shape[:2], rotation, scale)
    flat = canvas.reshape((-1,) + canvas.shape[2:])
    return flat[src]


@dataclass(frozen=True)
class _Pair:
    scale: int
    rot: int
    src: np.ndarray  # (F'h, F'w) flat source indices
    offset: int  # first flat transformation index of this pair
    origin: tuple[int, int]  # (ry, rx) of the first lag
    grid: tuple[int, int]  # number of (ry, rx) lags

    @property
    def shape(self) -> tuple[int, int]:
        return self.src.shape


@dataclass(eq=False)
class TransformationSpace:
    """All admissible transformations for one image and canvas size.

    Parameters
    ----------
    image_shape : (H, W)
    canvas_shape : (Fh, Fw)
    rotations : sequence of float
        Angles in radians, multiples of pi/2.  Must contain 0.  Defaults to
        all four quarter turns.
    scales : sequence of float
        Positive factors.  Must contain 1.
    translate : bool
        When false every (scale, rotation) pair is only placed at the origin.
    """

    image_shape: tuple[int, int]
    canvas_shape: tuple[int, int]
    rotations: Sequence[float] = (0.0, _QUARTER, 2 * _QUARTER, 3 * _QUARTER)
    scales: Sequence[float] = (1.0,)
    translate: bool = True
    pairs: list[_Pair] = field(init=False, repr=False)
    size: int = field(init=False)

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.canvas_shape = tuple(int(v) for v in self.canvas_shape)
        self.rotations = tuple(float(r) for r in self.rotations)
        self.scales = tuple(float(s) for s in self.scales)
        H, W = self.image_shape
        fh, fw = self.canvas_shape
        if min(H, W, fh, fw) < 1:
            raise ValueError("image and canvas dimensions must be positive")
        if fh > H or fw > W:
            raise ValueError(f"canvas {fh}x{fw} larger than image {H}x{W}")
        if not self.rotations or not self.scales:
            raise ValueError("rotation and scale sets must be non-empty")
        turns = [_quarter_turns(r) for r in self.rotations]
        if len(set(turns)) != len(turns):
            raise ValueError("duplicate rotations")
        if len(set(self.scales)) != len(self.scales):
            raise ValueError("duplicate scales")
        if 0 not in turns:
            raise ValueError("rotation set must contain 0")
        if 1.0 not in self.scales:
            raise ValueError("scale set must contain 1")
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")

        self.pairs = []
        offset = 0
        for si, s in enumerate(self.scales):
            for ri, r in enumerate(self.rotations):
                src = source_map(self.canvas_shape, r, s)
                ph, pw = src.shape
                if ph > H or pw > W:
                    raise ValueError(
                        f"canvas {fh}x{fw} at scale {s} and rotation {r} "
                        f"is {ph}x{pw}, larger than image {H}x{W}")
                if self.translate:
                    origin, grid = (1 - ph, 1 - pw), (H + ph - 1, W + pw - 1)
                else:
                    origin, grid = (0, 0), (1, 1)
                self.pairs.append(_Pair(si, ri, src, offset, origin, grid))
                offset += grid[0] * grid[1]
        self.size = offset
        self._offsets = np.array([p.offset for p in self.pairs] + [offset])
        self._placements: dict[int, tuple] = {}
        self.identity_index = self.index(
            Transformation(0, 0, turns.index(0), self.scales.index(1.0)))

    def __len__(self):
        return self.size

    @property
    def is_identity_only(self) -> bool:
        return self.size == 1

    def pair_index(self, rot: int, scale: int) -> int:
        return scale * len(self.rotations) + rot

    def lag_shape(self, p: int) -> tuple[int, int]:
        return self.pairs[p].grid

    def index(self, t: Transformation) -> int:
        """Flat position of ``t`` in the canonical enumeration."""
        if not (0 <= t.rot < len(self.rotations) and 0 <= t.scale < len(self.scales)):
            raise ValueError(f"{t} has no such rotation or scale")
        pair = self.pairs[self.pair_index(t.rot, t.scale)]
        row, col = t.ry - pair.origin[0], t.rx - pair.origin[1]
        if not (0 <= row < pair.grid[0] and 0 <= col < pair.grid[1]):
            raise ValueError(f"{t} outside the lag range")
        return pair.offset + row * pair.grid[1] + col

    def decode(self, index: int) -> Transformation:
        index = int(index)
        if not 0 <= index < self.size:
            raise IndexError(index)
        p = int(np.searchsorted(self._offsets, index, side="right")) - 1
        pair = self.pairs[p]
        row, col = divmod(index - pair.offset, pair.grid[1])
        return Transformation(col + pair.origin[1], row + pair.origin[0], pair.rot, pair.scale)

    def placement(self, index: int):
        """Overlap of a placed canvas with the image frame.

        Returns ``(src, image_slices, canvas_slices)`` where ``src`` is the
        source map of the (scale, rotation) pair.  Slices are empty when the
        canvas misses the frame entirely.
        """
        cached = self._placements.get(index)
        if cached is not None:
            return cached
        t = self.decode(index)
        src = self.pairs[self.pair_index(t.rot, t.scale)].src
        ph, pw = src.shape
        H, W = self.image_shape
        y0, y1 = max(t.ry, 0), min(t.ry + ph, H)
        x0, x1 = max(t.rx, 0), min(t.rx + pw, W)
        y1, x1 = max(y1, y0), max(x1, x0)
        img = (slice(y0, y1), slice(x0, x1))
        can = (slice(y0 - t.ry, y1 - t.ry), slice(x0 - t.rx, x1 - t.rx))
        out = (src, img, can)
        self._placements[index] = out
        return out

    def landing(self, index: int):
        """Image slices and the base-canvas flat index landing on each pixel."""
        src, img, can = self.placement(index)
        return img, src[can]


def enumerate_transformations(space: TransformationSpace) -> list[Transformation]:
    """Every transformation in canonical order (scale, rotation, row-major lag)."""
    return [space.decode(i) for i in range(space.size)]


class RenderedFeature(NamedTuple):
    values: np.ndarray  # (H, W, C)
    support: np.ndarray  # (H, W) bool


def render_feature(canvas: np.ndarray, t: Transformation | int,
                   space: TransformationSpace) -> RenderedFeature:
    """Place a transformed canvas on an all-zero image frame."""
    canvas = np.asarray(canvas, dtype=float)
    squeeze = canvas.ndim == 2
    if squeeze:
        canvas = canvas[..., None]
    index = t if isinstance(t, (int, np.integer)) else space.index(t)
    H, W = space.image_shape
    C = canvas.shape[2]
    values = np.zeros((H, W, C))
    support = np.zeros((H, W), dtype=bool)
    img, src = space.landing(index)
    values[img] = canvas.reshape(-1, C)[src]
    support[img] = True
    if squeeze:
        values = values[..., 0]
    return RenderedFeature(values, support)


def inverse_pixel_map(t: Transformation | int, d: tuple[int, int],
                      space: TransformationSpace) -> tuple[int, int] | None:
    """Base-canvas pixel whose render lands on image pixel ``d``, else None."""
    index = t if isinstance(t, (int, np.integer)) else space.index(t)
    tr = space.decode(index)
    src = space.pairs[space.pair_index(tr.rot, tr.scale)].src
    y, x = d
    H, W = space.image_shape
    if not (0 <= y < H and 0 <= x < W):
        return None
    i, j = y - tr.ry, x - tr.rx
    if not (0 <= i < src.shape[0] and 0 <= j < src.shape[1]):
        return None
    return divmod(int(src[i, j]), space.canvas_shape[1])
