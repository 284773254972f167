import math

import numpy as np
import pytest

from tibp.transform import Transformation
from tibp.synth import (GLYPHS, SynthSpec, generate_synthetic_dataset, glyph_features,
                        normalized_truth_features)


def test_defaults():
    data, truth = generate_synthetic_dataset(SynthSpec(), 0)
    assert data.images.shape == (100, 9, 9, 3)
    assert truth.features.shape == (4, 5, 5, 3)
    assert truth.names == ["v", "T", "U", "x"]
    assert truth.noise == 0.0
    assert set(np.unique(data.images)) <= {0.0, 1.0}


def test_glyphs_are_distinct_colours():
    f, s = glyph_features()
    assert set(GLYPHS) == {"v", "T", "U", "x"}
    colours = {tuple(f[k][s[k] > 0][0]) for k in range(4)}
    assert len(colours) == 4


def test_zero_inclusion_gives_blank_images():
    data, truth = generate_synthetic_dataset(SynthSpec(n_images=20, include_prob=0.0), 1)
    assert np.all(data.images == 0) and truth.Z.sum() == 0


def test_full_inclusion_additive_identity_sums_features():
    f, _ = glyph_features()
    spec = SynthSpec(n_images=5, height=5, width=5, include_prob=1.0, mode="additive")
    data, _ = generate_synthetic_dataset(spec, 2)
    assert np.allclose(data.images, f.sum(axis=0))


def test_inclusion_frequency():
    spec = SynthSpec(n_images=10_000, include_prob=0.3)
    _, truth = generate_synthetic_dataset(spec, 3)
    freq = truth.Z.mean(axis=0)
    assert np.all(np.abs(freq - 0.3) < 3 * math.sqrt(0.3 * 0.7 / 10_000))


def test_occluding_pixels_never_blend():
    spec = SynthSpec(n_images=200, mode="occluding", include_prob=0.8)
    data, truth = generate_synthetic_dataset(spec, 4)
    colours = {tuple(c) for c in truth.features.reshape(-1, 3)}
    for px in data.images.reshape(-1, 3):
        assert tuple(px) in colours


def test_occluding_respects_depth_order():
    data, truth = generate_synthetic_dataset(SynthSpec(n_images=300, include_prob=0.9), 5)
    space = truth.space()
    front = int(np.argmax(truth.order))
    for n in range(data.n_images):
        if truth.Z[n, front]:
            rx, ry, rot, sc = truth.transforms[n, front]
            idx = space.index(Transformation(rx, ry, rot, sc))
            img, src = space.landing(idx)
            on = truth.stencils[front].ravel()[src] > 0
            vals = truth.features[front].reshape(-1, 3)[src]
            assert np.array_equal(data.images[n][img][on], vals[on])


def test_inside_placement_keeps_glyphs_in_frame():
    data, truth = generate_synthetic_dataset(SynthSpec(n_images=200, include_prob=1.0,
                                                       mode="additive"), 6)
    # every glyph fully visible, so each image holds all glyph mass
    assert np.allclose(data.images.sum(axis=(1, 2)), truth.features.sum(axis=(0, 1, 2)))


def test_seed_determinism():
    spec = SynthSpec(noise=0.1, rotations=(0.0, 90.0), height=11, width=11)
    a, ta = generate_synthetic_dataset(spec, 7)
    b, tb = generate_synthetic_dataset(spec, 7)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(ta.transforms, tb.transforms)
    c, _ = generate_synthetic_dataset(spec, 8)
    assert not np.array_equal(a.images, c.images)


def test_oversized_glyphs_rejected():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SynthSpec(height=4, width=9), 0)


@pytest.mark.parametrize("kw", [dict(mode="blend"), dict(include_prob=1.5), dict(noise=-1),
                                dict(placement="edge")])
def test_bad_spec(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_user_features_single_channel():
    f = np.zeros((2, 2, 2))
    f[0, 0, 0] = 1.0
    f[1, 1, 1] = 2.0
    data, truth = generate_synthetic_dataset(
        SynthSpec(n_images=10, height=4, width=4, features=f, mode="additive"), 9)
    assert data.n_channels == 1 and truth.names == ["f0", "f1"]


def test_rotated_and_scaled_draws_stay_consistent():
    spec = SynthSpec(n_images=50, height=15, width=15, rotations=(0.0, 90.0, 180.0, 270.0),
                     scales=(0.5, 1.0, 2.0), mode="additive", include_prob=1.0)
    data, truth = generate_synthetic_dataset(spec, 10)
    space = truth.space()
    f = truth.features.reshape(4, -1, 3)
    for n in range(5):
        expect = np.zeros((15, 15, 3))
        for k in range(4):
            rx, ry, rot, sc = truth.transforms[n, k]
            idx = space.index(Transformation(rx, ry, rot, sc))
            img, src = space.landing(idx)
            expect[img] += f[k][src]
        assert np.allclose(data.images[n], expect)


def test_normalized_truth():
    mean, std = np.array([0.1, 0.2, 0.3]), np.array([2.0, 2.0, 2.0])
    _, truth = generate_synthetic_dataset(SynthSpec(n_images=2), 0)
    out = normalized_truth_features(truth, mean, std)
    assert np.allclose(out * std + mean, truth.features)
