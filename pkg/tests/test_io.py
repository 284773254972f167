import struct

import numpy as np
import pytest

from tibp.core import Dataset, RunConfig, init_state
from tibp.io import (CheckpointError, DataError, box_downscale, checkpoint_bytes, format_config,
                     load_checkpoint, load_image_directory, parse_config, read_config,
                     read_image, read_manifest, save_checkpoint, write_config, write_image,
                     write_manifest)
from tibp.sampler import sweep
from tibp.synth import SynthSpec, generate_synthetic_dataset


def _chain(variant="m-tibp", sweeps=2, seed=0):
    data, _ = generate_synthetic_dataset(SynthSpec(n_images=8, height=7, width=7), seed)
    config = RunConfig(variant=variant, feature_height=5, feature_width=5, rotations=(0.0, 90.0),
                       alpha=2.0, seed=seed)
    from tibp.core import normalize_dataset
    state = init_state(normalize_dataset(data), config)
    for _ in range(sweeps):
        state, _ = sweep(state)
    return state


@pytest.mark.parametrize("suffix,channels", [(".pgm", 1), (".ppm", 3), (".png", 3), (".png", 1)])
def test_image_roundtrip(tmp_path, suffix, channels):
    rng = np.random.default_rng(0)
    img = rng.random((4, 5, channels))
    write_image(tmp_path / f"a{suffix}", img)
    back = read_image(tmp_path / f"a{suffix}")
    tol = 1 / 65535 if suffix != ".png" else 1 / 255
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= tol / 2 + 1e-12


def test_eight_bit_netpbm(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([0, 255]))
    assert read_image(tmp_path / "a.pgm").ravel().tolist() == [0.0, 1.0]


def test_unreadable_image_names_file(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
    with pytest.raises(DataError, match="bad.ppm"):
        load_image_directory(tmp_path)


def test_empty_directory(tmp_path):
    with pytest.raises(DataError):
        load_image_directory(tmp_path)


def test_directory_order_and_normalization(tmp_path):
    for name, v in [("b.pgm", 0.75), ("a.pgm", 0.25)]:
        write_image(tmp_path / name, np.full((2, 2), v))
    raw = load_image_directory(tmp_path, normalize=False)
    assert raw.names == ["a.pgm", "b.pgm"]
    assert raw.images[0, 0, 0, 0] == pytest.approx(0.25, abs=1e-4)
    norm = load_image_directory(tmp_path)
    assert np.allclose(norm.images.mean(), 0) and np.allclose(norm.images.std(), 1)


def test_mixed_sizes_rejected(tmp_path):
    write_image(tmp_path / "a.pgm", np.zeros((2, 2)))
    write_image(tmp_path / "b.pgm", np.zeros((4, 4)))
    with pytest.raises(DataError):
        load_image_directory(tmp_path)
    d = load_image_directory(tmp_path, resize=(2, 2), normalize=False)
    assert d.images.shape == (2, 2, 2, 1)


def test_box_filter_preserves_constant_mean():
    img = np.full((202, 202, 3), 0.37)
    small = box_downscale(img, 2)
    assert small.shape == (101, 101, 3)
    assert np.allclose(small.mean(axis=(0, 1)), 0.37, atol=1e-6)
    with pytest.raises(DataError):
        box_downscale(np.zeros((5, 5)), 2)


@pytest.mark.parametrize("variant", ["lg-tibp", "m-tibp", "ibp-lg"])
def test_checkpoint_roundtrip_is_exact(tmp_path, variant):
    s = _chain(variant)
    save_checkpoint(s, tmp_path / "c.bin")
    t = load_checkpoint(tmp_path / "c.bin")
    assert checkpoint_bytes(t) == checkpoint_bytes(s)
    assert t.rng.random() == s.rng.random()


def test_checkpoint_with_no_features(tmp_path):
    data = Dataset(np.random.default_rng(0).random((3, 4, 4)))
    s = init_state(data, RunConfig(variant="m-tibp", feature_height=2, feature_width=2))
    save_checkpoint(s, tmp_path / "c.bin")
    t = load_checkpoint(tmp_path / "c.bin")
    assert t.K == 0 and t.S.shape == (3, 0, 2, 2)


def test_resume_matches_uninterrupted_run(tmp_path):
    a = _chain("m-tibp", sweeps=2, seed=3)
    save_checkpoint(a, tmp_path / "c.bin")
    b = load_checkpoint(tmp_path / "c.bin")
    for _ in range(3):
        a, ra = sweep(a)
        b, rb = sweep(b)
        assert ra.log_likelihood == rb.log_likelihood
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_corrupt_checkpoints_rejected(tmp_path):
    blob = checkpoint_bytes(_chain("lg-tibp", sweeps=1))
    for bad in (blob[:-10], blob[: len(blob) // 2], b"XXXX" + blob[4:], blob + b"\0",
                blob[:4] + struct.pack("<I", 99) + blob[8:]):
        (tmp_path / "c.bin").write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_config_roundtrip(tmp_path):
    c = RunConfig(variant="m-tibp", feature_height=5, feature_width=4, rotations=(0.0, 180.0),
                  scales=(0.5, 1.0), sample_hyper=False, sigma_x=0.25, data_dir="imgs")
    write_config(c, tmp_path / "run.cfg")
    assert read_config(tmp_path / "run.cfg") == c
    assert parse_config(format_config(c)) == c


def test_config_parsing_rules():
    c = parse_config("# comment\nvariant = lg-tibp  # trailing\n\nrotations = 0, 90\n"
                     "sample_hyper = no\niterations = 7\n")
    assert c.rotations == (0.0, 90.0) and not c.sample_hyper and c.iterations == 7
    for text in ("bogus = 1\n", "alpha = 1\nalpha = 2\n", "alpha 1\n", "iterations = x\n",
                 "sample_hyper = maybe\n", "alpha = -1\n"):
        with pytest.raises(ValueError):
            parse_config(text)


def test_manifest_roundtrip(tmp_path):
    _, truth = generate_synthetic_dataset(SynthSpec(n_images=5, rotations=(0.0, 90.0)), 0)
    write_manifest(truth, tmp_path / "truth.manifest", ["a.ppm"])
    back = read_manifest(tmp_path / "truth.manifest")
    assert np.array_equal(back.features, truth.features)
    assert np.array_equal(back.transforms, truth.transforms)
    assert back.rotations == (0.0, 90.0) and back.meta["files"] == ["a.ppm"]
    (tmp_path / "x.manifest").write_text("{}")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "x.manifest")
