"""Images, image directories, checkpoints, run configurations and truth manifests."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import Dataset, Hyperparameters, ModelState, RunConfig, normalize_dataset
from .synth import GroundTruth
from .transform import TransformationSpace

__all__ = [
    "DataError",
    "CheckpointError",
    "read_image",
    "write_image",
    "box_downscale",
    "load_image_directory",
    "save_checkpoint",
    "load_checkpoint",
    "read_config",
    "write_config",
    "write_manifest",
    "read_manifest",
    "atomic_write",
]

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")
CHECKPOINT_MAGIC = b"TIBP"
CHECKPOINT_VERSION = 1
_END = b"END."


class DataError(ValueError):
    """Input data cannot be read or is inconsistent."""


class CheckpointError(DataError):
    """A checkpoint file is malformed, truncated or of an unknown version."""


def atomic_write(path, data: bytes):
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def _netpbm_tokens(data: bytes, count: int, pos: int):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        out.append(data[start:pos])
    return out, pos + 1  # single whitespace byte before the raster


def _read_netpbm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported netpbm type {magic!r}; binary P5/P6 only")
    (w, h, maxval), pos = _netpbm_tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not (0 < maxval < 65536) or w < 1 or h < 1:
        raise DataError("bad netpbm header")
    C = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = w * h * C * dtype.itemsize
    raster = data[pos:pos + size]
    if len(raster) != size:
        raise DataError("truncated netpbm raster")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(h, w, C)
    return pixels.astype(float) / maxval


def read_image(path) -> np.ndarray:
    """Pixel values in [0, 1] as an ``(H, W, C)`` float array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    try:
        if data[:2] in (b"P5", b"P6"):
            return _read_netpbm(data)
        from PIL import Image
        import io as _io
        with Image.open(_io.BytesIO(data)) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=float) / 65535.0
            else:
                im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
                arr = np.asarray(im, dtype=float) / 255.0
    except DataError as e:
        raise DataError(f"{path}: {e}") from e
    except Exception as e:  # Pillow raises a variety of types
        raise DataError(f"cannot decode {path}: {e}") from e
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_image(path, image: np.ndarray):
    """Save values in [0, 1] (clipped) as 16-bit PGM/PPM, or 8-bit PNG by suffix."""
    path = Path(path)
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError("images must be (H, W), (H, W, 1) or (H, W, 3)")
    img = np.clip(img, 0.0, 1.0)
    H, W, C = img.shape
    if path.suffix.lower() == ".png":
        from PIL import Image
        import io as _io
        q = np.round(img * 255).astype(np.uint8)
        buf = _io.BytesIO()
        Image.fromarray(q[..., 0] if C == 1 else q).save(buf, format="PNG")
        atomic_write(path, buf.getvalue())
        return
    q = np.round(img * 65535).astype(">u2")
    header = f"{'P6' if C == 3 else 'P5'}\n{W} {H}\n65535\n".encode()
    atomic_write(path, header + q.tobytes())


def box_downscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks."""
    H, W = image.shape[:2]
    if factor < 1 or H % factor or W % factor:
        raise DataError(f"{H}x{W} is not divisible into {factor}x{factor} blocks")
    shape = (H // factor, factor, W // factor, factor) + image.shape[2:]
    return image.reshape(shape).mean(axis=(1, 3))


def _resize(image: np.ndarray, size, name: str) -> np.ndarray:
    H, W = image.shape[:2]
    h, w = size
    if (H, W) == (h, w):
        return image
    if H % h or W % w or H // h != W // w:
        raise DataError(f"{name}: cannot box-filter {H}x{W} down to {h}x{w}")
    return box_downscale(image, H // h)


def image_files(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_directory(path, resize=None, normalize: bool = True) -> Dataset:
    """Every image in ``path``, ordered by file name.

    Parameters
    ----------
    resize : (h, w), optional
        Target size reached by box averaging integer blocks.
    normalize : bool
        Rescale to zero mean and unit variance per channel.
    """
    files = image_files(path)
    if not files:
        raise DataError(f"no images in {path}")
    images = []
    for f in files:
        img = read_image(f)
        if resize is not None:
            img = _resize(img, resize, f.name)
        if images and img.shape != images[0].shape:
            raise DataError(f"{f.name} is {img.shape}, expected {images[0].shape}")
        images.append(img)
    data = Dataset(np.stack(images), names=[f.name for f in files])
    if normalize:
        try:
            data = normalize_dataset(data)
        except ValueError as e:
            raise DataError(str(e)) from e
    return data


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
# layout: magic, uint32 version, uint32 entry count, entries, end marker.
# entry: uint32 name length, name, type byte (f/i/u/s), uint32 rank,
# int64 dims, row-major little-endian payload

_TYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8"), b"u": np.dtype("<u8"),
          b"s": np.dtype("u1")}


def _entry(name: str, value) -> bytes:
    if isinstance(value, str):
        code, arr = b"s", np.frombuffer(value.encode(), dtype="u1")
    else:
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            code = b"f"
        elif arr.dtype.kind == "u":
            code = b"u"
        elif arr.dtype.kind in "ib":
            code = b"i"
        else:
            raise TypeError(f"cannot store {name} of dtype {arr.dtype}")
        arr = np.asarray(arr, dtype=_TYPES[code], order="C")
    key = name.encode()
    head = struct.pack("<I", len(key)) + key + code + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}q", *arr.shape)
    return head + arr.tobytes()


def _rng_words(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators can be checkpointed")
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array([s >> 64, s & mask, inc >> 64, inc & mask,
                     st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def _rng_from_words(words) -> np.random.Generator:
    w = [int(v) for v in words]
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
                "has_uint32": w[4], "uinteger": w[5]}
    return np.random.Generator(bg)


def checkpoint_bytes(state: ModelState) -> bytes:
    space = state.space
    entries = {
        "variant": state.variant,
        "X": state.X,
        "A": state.A,
        "Z": state.Z,
        "R": state.R,
        "ids": state.ids,
        "next_id": np.int64(state.next_id),
        "hyper": state.hyper.as_array(),
        "mean": state.mean,
        "std": state.std,
        "seed": np.int64(state.seed),
        "rng": _rng_words(state.rng),
        "iteration": np.int64(state.iteration),
        "temperature": np.float64(state.temperature),
        "sample_hyper": np.int64(state.sample_hyper),
        "birth_proposal": state.birth_proposal,
        "image_shape": np.array(space.image_shape, dtype=np.int64),
        "canvas_shape": np.array(space.canvas_shape, dtype=np.int64),
        "rotations": np.array(space.rotations, dtype=float),
        "scales": np.array(space.scales, dtype=float),
        "translate": np.int64(space.translate),
    }
    if state.masked:
        entries.update(S=state.S, order=state.order, pi=state.pi)
    body = b"".join(_entry(k, v) for k, v in entries.items())
    return (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(entries))
            + body + _END)


def save_checkpoint(state: ModelState, path):
    """Write the complete chain state, including the RNG position."""
    atomic_write(path, checkpoint_bytes(state))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_entries(data: bytes) -> dict:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode()
        except UnicodeDecodeError as e:
            raise CheckpointError("corrupt entry name") from e
        code = r.take(1)
        if code not in _TYPES:
            raise CheckpointError(f"unknown entry type {code!r} for {name}")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}q")
        if any(d < 0 for d in shape):
            raise CheckpointError(f"negative dimension in {name}")
        dtype = _TYPES[code]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        out[name] = raw.decode() if code == b"s" else arr.astype(dtype.newbyteorder("="))
    if r.take(len(_END)) != _END or r.pos != len(data):
        raise CheckpointError("checkpoint has trailing or missing data")
    return out


def load_checkpoint(path) -> ModelState:
    """Inverse of :func:`save_checkpoint`; malformed files raise :class:`CheckpointError`."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    e = read_checkpoint_entries(data)
    try:
        space = TransformationSpace(tuple(e["image_shape"]), tuple(e["canvas_shape"]),
                                    e["rotations"].tolist(), e["scales"].tolist(),
                                    translate=bool(e["translate"]))
        state = ModelState(
            variant=e["variant"], X=e["X"], space=space, A=e["A"], Z=e["Z"], R=e["R"],
            hyper=Hyperparameters.from_array(e["hyper"]), rng=_rng_from_words(e["rng"]),
            S=e.get("S"), order=e.get("order"), pi=e.get("pi"), ids=e["ids"],
            next_id=int(e["next_id"]), mean=e["mean"], std=e["std"], seed=int(e["seed"]),
            iteration=int(e["iteration"]), temperature=float(e["temperature"]),
            sample_hyper=bool(e["sample_hyper"]), birth_proposal=e["birth_proposal"],
        )
        return state.validate()
    except KeyError as err:
        raise CheckpointError(f"checkpoint lacks entry {err}") from err
    except (ValueError, TypeError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"inconsistent checkpoint: {err}") from err


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def parse_config(text: str) -> RunConfig:
    """``key = value`` lines (``#`` comments) naming :class:`RunConfig` fields."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kind = str(kinds[key])
        try:
            if kind.startswith("tuple"):
                values[key] = _parse_list(value)
            elif kind == "bool":
                values[key] = _parse_bool(value)
            elif kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad value for {key}: {e}") from e
    return RunConfig(**values)


def read_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    try:
        return parse_config(text)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def format_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_config(config: RunConfig, path):
    atomic_write(path, format_config(config).encode())


# --------------------------------------------------------------------------
# ground-truth manifests
# --------------------------------------------------------------------------

def write_manifest(truth: GroundTruth, path, files=None, raw_mean=None, raw_std=None):
    """JSON record of everything used to draw a synthetic dataset."""
    doc = {
        "format": "tibp-truth",
        "version": 1,
        "names": list(truth.names),
        "mode": truth.mode,
        "noise": truth.noise,
        "image_shape": list(truth.image_shape),
        "rotations_deg": list(truth.rotations),
        "scales": list(truth.scales),
        "features": truth.features.tolist(),
        "stencils": truth.stencils.tolist(),
        "Z": truth.Z.tolist(),
        "transforms": truth.transforms.tolist(),
        "order": truth.order.tolist(),
        "files": list(files) if files is not None else None,
        "meta": truth.meta,
    }
    atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode())


def read_manifest(path) -> GroundTruth:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if doc.get("format") != "tibp-truth":
        raise DataError(f"{path} is not a truth manifest")
    try:
        meta = dict(doc.get("meta") or {})
        if doc.get("files") is not None:
            meta["files"] = doc["files"]
        return GroundTruth(
            features=np.array(doc["features"], dtype=float),
            stencils=np.array(doc["stencils"], dtype=float),
            names=list(doc["names"]),
            Z=np.array(doc["Z"], dtype=np.int64),
            transforms=np.array(doc["transforms"], dtype=np.int64),
            order=np.array(doc["order"], dtype=np.int64),
            mode=doc["mode"],
            noise=float(doc["noise"]),
            rotations=tuple(doc["rotations_deg"]),
            scales=tuple(doc["scales"]),
            image_shape=tuple(doc["image_shape"]),
            meta=meta,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from e


def is_finite_number(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v)
