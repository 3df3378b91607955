"""Image and volume containers, patch sampling and augmentation.

Supported containers:

* ``.pgm`` / ``.ppm`` binary netpbm, 8 or 16 bit
* ``.png`` 8-bit gray/RGB and 16-bit gray (via Pillow)
* ``.vol`` text manifest (``key=value`` lines) next to a little-endian
  float32 ``.raw`` blob, any rank, optional voxel spacing

Values are held as ``[C, *spatial]`` float64 arrays in [0, 1] for integer
sources (``v / (2**depth - 1)``) and as stored for float volumes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageData:
    values: np.ndarray  # [C, *spatial]
    bit_depth: int | None = 8  # None for float volumes
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim < 2:
            raise ValueError("ImageData values must be [C, *spatial]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ImageData values must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial(self) -> tuple[int, ...]:
        return self.values.shape[1:]


def normalize(raw: np.ndarray, depth: int) -> np.ndarray:
    return raw.astype(np.float64) / (2**depth - 1)


def denormalize(values: np.ndarray, depth: int) -> np.ndarray:
    top = 2**depth - 1
    dtype = np.uint8 if depth <= 8 else np.uint16
    return np.round(np.clip(values, 0.0, 1.0) * top).astype(dtype)


# ------------------------------------------------------------------ netpbm


def _read_netpbm(path: Path) -> ImageData:
    blob = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise ImageFormatError(f"{path}: truncated header")
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported netpbm type {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: inconsistent header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: inconsistent header")
    channels = 1 if magic == b"P5" else 3
    depth = 8 if maxval < 256 else 16
    dtype = np.dtype(np.uint8) if depth == 8 else np.dtype(">u2")
    count = width * height * channels
    raster = blob[pos : pos + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    if maxval not in (255, 65535):
        return ImageData(np.moveaxis(arr, -1, 0).astype(np.float64) / maxval, depth)
    return ImageData(normalize(np.moveaxis(arr, -1, 0), depth), depth)


def _write_netpbm(path: Path, img: ImageData):
    depth = img.bit_depth or 8
    c = img.channels
    if img.values.ndim != 3 or c not in (1, 3):
        raise ImageFormatError("netpbm holds 2-d gray or RGB images only")
    if (c == 1) != (path.suffix.lower() == ".pgm"):
        raise ImageFormatError(f"{path.suffix} cannot hold {c} channel(s)")
    raw = np.moveaxis(denormalize(img.values, depth), 0, -1)
    if depth > 8:
        raw = raw.astype(">u2")
    h, w = raw.shape[:2]
    header = f"P{5 if c == 1 else 6}\n{w} {h}\n{2**depth - 1}\n".encode()
    path.write_bytes(header + raw.tobytes())


# --------------------------------------------------------------------- png


def _read_png(path: Path) -> ImageData:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        depth = 16
        arr = arr.astype(np.uint16)
    elif mode in ("L", "RGB"):
        depth = 8
    elif mode in ("RGBA", "P", "LA", "1"):
        with Image.open(path) as im:
            arr = np.array(im.convert("RGB" if mode in ("RGBA", "P") else "L"))
        depth = 8
    else:
        raise ImageFormatError(f"{path}: unsupported PNG mode {mode}")
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return ImageData(normalize(arr, depth), depth)


def _write_png(path: Path, img: ImageData):
    depth = img.bit_depth or 8
    if img.values.ndim != 3:
        raise ImageFormatError("PNG holds 2-d images only")
    raw = denormalize(img.values, depth)
    if img.channels == 1:
        im = Image.fromarray(raw[0] if depth == 8 else raw[0].astype(np.uint16))
    elif img.channels == 3 and depth == 8:
        im = Image.fromarray(np.moveaxis(raw, 0, -1))
    else:
        raise ImageFormatError("PNG writer supports 8/16-bit gray and 8-bit RGB")
    im.save(path)


# ----------------------------------------------------------- raw + manifest


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ImageFormatError(f"{path}: malformed manifest line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_volume(path: Path) -> ImageData:
    meta = read_manifest(path)
    try:
        dims = tuple(int(d) for d in meta["dims"].split(","))
        channels = int(meta.get("channels", "1"))
        dtype = meta.get("dtype", "float32")
        data_file = path.parent / meta.get("data_file", path.with_suffix(".raw").name)
    except (KeyError, ValueError) as exc:
        raise ImageFormatError(f"{path}: inconsistent manifest") from exc
    if dtype != "float32":
        raise ImageFormatError(f"{path}: unsupported dtype {dtype}")
    blob = data_file.read_bytes()
    count = channels * int(np.prod(dims))
    if len(blob) != 4 * count:
        raise ImageFormatError(f"{data_file}: expected {4 * count} bytes, found {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f4").reshape((channels,) + dims)
    spacing = tuple(float(s) for s in meta["spacing"].split(",")) if "spacing" in meta else None
    depth = int(meta["bit_depth"]) if meta.get("bit_depth", "none") != "none" else None
    return ImageData(arr.astype(np.float64), depth, spacing)


def _write_volume(path: Path, img: ImageData):
    data_file = path.with_suffix(".raw")
    data_file.write_bytes(np.ascontiguousarray(img.values, dtype="<f4").tobytes())
    lines = [
        "format=adl-volume",
        "version=1",
        "dtype=float32",
        f"channels={img.channels}",
        "dims=" + ",".join(str(d) for d in img.spatial),
        f"bit_depth={img.bit_depth if img.bit_depth else 'none'}",
        f"data_file={data_file.name}",
    ]
    if img.spacing is not None:
        lines.append("spacing=" + ",".join(repr(float(s)) for s in img.spacing))
    path.write_text("\n".join(lines) + "\n")


_READERS = {".pgm": _read_netpbm, ".ppm": _read_netpbm, ".png": _read_png, ".vol": _read_volume}
_WRITERS = {".pgm": _write_netpbm, ".ppm": _write_netpbm, ".png": _write_png, ".vol": _write_volume}
SUPPORTED_SUFFIXES = tuple(_READERS)


def load_image(path) -> ImageData:
    path = Path(path)
    reader = _READERS.get(path.suffix.lower())
    if reader is None:
        raise ImageFormatError(f"{path}: unsupported container {path.suffix!r}")
    if not path.exists():
        raise FileNotFoundError(path)
    return reader(path)


def save_image(path, img: ImageData):
    path = Path(path)
    writer = _WRITERS.get(path.suffix.lower())
    if writer is None:
        raise ImageFormatError(f"{path}: unsupported container {path.suffix!r}")
    writer(path, img)


def to_gray(img: ImageData) -> ImageData:
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise ValueError(f"cannot convert {img.channels} channels to gray")
    w = np.array([0.299, 0.587, 0.114]).reshape((3,) + (1,) * len(img.spatial))
    return ImageData((img.values * w).sum(axis=0, keepdims=True), img.bit_depth, img.spacing)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)


def default_data_dir() -> str | None:
    return os.environ.get("ADL_DATA_DIR")


# ---------------------------------------------------------- augmentation


def augment(patch: np.ndarray, op: str) -> np.ndarray:
    """Exact dihedral transform of the first two spatial axes of ``[C, *S]``.

    Rotations are counterclockwise; ``flip_h`` mirrors left-right and
    ``flip_v`` top-bottom.
    """
    if op not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {op!r}")
    if patch.ndim < 3:
        raise ValueError("augment expects [C, *spatial] with at least two spatial axes")
    if op in ("rot90", "rot270") and patch.shape[1] != patch.shape[2]:
        raise ValueError(f"rotation by 90 degrees needs square spatial dims, got {patch.shape[1:3]}")
    if op == "identity":
        out = patch
    elif op == "rot90":
        out = np.rot90(patch, 1, axes=(1, 2))
    elif op == "rot180":
        out = np.rot90(patch, 2, axes=(1, 2))
    elif op == "rot270":
        out = np.rot90(patch, 3, axes=(1, 2))
    elif op == "flip_h":
        out = patch[:, :, ::-1]
    else:
        out = patch[:, ::-1]
    return np.ascontiguousarray(out)


# --------------------------------------------------------------- patches


@dataclass
class PatchSet:
    patches: np.ndarray  # [count, C, *size]
    offsets: list[tuple[int, ...]] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    augmentations: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)

    def __post_init__(self):
        if len({p.shape for p in self.patches}) > 1:
            raise ValueError("patches must share one shape")


def extract_patches(image, size, count: int, seed=0, source_id: str = "") -> PatchSet:
    """Copy ``count`` patches at seeded uniform offsets from ``[C, *S]``."""
    values = image.values if isinstance(image, ImageData) else np.asarray(image)
    spatial = values.shape[1:]
    size = (size,) * len(spatial) if np.isscalar(size) else tuple(size)
    if len(size) != len(spatial):
        raise ValueError(f"patch rank {len(size)} does not match image rank {len(spatial)}")
    if any(p > s for p, s in zip(size, spatial)):
        raise ValueError(f"patch {size} larger than image {spatial}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    offsets = []
    patches = np.empty((count, values.shape[0]) + size, dtype=values.dtype)
    for i in range(count):
        off = tuple(int(rng.integers(0, s - p + 1)) for s, p in zip(spatial, size))
        offsets.append(off)
        patches[i] = values[(slice(None),) + tuple(slice(o, o + p) for o, p in zip(off, size))]
    return PatchSet(patches, offsets, [source_id] * count, ["identity"] * count)
