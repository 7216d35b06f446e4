"""Image I/O, luminance conversion, central cropping, normalization, JPEG recompression.

All pixel data is carried as 2-D float64 luminance in [0, 255]. Color inputs are
reduced with ITU-R BT.601 weights. JPEG encode/decode is delegated to Pillow behind
`recompress_jpeg` / `save_jpeg`; PGM (binary P5) has a self-contained reader/writer
so synthetic datasets round-trip without a codec in the loop.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PilImage
from PIL import UnidentifiedImageError

from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    IoError,
)

# ITU-R BT.601 luma weights (R, G, B)
BT601_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class Image:
    """Single-channel raster with provenance metadata.

    samples: 2-D float64, luminance in [0, 255], read-only after construction.
    compression_history: ordered (codec, quality) entries, append-only by convention.
    """

    samples: np.ndarray
    device_id: str | None = None
    compression_history: tuple[tuple[str, int | None], ...] = ()

    def __post_init__(self) -> None:
        a = np.array(self.samples, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionError(f"image samples must be non-empty 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise FormatError("image samples contain non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "samples", a)
        object.__setattr__(self, "compression_history", tuple(self.compression_history))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class CropSpec:
    """Side length of a central crop; must be even and at least 8."""

    P: int

    def __post_init__(self) -> None:
        if self.P < 8 or self.P % 2 != 0:
            raise ConfigError(f"crop size must be even and >= 8, got {self.P}")


def crop_center(a: np.ndarray, size: int) -> np.ndarray:
    """Central size x size window; top-left at (floor((H-size)/2), floor((W-size)/2))."""
    h, w = a.shape
    if size > h or size > w:
        raise DimensionError(f"crop size {size} exceeds array dims {h}x{w}")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return a[r0 : r0 + size, c0 : c0 + size]


def central_crop(img: Image, spec: CropSpec) -> Image:
    """Central P x P region of an image; metadata preserved."""
    return Image(crop_center(img.samples, spec.P), img.device_id, img.compression_history)


def normalize_by_std(m: np.ndarray) -> np.ndarray:
    """Divide by the population standard deviation (mean is not subtracted)."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise DimensionError("cannot normalize an empty array")
    sd = float(m.std())
    if sd < 1e-12:
        raise DegenerateInputError("array is constant; standard deviation too small to normalize")
    return m / sd


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval <= 255)
# ---------------------------------------------------------------------------

def _parse_pgm(data: bytes, origin: str) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError(f"{origin}: not a binary PGM (P5) file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise IoError(f"{origin}: truncated PGM header")
        c = data[pos : pos + 1]
        if c in b" \t\r\n":
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise IoError(f"{origin}: truncated PGM comment")
            pos = nl + 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise FormatError(f"{origin}: malformed PGM header")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{origin}: invalid PGM dimensions {width}x{height}")
    if not (0 < maxval <= 255):
        raise FormatError(f"{origin}: unsupported PGM maxval {maxval} (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) < width * height:
        raise IoError(f"{origin}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).astype(np.float64).reshape(height, width)


def _to_u8(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(samples), 0, 255).astype(np.uint8)


def save_pgm(img: Image, path: str | os.PathLike) -> None:
    """Write binary P5 with maxval 255; samples are rounded and clipped to [0, 255]."""
    u8 = _to_u8(img.samples)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(u8.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def save_jpeg(img: Image, path: str | os.PathLike, quality: int = 95) -> None:
    if not 1 <= int(quality) <= 100:
        raise ConfigError(f"JPEG quality must be in 1..100, got {quality}")
    try:
        PilImage.fromarray(_to_u8(img.samples), mode="L").save(path, format="JPEG", quality=int(quality))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _pil_luminance(im: PilImage.Image, origin: str) -> np.ndarray:
    if im.mode == "L":
        return np.asarray(im, dtype=np.float64)
    if im.mode in ("LA", "P", "RGB", "RGBA"):
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        r, g, b = BT601_WEIGHTS
        return rgb[..., 0] * r + rgb[..., 1] * g + rgb[..., 2] * b
    raise FormatError(f"{origin}: unsupported pixel mode {im.mode} (8-bit gray or RGB only)")


def load_image(path: str | os.PathLike) -> Image:
    """Load a PGM (binary P5), PNG, or JPEG file as a luminance image.

    compression_history records the source codec; decode quality is unknown, so
    the quality slot is None.
    """
    p = str(path)
    try:
        with open(p, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {p}: {e}") from e

    if data[:2] == b"P5":
        return Image(_parse_pgm(data, p), compression_history=(("pgm", None),))
    if data[:2] in (b"P1", b"P2", b"P3", b"P4", b"P6"):
        raise FormatError(f"{p}: unsupported netpbm variant (only binary P5 is read)")

    try:
        with PilImage.open(io.BytesIO(data)) as im:
            fmt = (im.format or "").lower()
            if fmt not in ("png", "jpeg"):
                raise FormatError(f"{p}: unsupported format {fmt or 'unknown'}")
            im.load()
            samples = _pil_luminance(im, p)
    except UnidentifiedImageError as e:
        raise FormatError(f"{p}: not a recognized raster format") from e
    except OSError as e:
        raise IoError(f"{p}: unreadable or truncated: {e}") from e
    return Image(samples, compression_history=((fmt, None),))


def recompress_jpeg(img: Image, quality: int) -> Image:
    """Round-trip the image through a JPEG codec at the given quality.

    Dimensions are preserved; one ("jpeg", quality) entry is appended to the
    compression history.
    """
    if not isinstance(quality, (int, np.integer)) or not 1 <= int(quality) <= 100:
        raise ConfigError(f"JPEG quality must be an integer in 1..100, got {quality!r}")
    buf = io.BytesIO()
    PilImage.fromarray(_to_u8(img.samples), mode="L").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with PilImage.open(buf) as im:
        samples = np.asarray(im.convert("L"), dtype=np.float64)
    return Image(
        samples,
        img.device_id,
        img.compression_history + (("jpeg", int(quality)),),
    )
