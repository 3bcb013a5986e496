"""Raster and raw-dump I/O shared by the CLI and the HTTP service.

Conventions:

* probability maps travel as 16-bit grayscale PNG, pixel = round(u * 65535),
  so a client can rethreshold without re-solving;
* label images and scribble masks are palette PNGs whose *indices* are the
  labels (0 = unlabeled / background class), which sidesteps anti-aliasing
  and color-matching ambiguity;
* raw float dumps for test oracles use a 16-byte header (magic "OTSGPROB",
  u32 width, u32 height, little-endian) followed by row-major float64.

Both interfaces call these exact functions, which is what makes the
"CLI output equals service output byte-for-byte" guarantee checkable.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np
from PIL import Image

from .errors import DomainError

__all__ = [
    "PROB_MAGIC",
    "label_palette",
    "load_image",
    "read_label_png",
    "read_prob16_png",
    "read_raw_prob",
    "sniff_png_size",
    "write_label_png",
    "write_prob16_png",
    "write_raw_prob",
]

PROB_MAGIC = b"OTSGPROB"

# Distinct, saturated colors for label indices 1..20; index 0 stays black.
# Fixed table (not generated) so outputs are byte-stable forever.
_BASE_COLORS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def label_palette() -> list:
    """256-entry RGB palette: 0 black, 1..20 fixed colors, rest graded."""
    table = [(0, 0, 0)] + list(_BASE_COLORS)
    for i in range(len(table), 256):
        # deterministic filler ramp; rarely visible (labels are small ints)
        table.append((i, (i * 37) % 256, (i * 73) % 256))
    return table


def _flat_palette() -> list:
    out = []
    for rgb in label_palette():
        out.extend(rgb)
    return out


def load_image(source) -> np.ndarray:
    """Decode an image file or byte buffer to float64 in [0, 1].

    Returns (h, w, 3) for color inputs (alpha dropped) and (h, w, 1) for
    grayscale. 16-bit inputs are scaled by 1/65535, 8-bit by 1/255.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    with Image.open(source) as img:
        img.load()
        if img.mode in ("RGBA", "LA", "PA"):
            img = img.convert("RGB")
        if img.mode == "P":
            img = img.convert("RGB")
        if img.mode == "RGB":
            arr = np.asarray(img, dtype=np.float64) / 255.0
            return arr
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float64) / 255.0
            return arr[:, :, None]
        if img.mode in ("I", "I;16"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
            return arr[:, :, None]
        if img.mode == "F":
            return np.asarray(img, dtype=np.float64)[:, :, None]
        img = img.convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0


def sniff_png_size(data: bytes):
    """Parse width/height from a PNG IHDR without decoding the image.

    Returns (width, height) if the buffer starts with a syntactically valid
    PNG signature + IHDR chunk, else None. Lets a server distinguish
    "not a PNG at all" from "a PNG declaring degenerate dimensions".
    """
    sig = b"\x89PNG\r\n\x1a\n"
    if len(data) < 33 or not data.startswith(sig):
        return None
    length, ctype = struct.unpack(">I4s", data[8:16])
    if ctype != b"IHDR" or length != 13:
        return None
    width, height = struct.unpack(">II", data[16:24])
    crc = struct.unpack(">I", data[29:33])[0]
    if crc != zlib.crc32(data[12:29]):
        return None
    return int(width), int(height)


def write_prob16_png(target, u: np.ndarray) -> None:
    """Write one probability map as 16-bit grayscale PNG (round(u*65535))."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise DomainError(f"probability map must be 2-d, got shape {u.shape}")
    q = np.rint(np.clip(u, 0.0, 1.0) * 65535.0).astype(np.uint16)
    img = Image.fromarray(q)  # uint16 maps to mode I;16
    img.save(target, format="PNG")


def read_prob16_png(source) -> np.ndarray:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    with Image.open(source) as img:
        img.load()
        if img.mode not in ("I", "I;16"):
            raise DomainError(
                f"expected a 16-bit grayscale PNG, got mode {img.mode!r}")
        arr = np.asarray(img, dtype=np.float64)
    return arr / 65535.0


def write_label_png(target, labels: np.ndarray) -> None:
    """Write integer labels as an indexed (palette) PNG."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DomainError(f"label image must be 2-d, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise DomainError("label indices must lie in [0, 255] for palette PNG")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(_flat_palette())
    img.save(target, format="PNG")


def read_label_png(source) -> np.ndarray:
    """Read a palette or grayscale PNG as integer labels (indices)."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    with Image.open(source) as img:
        img.load()
        if img.mode in ("P", "L"):
            return np.asarray(img, dtype=np.int32)
        if img.mode in ("I", "I;16"):
            return np.asarray(img, dtype=np.int32)
        raise DomainError(
            f"label/scribble images must be indexed or grayscale, got mode "
            f"{img.mode!r}; palette indices carry the labels")


def write_raw_prob(target, u: np.ndarray) -> None:
    """Raw float dump: b"OTSGPROB" + u32 width + u32 height + f64 row-major."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise DomainError(f"probability map must be 2-d, got shape {u.shape}")
    h, w = u.shape
    header = PROB_MAGIC + struct.pack("<II", w, h)
    payload = u.astype("<f8").tobytes(order="C")
    if hasattr(target, "write"):
        target.write(header + payload)
    else:
        with open(target, "wb") as fh:
            fh.write(header + payload)


def read_raw_prob(source) -> np.ndarray:
    if hasattr(source, "read"):
        data = source.read()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if len(data) < 16 or data[:8] != PROB_MAGIC:
        raise DomainError("not an OTSGPROB raw probability dump")
    w, h = struct.unpack("<II", data[8:16])
    body = np.frombuffer(data[16:], dtype="<f8")
    if body.size != w * h:
        raise DomainError(
            f"raw dump declares {w}x{h} = {w * h} samples, body has {body.size}")
    return body.reshape(h, w).copy()
