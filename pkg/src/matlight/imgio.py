"""HDR image file I/O.

PFM is the working format for every HDR buffer (textures, environment
maps, render outputs) because a float32 round trip is bit-exact.
Radiance RGBE (.hdr) files are accepted read-only for environment maps.
PNG previews are tone-mapped 8-bit sRGB and exist only for eyeballing.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

__all__ = [
    "read_pfm",
    "write_pfm",
    "read_hdr",
    "write_png_preview",
]


class ImageIOError(ValueError):
    pass


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into an (H, W, 3) or (H, W, 1) float32 array.

    Header: 'PF' (color) or 'Pf' (grayscale), width/height line, scale
    line. Negative scale means little endian. Pixel rows are stored
    bottom-to-top; the returned array is top-to-bottom.
    """
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if m is None:
        raise ImageIOError(f"not a PFM file: {path}")
    kind, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    offset = m.end()
    count = w * h * channels
    raw = data[offset : offset + count * 4]
    if len(raw) != count * 4:
        raise ImageIOError(f"truncated PFM payload: {path}")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)
    img = np.ascontiguousarray(img[::-1].astype(np.float32))
    return img


def write_pfm(image: np.ndarray, path) -> None:
    """Write an (H, W, 1|3) float array as little-endian PFM.

    NaN and negative values are rejected: every buffer stored as PFM
    holds nonnegative radiance-like data (signed data such as raw
    normals must be range-mapped by the caller first).
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageIOError(f"PFM supports 1 or 3 channels, got shape {img.shape}")
    if np.isnan(img).any():
        raise ImageIOError("refusing to write NaN pixels to PFM")
    if (img < 0).any():
        raise ImageIOError("refusing to write negative pixels to PFM (radiance is nonnegative)")
    h, w, c = img.shape
    kind = b"PF" if c == 3 else b"Pf"
    header = kind + b"\n" + f"{w} {h}".encode() + b"\n-1.0\n"
    payload = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(header + payload)


def _decode_rgbe(rgbe: np.ndarray) -> np.ndarray:
    rgbe = rgbe.astype(np.float32)
    exp = rgbe[..., 3]
    scale = np.where(exp > 0, np.ldexp(1.0, (exp - 136.0).astype(np.int32)), 0.0)
    return rgbe[..., :3] * scale[..., None]


def read_hdr(path) -> np.ndarray:
    """Read a Radiance RGBE (.hdr) file into an (H, W, 3) float32 array.

    Supports flat scanlines and the new-style RLE encoding. Only the
    standard -Y H +X W row order is accepted.
    """
    data = Path(path).read_bytes()
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise ImageIOError(f"not a Radiance HDR file: {path}")
    # header ends at the first blank line, the resolution line follows
    end = data.find(b"\n\n")
    if end < 0:
        raise ImageIOError(f"malformed HDR header: {path}")
    res_end = data.find(b"\n", end + 2)
    res = data[end + 2 : res_end].split()
    if len(res) != 4 or res[0] != b"-Y" or res[2] != b"+X":
        raise ImageIOError(f"unsupported HDR resolution line: {res}")
    h, w = int(res[1]), int(res[3])
    buf = np.frombuffer(data[res_end + 1 :], dtype=np.uint8)
    rows = np.empty((h, w, 4), dtype=np.uint8)
    pos = 0
    for y in range(h):
        if pos + 4 > len(buf):
            raise ImageIOError("truncated HDR payload")
        head = buf[pos : pos + 4]
        if head[0] == 2 and head[1] == 2 and (int(head[2]) << 8 | int(head[3])) == w:
            # new-style RLE: four component planes per scanline
            pos += 4
            for c in range(4):
                x = 0
                while x < w:
                    n = int(buf[pos])
                    pos += 1
                    if n > 128:  # run
                        rows[y, x : x + n - 128, c] = buf[pos]
                        pos += 1
                        x += n - 128
                    else:  # literal
                        rows[y, x : x + n, c] = buf[pos : pos + n]
                        pos += n
                        x += n
        else:
            rows[y] = buf[pos : pos + 4 * w].reshape(w, 4)
            pos += 4 * w
    return _decode_rgbe(rows)


def tonemap_srgb(img: np.ndarray) -> np.ndarray:
    """Clamp linear radiance to [0, 1] and apply the sRGB transfer curve."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    lo = x * 12.92
    hi = 1.055 * np.power(np.maximum(x, 1e-12), 1.0 / 2.4) - 0.055
    return np.where(x <= 0.0031308, lo, hi)


def write_png_preview(image: np.ndarray, path) -> None:
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    u8 = (tonemap_srgb(img) * 255.0 + 0.5).astype(np.uint8)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="RGB").save(p)
