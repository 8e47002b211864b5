"""Image decode/encode, resizing, normalization and mask-driven lesion cropping.

Images are plain numpy arrays: RGB images are ``uint8`` of shape (H, W, 3),
masks are ``bool`` of shape (H, W), normalized images are ``float32`` in the
same layout as their input.
"""
from __future__ import annotations

import io
import math

import numpy as np
from PIL import Image
from scipy import ndimage

INPUT_SIZE = 150

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def _decode_ppm(data: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("PPM: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace before raster
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("PPM: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"PPM: unsupported bit depth (maxval {maxval})")
    raster = data[pos:pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise ImageFormatError("PPM: truncated pixel data")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def _png_header(data: bytes) -> tuple[int, int]:
    # IHDR is always the first chunk: bit depth at byte 24, colour type at 25
    if len(data) < 26 or data[12:16] != b"IHDR":
        raise ImageFormatError("PNG: missing IHDR")
    return data[24], data[25]


def decode_image(data: bytes) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM (P6) into an (H, W, 3) uint8 array.

    Grayscale and palette PNGs are expanded to RGB; alpha is dropped.
    """
    if data[:2] == b"P6":
        return _decode_ppm(data)
    if data[:8] != _PNG_SIGNATURE:
        raise ImageFormatError("unsupported image format (expected PNG or binary PPM)")
    depth, colour = _png_header(data)
    if depth != 8 and not (colour == 3 and depth in (1, 2, 4)):
        raise ImageFormatError(f"PNG: unsupported bit depth {depth}")
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def decode_gray(data: bytes) -> np.ndarray:
    """Decode an image to a single (H, W) uint8 plane (first channel of RGB)."""
    rgb = decode_image(data)
    return rgb[..., 0].copy()


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # uint8 (H, W) maps to mode L, (H, W, 3) to RGB; fixed settings keep output byte-stable
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(
        buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def encode_mask_png(mask: np.ndarray) -> bytes:
    return encode_png(np.where(mask, 255, 0).astype(np.uint8))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return binarize_mask(decode_gray(fh.read()))


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize, rounded to the nearest 8-bit value."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {(out_h, out_w)}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    src = img.astype(np.float64)
    if src.ndim == 2:
        src = src[..., None]
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.reshape((out_h, out_w) + img.shape[2:])


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return arr[rows][:, cols]


def normalize(img: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std rescaling with statistics over all pixels and channels."""
    x = np.asarray(img, dtype=np.float64)
    std = x.std()
    out = (x - x.mean()) / max(std, 1e-6)
    return out.astype(np.float32)


def to_input(img: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Resize, normalize and move channels first: (H, W, 3) uint8 -> (3, size, size)."""
    return normalize(resize_bilinear(img, size, size)).transpose(2, 0, 1).copy()


def binarize_mask(gray: np.ndarray, threshold: int = 128) -> np.ndarray:
    return np.asarray(gray) >= threshold


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected foreground component.

    Ties go to the component whose first pixel comes earliest in row-major
    order (which is also label order for a raster-scan labelling).
    """
    labels, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def mask_bbox(mask: np.ndarray):
    """Inclusive (r0, c0, r1, c1) of the foreground, or None when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def crop_box(mask: np.ndarray, pad_frac: float = 0.1):
    """Padded, clipped bounding box of the largest component as (r0, c0, r1, c1) inclusive."""
    box = mask_bbox(largest_component(mask))
    if box is None:
        return None
    r0, c0, r1, c1 = box
    h, w = mask.shape
    pad_r = math.floor(pad_frac * (r1 - r0 + 1))
    pad_c = math.floor(pad_frac * (c1 - c0 + 1))
    return (max(r0 - pad_r, 0), max(c0 - pad_c, 0),
            min(r1 + pad_r, h - 1), min(c1 + pad_c, w - 1))


def crop_from_mask(img: np.ndarray, mask: np.ndarray, pad_frac: float = 0.1,
                   size: int = INPUT_SIZE) -> np.ndarray:
    """Lesion crop resized to ``size`` square; an empty mask yields the whole image."""
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.shape} dims differ")
    box = crop_box(mask, pad_frac)
    if box is not None:
        r0, c0, r1, c1 = box
        img = img[r0:r1 + 1, c0:c1 + 1]
    return resize_bilinear(img, size, size)

