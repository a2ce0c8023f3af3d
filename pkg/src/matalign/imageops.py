"""Small image utilities shared by the pipeline stages.

All resampling uses the pixel-center convention: output pixel ``i`` samples
the source at ``(i + 0.5) * src / dst - 0.5``.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma of an RGB image (or passthrough for 2-D input) as float64."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ LUMA


def _source_coords(dst: int, src: int) -> np.ndarray:
    return (np.arange(dst) + 0.5) * (src / dst) - 0.5


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize. uint8 input is rounded back to uint8."""
    src = np.asarray(image)
    if src.shape[:2] == (height, width):
        return src.copy()
    ys = np.clip(_source_coords(height, src.shape[0]), 0, src.shape[0] - 1)
    xs = np.clip(_source_coords(width, src.shape[1]), 0, src.shape[1] - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, src.shape[0] - 1)
    x1 = np.minimum(x0 + 1, src.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if src.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    r0 = src[y0].astype(np.float64)
    r1 = src[y1].astype(np.float64)
    top = r0[:, x0] * (1 - wx) + r0[:, x1] * wx
    bot = r1[:, x0] * (1 - wx) + r1[:, x1] * wx
    out = top * (1 - wy) + bot * wy
    if src.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out


def resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize; never creates values absent from the input."""
    src = np.asarray(image)
    rows = np.minimum(((np.arange(height) + 0.5) * src.shape[0] / height).astype(int), src.shape[0] - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * src.shape[1] / width).astype(int), src.shape[1] - 1)
    return src[rows][:, cols]


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(image, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    sig = (sigma, sigma) + (0,) * (image.ndim - 2)
    return ndimage.gaussian_filter(image, sig, mode="nearest")


def largest_components(mask: np.ndarray, min_fraction: float) -> np.ndarray:
    """Keep the largest 8-connected component plus any at least ``min_fraction`` of the image."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    keep = sizes >= min_fraction * mask.size
    keep[int(np.argmax(sizes))] = True
    return np.isin(labels, np.flatnonzero(keep) + 1)


# --- file formats -----------------------------------------------------------

def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write uint8 gray/RGB, bool masks, or uint16 label maps as PNG."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        img = Image.fromarray(arr.astype(np.uint8) * 255)
    elif arr.dtype == np.uint16 or (arr.ndim == 2 and arr.dtype.kind in "iu" and arr.dtype != np.uint8):
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
            raise ValueError("label values out of 16-bit range")
        img = Image.fromarray(arr.astype("<u2"))
    elif arr.dtype == np.uint8:
        img = Image.fromarray(np.ascontiguousarray(arr))
    else:
        raise TypeError(f"unsupported dtype for PNG: {arr.dtype}")
    Path(path).write_bytes(_png_bytes(img))


def read_image(path: str | Path) -> np.ndarray:
    """Read PNG/JPEG as uint8 RGB (alpha composited onto white)."""
    with Image.open(path) as img:
        if img.mode in ("RGBA", "LA", "P"):
            img = img.convert("RGBA")
            bg = Image.new("RGBA", img.size, (255, 255, 255, 255))
            img = Image.alpha_composite(bg, img)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_png_raw(path: str | Path) -> np.ndarray:
    """Read a PNG keeping its native bit depth (16-bit label maps, masks)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype == np.int32:
        arr = arr.astype(np.uint16)
    return arr


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a single-channel float map as little-endian PFM (bottom-up rows)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer supports single-channel maps only")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.flipud(data).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError("not a PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * chans)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)
