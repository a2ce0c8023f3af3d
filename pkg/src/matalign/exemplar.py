"""Exemplar photo ingestion: foreground masking, square standardization, dedup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hogindex import HogConfig, hog, l2_normalized
from .imageops import largest_components, resize_bilinear
from .raster import square_crop_box, square_crop_to_mask

DEFAULT_WHITE_THRESHOLD = 247
DEFAULT_SIZE = 1000
SPECK_FRACTION = 0.001


class NoForegroundError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Exemplar:
    id: str
    image: np.ndarray
    mask: np.ndarray
    source_uri: str = ""
    crop_box: tuple[int, int, int] | None = None
    source_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("image and mask dimensions differ")
        if not self.mask.any():
            raise NoForegroundError(f"exemplar {self.id!r} has an empty mask")


def foreground_mask(image: np.ndarray, white_threshold: int = DEFAULT_WHITE_THRESHOLD) -> np.ndarray:
    """Pixels whose darkest channel is below ``white_threshold``, minus small specks."""
    image = np.asarray(image)
    rgb = image if image.ndim == 3 else image[..., None]
    mask = rgb[..., :3].min(axis=2) < white_threshold
    if not mask.any():
        raise NoForegroundError("no foreground")
    return largest_components(mask, SPECK_FRACTION)


def standardize(image: np.ndarray, mask: np.ndarray, out_size: int = DEFAULT_SIZE,
                exemplar_id: str = "", source_uri: str = "") -> Exemplar:
    """Tight square crop around the mask, resized to ``out_size`` square."""
    box = square_crop_box(mask)
    img = square_crop_to_mask(np.asarray(image, dtype=np.uint8), mask, out_size, box=box)
    msk = square_crop_to_mask(np.asarray(mask, dtype=bool), mask, out_size, box=box)
    return Exemplar(exemplar_id, img, msk, source_uri, box, tuple(np.asarray(mask).shape))


def dedup_descriptor(image: np.ndarray, config: HogConfig = HogConfig()) -> np.ndarray:
    """Unit-length HOG of a 256 x 256 downscale, used for duplicate detection."""
    small = resize_bilinear(np.asarray(image), 256, 256)
    return l2_normalized(hog(small, config).values)


def dedup(exemplars, distance_threshold: float = 0.1, descriptors=None):
    """Greedy first-wins duplicate removal.

    Walks ``exemplars`` in order and drops any whose descriptor lies within
    ``distance_threshold`` (strictly) of an already kept one. Returns
    ``(kept, removed)`` where ``removed`` holds ``(removed_id, kept_id, distance)``.
    """
    exemplars = list(exemplars)
    if descriptors is None:
        descriptors = [dedup_descriptor(e.image) for e in exemplars]
    kept, kept_desc, removed = [], [], []
    for ex, desc in zip(exemplars, descriptors):
        if kept_desc:
            d = np.sqrt(((np.asarray(kept_desc) - desc) ** 2).sum(axis=1))
            j = int(np.argmin(d))
            if d[j] < distance_threshold:
                removed.append((ex.id, kept[j].id, float(d[j])))
                continue
        kept.append(ex)
        kept_desc.append(desc)
    return kept, removed
