"""Per-pixel substance maps, canonical remapping, classifiers and part-level voting."""

from __future__ import annotations

import json
import logging
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageops import write_png
from .raster import LabelMap

log = logging.getLogger(__name__)

SUBSTANCES: tuple[str, ...] = ("leather", "fabric", "metal", "wood", "plastic")
BACKGROUND_CHANNEL = "background"
CHANNELS: tuple[str, ...] = (BACKGROUND_CHANNEL,) + SUBSTANCES
UNKNOWN = "unknown"

DEFAULT_ALIASES = {
    "carpet": "fabric",
    "textile": "fabric",
    "cloth": "fabric",
    "upholstery": "fabric",
    "steel": "metal",
    "aluminium": "metal",
    "aluminum": "metal",
    "chrome": "metal",
    "polished stone": None,
    "foliage": None,
    "wicker": "wood",
    "bamboo": "wood",
    "suede": "leather",
}


class SubstanceError(RuntimeError):
    def __init__(self, exemplar_id: str, message: str):
        super().__init__(f"substance classifier failed for {exemplar_id!r}: {message}")
        self.exemplar_id = exemplar_id


@dataclass(frozen=True)
class SubstanceSet:
    labels: tuple[str, ...] = SUBSTANCES
    aliases: dict = field(default_factory=lambda: dict(DEFAULT_ALIASES))

    def __post_init__(self):
        for src, dst in self.aliases.items():
            if dst is not None and dst not in self.labels:
                raise ValueError(f"alias {src!r} maps to {dst!r}, which is not a canonical substance")

    def canonical(self, name: str) -> str | None:
        if name in self.labels:
            return name
        return self.aliases.get(name)


@dataclass(frozen=True, eq=False)
class SubstanceMap:
    """(H, W, 1 + |Q|) probabilities; channel 0 is background."""

    probs: np.ndarray
    fallback: np.ndarray | None = None   # pixels whose canonical mass was zero

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != len(CHANNELS):
            raise ValueError(f"substance map must be (H, W, {len(CHANNELS)})")
        if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=2) - 1.0) > 1e-6):
            raise ValueError("substance rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[:2]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=2)

    def foreground_mass(self) -> np.ndarray:
        """Per-pixel distribution over Q only (background dropped, renormalized)."""
        sub = self.probs[..., 1:]
        total = sub.sum(axis=2, keepdims=True)
        uniform = np.full_like(sub, 1.0 / sub.shape[2])
        return np.divide(sub, total, out=uniform, where=total > 0)


def remap_substances(raw: np.ndarray, raw_labels, substance_set: SubstanceSet = SubstanceSet(),
                     background_label: str | None = None):
    """Fold a distribution over arbitrary labels into background + canonical substances.

    Aliased mass moves to its canonical target, everything else outside the
    canonical set is dropped, and rows are renormalized. Rows left with no
    mass become uniform over the substances and are flagged. Returns
    ``(SubstanceMap, flagged_mask)``. ``raw`` is (..., K) with rows summing to 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    raw_labels = list(raw_labels)
    if raw.shape[-1] != len(raw_labels):
        raise ValueError("label count does not match the last axis")
    if np.any(np.abs(raw.sum(axis=-1) - 1.0) > 1e-4):
        raise ValueError("raw rows must sum to 1 within 1e-4")
    squeeze = raw.ndim == 1
    if raw.ndim == 1:
        raw = raw[None, None, :]
    elif raw.ndim == 2:
        raw = raw[None]
    out = np.zeros(raw.shape[:-1] + (len(CHANNELS),))
    for k, name in enumerate(raw_labels):
        if background_label is not None and name == background_label:
            out[..., 0] += raw[..., k]
            continue
        target = substance_set.canonical(name)
        if target is not None:
            out[..., 1 + substance_set.labels.index(target)] += raw[..., k]
    total = out.sum(axis=-1, keepdims=True)
    flagged = total[..., 0] <= 0
    uniform = np.zeros(len(CHANNELS))
    uniform[1:] = 1.0 / len(SUBSTANCES)
    out = np.where(flagged[..., None], uniform, out / np.where(total > 0, total, 1.0))
    smap = SubstanceMap(out, flagged)
    if squeeze:
        return smap, bool(flagged[0, 0])
    return smap, flagged


def substance_distribution(values: dict) -> np.ndarray:
    """Convenience: a dict like {'wood': 0.3, 'sky': 0.7} remapped to a |Q| vector."""
    names = list(values)
    smap, _ = remap_substances(np.array([values[n] for n in names]), names)
    return smap.probs[0, 0, 1:]


@dataclass(frozen=True)
class PartSubstanceLabeling:
    labels: dict            # part id (0-based) -> substance or "unknown"
    counts: dict            # part id -> {substance: pixel count}
    mass: dict              # part id -> {substance: summed probability}
    unknown_parts: tuple

    def to_dict(self) -> dict:
        return {
            "labels": {str(k): v for k, v in sorted(self.labels.items())},
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "unknown_parts": list(self.unknown_parts),
        }


def aggregate_part_substance(parts: LabelMap, substances: SubstanceMap) -> PartSubstanceLabeling:
    """Label each part with the substance that wins the most of its pixels.

    Each pixel votes for its argmax channel; pixels whose argmax is
    background do not vote. Ties go to the larger summed substance
    probability over voting pixels, then to the alphabetically first name.
    Parts without any vote are ``unknown``.
    """
    if parts.labels.shape != substances.shape:
        raise ValueError("part map and substance map dimensions differ")
    top = substances.argmax().ravel()
    votes = top > 0
    n_sub = len(SUBSTANCES)
    part_idx = parts.labels.ravel()[votes]
    counts = np.zeros((parts.n_labels + 1, n_sub), dtype=np.int64)
    np.add.at(counts, (part_idx, top[votes] - 1), 1)
    mass = np.zeros((parts.n_labels + 1, n_sub))
    np.add.at(mass, part_idx, substances.probs[..., 1:].reshape(-1, n_sub)[votes])
    labels, count_d, mass_d, unknown = {}, {}, {}, []
    for part in range(parts.n_labels):
        row = counts[part + 1]
        count_d[part] = {s: int(c) for s, c in zip(SUBSTANCES, row)}
        mass_d[part] = {s: float(m) for s, m in zip(SUBSTANCES, mass[part + 1])}
        if row.sum() == 0:
            labels[part] = UNKNOWN
            unknown.append(part)
            continue
        labels[part] = min(SUBSTANCES, key=lambda s: (-count_d[part][s], -mass_d[part][s], s))
    if unknown:
        log.info("parts with no visible pixels: %s", unknown)
    return PartSubstanceLabeling(labels, count_d, mass_d, tuple(unknown))


# --- classifiers ---------------------------------------------------------------

class SubstanceClassifier:
    """Interface: ``classify(image, mask, exemplar_id) -> SubstanceMap``."""

    id = "abstract"
    reentrant = True

    def classify(self, image: np.ndarray, mask: np.ndarray, exemplar_id: str = "") -> SubstanceMap:
        raise NotImplementedError


class FixtureClassifier(SubstanceClassifier):
    """Reads precomputed maps ``<root>/<exemplar_id>.subst`` written by :func:`save_substance_map`.

    When the ingest step cropped the source image, ``crop_boxes`` maps the
    exemplar id to the ``(top, left, side)`` box so the stored map, defined on
    the original image, is cropped and resampled the same way.
    """

    id = "fixture"

    def __init__(self, root, crop_boxes: dict | None = None):
        self.root = Path(root)
        self.crop_boxes = crop_boxes or {}

    def classify(self, image, mask, exemplar_id=""):
        path = self.root / f"{exemplar_id}.subst"
        try:
            smap = load_substance_map(path)
        except (OSError, ValueError) as exc:
            raise SubstanceError(exemplar_id, str(exc)) from exc
        box = self.crop_boxes.get(exemplar_id)
        if box is not None:
            smap = crop_substance_map(smap, box, np.asarray(mask).shape[0])
        if smap.shape != np.asarray(mask).shape:
            raise SubstanceError(exemplar_id, f"map is {smap.shape}, image is {np.asarray(mask).shape}")
        return smap


def crop_substance_map(smap: SubstanceMap, box, out_size: int) -> SubstanceMap:
    from .raster import apply_crop_box
    from .imageops import resize_nearest

    fill = np.zeros(len(CHANNELS))
    fill[0] = 1.0
    crop = apply_crop_box(smap.probs, tuple(box), fill)
    rows = resize_nearest(np.arange(crop.shape[0] * crop.shape[1]).reshape(crop.shape[:2]), out_size, out_size)
    flat = crop.reshape(-1, crop.shape[2])
    return SubstanceMap(flat[rows])


# Hue windows (degrees) and value/saturation rules for the color heuristic.
_COLOR_RULES = (
    ("wood", lambda h, s, v: (15 <= h) & (h <= 45) & (s >= 0.35) & (v >= 0.25) & (v <= 0.85)),
    ("leather", lambda h, s, v: ((h < 15) | (h > 340)) & (s >= 0.3) & (v < 0.6)),
    ("metal", lambda h, s, v: (s < 0.12) & (v >= 0.55)),
    ("plastic", lambda h, s, v: (s >= 0.5) & (v >= 0.6) & ((h > 45) & (h <= 340))),
)


class ColorPriorClassifier(SubstanceClassifier):
    """Coarse hue/saturation/value heuristic for demos; fabric is the fallback.

    Each pixel gets probability 0.6 on the substance whose rule fires first
    (fabric if none does) and 0.1 on each other substance; pixels outside the
    mask are background.
    """

    id = "color-prior"

    def classify(self, image, mask, exemplar_id=""):
        from matplotlib.colors import rgb_to_hsv

        rgb = np.asarray(image, dtype=np.float64)[..., :3] / 255.0
        hsv = rgb_to_hsv(rgb)
        h, s, v = hsv[..., 0] * 360.0, hsv[..., 1], hsv[..., 2]
        choice = np.full(h.shape, SUBSTANCES.index("fabric"))
        decided = np.zeros(h.shape, dtype=bool)
        for name, rule in _COLOR_RULES:
            hit = rule(h, s, v) & ~decided
            choice[hit] = SUBSTANCES.index(name)
            decided |= hit
        probs = np.zeros(h.shape + (len(CHANNELS),))
        probs[..., 1:] = 0.1
        np.put_along_axis(probs[..., 1:], choice[..., None], 0.6, axis=2)
        mask = np.asarray(mask, dtype=bool)
        probs[~mask] = 0.0
        probs[~mask, 0] = 1.0
        return SubstanceMap(probs)


class SubprocessClassifier(SubstanceClassifier):
    """External plugin: ``<command> <image.png> <mask.png> <out.subst>``, exit code 0 on success."""

    reentrant = False

    def __init__(self, command, timeout: float = 600.0):
        self.command = list(command) if not isinstance(command, str) else command.split()
        self.id = "subprocess:" + os.path.basename(self.command[0])
        self.timeout = timeout

    def classify(self, image, mask, exemplar_id=""):
        with tempfile.TemporaryDirectory() as tmp:
            img_p, mask_p, out_p = (os.path.join(tmp, n) for n in ("image.png", "mask.png", "out.subst"))
            write_png(img_p, np.asarray(image, dtype=np.uint8))
            write_png(mask_p, np.asarray(mask, dtype=bool))
            try:
                proc = subprocess.run(self.command + [img_p, mask_p, out_p], capture_output=True,
                                      timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise SubstanceError(exemplar_id, str(exc)) from exc
            if proc.returncode != 0:
                raise SubstanceError(exemplar_id, f"exit code {proc.returncode}: "
                                     f"{proc.stderr.decode(errors='replace').strip()[:200]}")
            try:
                return load_substance_map(out_p)
            except (OSError, ValueError) as exc:
                raise SubstanceError(exemplar_id, str(exc)) from exc


def classifier_from_spec(spec: str, fixture_root=None, crop_boxes=None) -> SubstanceClassifier:
    """``fixture``, ``color-prior`` or ``cmd:<command line>``."""
    if spec == "fixture":
        if fixture_root is None:
            raise ValueError("fixture classifier needs a map directory")
        return FixtureClassifier(fixture_root, crop_boxes)
    if spec == "color-prior":
        return ColorPriorClassifier()
    if spec.startswith("cmd:"):
        return SubprocessClassifier(spec[4:])
    raise ValueError(f"unknown substance classifier {spec!r}")


# --- file format ------------------------------------------------------------------

def save_substance_map(path, smap: SubstanceMap) -> None:
    """``<path>`` holds little-endian float64 (H, W, C) values; ``<path>.json`` names channels."""
    path = Path(path)
    h, w, c = smap.probs.shape
    path.write_bytes(np.ascontiguousarray(smap.probs, dtype="<f8").tobytes())
    sidecar = {"format": "substance-map", "version": 1, "height": h, "width": w,
               "channels": list(CHANNELS), "dtype": "float64-le"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_substance_map(path) -> SubstanceMap:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("channels") != list(CHANNELS):
        raise ValueError(f"unexpected channels {meta.get('channels')}")
    h, w = int(meta["height"]), int(meta["width"])
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    if data.size != h * w * len(CHANNELS):
        raise ValueError("substance map size does not match its sidecar")
    return SubstanceMap(data.reshape(h, w, len(CHANNELS)).astype(np.float64))


def one_hot_substance_map(labels: np.ndarray) -> SubstanceMap:
    """From an int map where 0 = background and k = SUBSTANCES[k - 1]."""
    labels = np.asarray(labels)
    probs = np.zeros(labels.shape + (len(CHANNELS),))
    np.put_along_axis(probs, labels[..., None].astype(np.intp), 1.0, axis=2)
    return SubstanceMap(probs)
