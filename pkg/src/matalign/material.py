"""Material library, color-signature matchers, substance weighting and metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .substance import SUBSTANCES

log = logging.getLogger(__name__)

HIST_BINS = 16
SIGNATURE_LENGTH = 3 * HIST_BINS
CHI2_EPS = 1e-10
SWATCH_SIZE = 64


class LibraryError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialRecord:
    id: str
    name: str
    substance: str
    scale: float
    median: tuple[float, float, float]
    histogram: np.ndarray = field(compare=False)
    brdf_meta: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "substance": self.substance,
            "scale": self.scale,
            "signature": {"median": list(self.median), "histogram": [float(v) for v in self.histogram]},
            "brdf_meta": self.brdf_meta,
        }


@dataclass(frozen=True, eq=False)
class MaterialLibrary:
    records: tuple[MaterialRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {r.id: i for i, r in enumerate(self.records)})
        object.__setattr__(self, "_medians", np.array([r.median for r in self.records], dtype=np.float64)
                           .reshape(-1, 3))
        object.__setattr__(self, "_hists", np.array([r.histogram for r in self.records], dtype=np.float64)
                           .reshape(-1, SIGNATURE_LENGTH))
        object.__setattr__(self, "_subst", np.array([SUBSTANCES.index(r.substance) for r in self.records],
                                                    dtype=np.int64))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def index(self, material_id: str) -> int:
        return self._index[material_id]

    def get(self, material_id: str) -> MaterialRecord:
        return self.records[self._index[material_id]]

    def substance_indices(self) -> np.ndarray:
        return self._subst

    def counts(self) -> dict[str, int]:
        return {s: int((self._subst == k).sum()) for k, s in enumerate(SUBSTANCES)}

    def pool(self, substance: str) -> list[MaterialRecord]:
        return [r for r in self.records if r.substance == substance]

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.records], indent=1, sort_keys=True) + "\n"


def _record_from_dict(d: dict, where: str) -> MaterialRecord:
    try:
        rid, substance = str(d["id"]), d["substance"]
        sig = d["signature"]
        median = tuple(float(v) for v in sig["median"])
        hist = np.asarray(sig["histogram"], dtype=np.float64)
        scale = float(d["scale"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LibraryError(f"{where}: malformed record ({exc})") from exc
    if substance not in SUBSTANCES:
        raise LibraryError(f"{where}: unknown substance {substance!r} for material {rid!r}; "
                           f"expected one of {SUBSTANCES}")
    if len(median) != 3 or hist.shape != (SIGNATURE_LENGTH,):
        raise LibraryError(f"{where}: signature must have a 3-vector median and {SIGNATURE_LENGTH} bins")
    if np.any(hist < 0) or abs(hist.sum() - 1.0) > 1e-6:
        raise LibraryError(f"{where}: histogram of {rid!r} must be nonnegative and sum to 1")
    if not scale > 1.0:
        raise LibraryError(f"{where}: scale of {rid!r} must exceed 1")
    return MaterialRecord(rid, str(d.get("name", rid)), substance, scale, median, hist,
                          dict(d.get("brdf_meta", {})))


def load_material_library(manifest) -> MaterialLibrary:
    """Load and validate a JSON array of material records (path, JSON text or parsed list)."""
    if isinstance(manifest, str) and manifest.lstrip()[:1] in ("[", "{"):
        data = json.loads(manifest)
    elif isinstance(manifest, (str, Path)):
        data = json.loads(Path(manifest).read_text())
    else:
        data = manifest
    if not isinstance(data, list):
        raise LibraryError("material manifest must be a JSON array")
    records, seen = [], set()
    for i, d in enumerate(data):
        rec = _record_from_dict(d, f"record {i}")
        if rec.id in seen:
            raise LibraryError(f"duplicate material id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    if not records:
        log.warning("material library is empty")
    lib = MaterialLibrary(tuple(records))
    log.info("loaded %d materials: %s", len(lib), lib.counts())
    return lib


def reference_library_path() -> Path:
    return Path(__file__).parent / "data" / "reference_materials.json"


# --- signatures --------------------------------------------------------------------

def color_histogram(pixels: np.ndarray) -> np.ndarray:
    """Per-channel 16-bin histograms of uint8 RGB pixels, concatenated, summing to 1."""
    pixels = np.asarray(pixels).reshape(-1, 3)
    if len(pixels) == 0:
        raise ValueError("no pixels")
    bins = (pixels.astype(np.int64) * HIST_BINS) // 256
    hist = np.concatenate([np.bincount(bins[:, c], minlength=HIST_BINS) for c in range(3)]).astype(np.float64)
    return hist / hist.sum()


def median_color(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels).reshape(-1, 3)
    if len(pixels) == 0:
        raise ValueError("no pixels")
    return np.median(pixels.astype(np.float64), axis=0)


def render_swatch(albedo, size: int = SWATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Sphere lit from the viewer, shaded like the flat preview renderer.

    Returns (uint8 RGB image on white, boolean mask).
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    c = (np.arange(size) + 0.5) / size * 2 - 1
    x, y = np.meshgrid(c, -c)
    rr = x ** 2 + y ** 2
    mask = rr < 1.0
    nz = np.sqrt(np.clip(1.0 - rr, 0.0, 1.0))
    image = np.full((size, size, 3), 255, dtype=np.uint8)
    shade = nz[mask][:, None] * albedo[None, :]
    image[mask] = np.clip(np.floor(shade * 255 + 0.5), 0, 255).astype(np.uint8)
    return image, mask


def swatch_signature(albedo) -> tuple[tuple[float, float, float], np.ndarray]:
    image, mask = render_swatch(albedo)
    return tuple(float(v) for v in median_color(image[mask])), color_histogram(image[mask])


def make_record(material_id: str, substance: str, albedo, scale: float = 1.5, name: str | None = None,
                brdf_meta: dict | None = None) -> MaterialRecord:
    median, hist = swatch_signature(albedo)
    meta = {"model": "lambert", "albedo": [float(v) for v in albedo]}
    meta.update(brdf_meta or {})
    return MaterialRecord(material_id, name or material_id, substance, float(scale), median, hist, meta)


# --- scores ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaterialScores:
    """|M| material scores followed by one background score."""

    values: np.ndarray
    classifier: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) < 1:
            raise ValueError("scores must be a nonempty vector")
        if np.any(np.isnan(v)) or np.any(np.isposinf(v)):
            raise ValueError("scores must be finite (background may be -inf)")
        object.__setattr__(self, "values", v)

    @property
    def materials(self) -> np.ndarray:
        return self.values[:-1]

    def ranking(self, library: MaterialLibrary) -> list[str]:
        """Material ids by descending score, ties by id; background never ranked."""
        ids = library.ids
        return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-self.materials[i], ids[i]))]


def _masked_pixels(image, mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    return np.asarray(image)[..., :3][mask]


def median_color_match(image, mask, library: MaterialLibrary) -> MaterialScores:
    """Negative Euclidean distance between the masked median RGB and each signature median."""
    med = median_color(_masked_pixels(image, mask))
    d = np.linalg.norm(library._medians - med, axis=1)
    return MaterialScores(np.append(-d, -np.inf), "median-color")


def chi2_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """0.5 * sum (a - b)^2 / (a + b + 1e-10) along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 0.5 * ((a - b) ** 2 / (a + b + CHI2_EPS)).sum(axis=-1)


def histogram_match(image, mask, library: MaterialLibrary) -> MaterialScores:
    hist = color_histogram(_masked_pixels(image, mask))
    return MaterialScores(np.append(-chi2_distance(library._hists, hist), -np.inf), "histogram")


MATCHERS = {"histogram": histogram_match, "median-color": median_color_match}


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def substance_weighted_ranking(scores: MaterialScores, substance_conf, library: MaterialLibrary):
    """[(material_id, probability)] by descending p(m) ∝ softmax(scores)(m) * conf(q_m).

    If the confidence puts no mass on any substance present in the library,
    the unweighted softmax is returned instead. Probability ties (including
    ones created by floating-point rounding in the softmax) fall back to the
    raw score, then the id.
    """
    conf = np.asarray(substance_conf, dtype=np.float64)
    if conf.shape != (len(SUBSTANCES),) or np.any(conf < 0) or abs(conf.sum() - 1.0) > 1e-6:
        raise ValueError("substance confidence must be a distribution over the substances")
    base = softmax(scores.materials)
    p = base * conf[library.substance_indices()]
    total = p.sum()
    p = p / total if total > 0 else base
    ids = library.ids
    raw = scores.materials
    order = sorted(range(len(ids)), key=lambda i: (-p[i], -raw[i], ids[i]))
    return [(ids[i], float(p[i])) for i in order]


def implied_substance(scores: MaterialScores, library: MaterialLibrary) -> np.ndarray:
    """p(q) = sum of softmax material probabilities over materials tagged q."""
    p = softmax(scores.materials)
    return np.bincount(library.substance_indices(), weights=p, minlength=len(SUBSTANCES))


def classifier_metrics(predictions, truths, library: MaterialLibrary, substance_predictions=None) -> dict:
    """Top-1/top-5 material precision, substance precision and implied-substance precision.

    ``truths`` holds (material_id, substance) pairs. ``substance_predictions``
    optionally holds one score vector over the substances per prediction;
    without it ``sub@1`` is None.
    """
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if substance_predictions is not None and len(substance_predictions) != len(truths):
        raise ValueError("substance predictions and truths differ in length")
    n = len(truths)
    if n == 0:
        return {"n": 0, "mtl@1": None, "mtl@5": None, "sub@1": None, "sub-mtl@1": None}
    top1 = top5 = sub = sub_mtl = 0
    for i, (pred, (mat, subst)) in enumerate(zip(predictions, truths)):
        ranking = pred.ranking(library)
        top1 += ranking[0] == mat
        top5 += mat in ranking[:5]
        sub_mtl += SUBSTANCES[int(np.argmax(implied_substance(pred, library)))] == subst
        if substance_predictions is not None:
            sub += SUBSTANCES[int(np.argmax(substance_predictions[i]))] == subst
    return {
        "n": n,
        "mtl@1": top1 / n,
        "mtl@5": top5 / n,
        "sub@1": sub / n if substance_predictions is not None else None,
        "sub-mtl@1": sub_mtl / n,
    }


# --- reference manifest ---------------------------------------------------------------

REFERENCE_COUNTS = {"leather": 48, "fabric": 154, "wood": 105, "metal": 86, "plastic": 60}

# (hue range in degrees, saturation range, value range, scale range)
_SUBSTANCE_PALETTE = {
    "leather": ((0, 30), (0.35, 0.8), (0.15, 0.6), (1.5, 3.0)),
    "fabric": ((0, 360), (0.1, 0.7), (0.25, 0.9), (2.0, 6.0)),
    "wood": ((18, 42), (0.35, 0.75), (0.3, 0.8), (1.5, 4.0)),
    "metal": ((0, 360), (0.0, 0.1), (0.45, 0.95), (1.2, 3.0)),
    "plastic": ((0, 360), (0.4, 1.0), (0.5, 1.0), (1.2, 2.5)),
}


def build_reference_records(seed: int = 453) -> list[MaterialRecord]:
    """Placeholder library with the reference per-substance counts and swatch signatures."""
    from matplotlib.colors import hsv_to_rgb

    rng = np.random.default_rng(seed)
    records = []
    for substance in SUBSTANCES:
        (h0, h1), (s0, s1), (v0, v1), (k0, k1) = _SUBSTANCE_PALETTE[substance]
        for j in range(REFERENCE_COUNTS[substance]):
            hsv = np.array([rng.uniform(h0, h1) / 360.0, rng.uniform(s0, s1), rng.uniform(v0, v1)])
            albedo = np.round(hsv_to_rgb(hsv), 4)
            scale = round(float(rng.uniform(k0, k1)), 3)
            mid = f"{substance}-{j:03d}"
            records.append(make_record(mid, substance, albedo, scale, name=f"{substance} {j}",
                                       brdf_meta={"placeholder": True}))
    return records

