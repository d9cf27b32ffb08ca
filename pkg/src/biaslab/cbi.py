"""Counterfactual Bias Insertion: artifact transforms and prediction-change metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .model import predict_proba

__all__ = [
    "Stamp",
    "StampBank",
    "make_stamp_bank",
    "insert_frame",
    "insert_stamp",
    "insert_ruler",
    "insert_hair",
    "insert_circle",
    "midpoint_circle",
    "cover_object",
    "BiasTransform",
    "CbiReport",
    "run_cbi",
    "TRANSFORM_KINDS",
]

TRANSFORM_KINDS = ("identity", "frame", "ruler", "hair", "hair_ruler", "circle", "cover_object")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _grid(side_h, side_w):
    yy, xx = np.mgrid[0:side_h, 0:side_w]
    return yy + 0.5, xx + 0.5


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def insert_frame(
    image,
    seed=0,
    shape: str | None = None,
    radius: float | None = None,
    band: float | None = None,
    shapes: Sequence[str] = ("round", "rect"),
    radius_range: tuple[float, float] = (0.40, 0.46),
    band_range: tuple[float, float] = (0.10, 0.18),
) -> np.ndarray:
    """Darken a border region to 0.

    A round frame blackens every pixel whose center lies at distance >= radius
    from the image center; a rectangular frame blackens top and bottom bands.
    ``radius`` and ``band`` are fractions of the image side; when omitted
    they are drawn from the seeded ranges.
    """
    img = np.array(image, dtype=np.float64)
    h, w = img.shape
    side = min(h, w)
    rng = _rng(seed)
    shape = shape or shapes[rng.integers(len(shapes))]
    if shape == "round":
        r = (radius if radius is not None else rng.uniform(*radius_range)) * side
        yy, xx = _grid(h, w)
        img[np.hypot(yy - h / 2, xx - w / 2) >= r] = 0.0
    elif shape == "rect":
        bw = int(round((band if band is not None else rng.uniform(*band_range)) * side))
        if bw > 0:
            img[:bw] = 0.0
            img[max(h - bw, 0) :] = 0.0
    else:
        raise ValueError(f"unknown frame shape {shape!r}")
    return img


# ---------------------------------------------------------------------------
# stamps (rulers, hair)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stamp:
    alpha: np.ndarray
    value: float
    kind: str
    density: str = ""

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.alpha > 0))


@dataclass(frozen=True)
class StampBank:
    kind: str
    stamps: tuple[Stamp, ...]

    def __len__(self):
        return len(self.stamps)


def _ruler_stamp(rng, side) -> Stamp:
    length = int(rng.integers(int(0.5 * side), int(0.9 * side) + 1))
    spacing = int(rng.integers(2, 4))
    alpha = np.zeros((5, length))
    alpha[4, :] = 1.0
    for k, x in enumerate(range(0, length, spacing)):
        alpha[4 - (4 if k % 5 == 0 else 2) : 4, x] = 1.0
    return Stamp(alpha, float(rng.uniform(0.05, 0.2)), "ruler")


_HAIR_DENSITY = {"short": (3, 0.15, 0.25), "medium": (6, 0.35, 0.6), "dense": (18, 0.5, 0.9)}


def _draw_curve(alpha, p0, p1, p2):
    n = int(4 * (np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1))) + 2
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    ij = np.floor(pts).astype(int)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < alpha.shape[0]) & (ij[:, 1] >= 0) & (ij[:, 1] < alpha.shape[1])
    alpha[ij[ok, 0], ij[ok, 1]] = 1.0


def _hair_stamp(rng, side, density) -> Stamp:
    strokes, lo, hi = _HAIR_DENSITY[density]
    alpha = np.zeros((side, side))
    for _ in range(strokes):
        length = rng.uniform(lo, hi) * side
        start = rng.uniform(0, side, 2)
        heading = rng.uniform(0, 2 * np.pi)
        end = start + length * np.array([np.sin(heading), np.cos(heading)])
        bend = (start + end) / 2 + rng.normal(0, 0.15 * length, 2)
        _draw_curve(alpha, start, bend, end)
    return Stamp(alpha * 0.9, float(rng.uniform(0.08, 0.25)), "hair", density)


def make_stamp_bank(kind: str, side: int = 32, seed: int = 0, per_density: int = 8) -> StampBank:
    """Procedural stamp bank: tick-mark strips for rulers, curved strokes for hair.

    Hair stamps come in three densities (short, medium, dense). Banks built
    from different seeds share no stamps.
    """
    rng = np.random.default_rng(seed)
    if kind == "ruler":
        stamps = tuple(_ruler_stamp(rng, side) for _ in range(per_density * 3))
    elif kind == "hair":
        stamps = tuple(_hair_stamp(rng, side, d) for d in ("short", "medium", "dense") for _ in range(per_density))
    else:
        raise ValueError(f"unknown stamp kind {kind!r}")
    return StampBank(kind, stamps)


def insert_stamp(image, stamp: Stamp, seed=0, angle: float | None = None, offset=None) -> np.ndarray:
    """Alpha-composite a rotated stamp at a random position; pixels outside its box are untouched."""
    img = np.array(image, dtype=np.float64)
    if not np.any(stamp.alpha > 0):
        return img
    rng = _rng(seed)
    angle = rng.uniform(0, 360) if angle is None else angle
    alpha = np.clip(ndimage.rotate(stamp.alpha, angle, reshape=True, order=1, mode="constant"), 0.0, 1.0)
    h, w = img.shape
    sh, sw = alpha.shape
    if offset is None:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        top, left = int(round(cy - sh / 2)), int(round(cx - sw / 2))
    else:
        top, left = offset
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + sh, h), min(left + sw, w)
    if y1 <= y0 or x1 <= x0:
        return img
    a = alpha[y0 - top : y1 - top, x0 - left : x1 - left]
    region = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = (1.0 - a) * region + a * stamp.value
    return np.clip(img, 0.0, 1.0)


def _pick(bank: StampBank, rng) -> Stamp:
    if not len(bank):
        raise ValueError("stamp bank is empty")
    return bank.stamps[rng.integers(len(bank))]


def insert_ruler(image, bank: StampBank, seed=0) -> np.ndarray:
    rng = _rng(seed)
    return insert_stamp(image, _pick(bank, rng), rng)


def insert_hair(image, bank: StampBank, seed=0) -> np.ndarray:
    rng = _rng(seed)
    return insert_stamp(image, _pick(bank, rng), rng)


# ---------------------------------------------------------------------------
# circles, covered objects
# ---------------------------------------------------------------------------


def midpoint_circle(cy: int, cx: int, r: int) -> set[tuple[int, int]]:
    """Pixel set of the midpoint circle algorithm."""
    if r <= 0:
        return set()
    pts = set()
    x, y, d = r, 0, 1 - r
    while y <= x:
        for a, b in ((x, y), (y, x)):
            for sa in (1, -1):
                for sb in (1, -1):
                    pts.add((cy + sa * a, cx + sb * b))
        y += 1
        if d < 0:
            d += 2 * y + 1
        else:
            x -= 1
            d += 2 * (y - x) + 1
    return pts


def insert_circle(image, seed=0, radius: int | None = None, center=None, value: float = 1.0,
                  radius_range: tuple[float, float] = (0.08, 0.22)) -> np.ndarray:
    """Composite a one-pixel bright ring (the null-effect control artifact)."""
    img = np.array(image, dtype=np.float64)
    h, w = img.shape
    rng = _rng(seed)
    if radius is None:
        lo, hi = (max(1, int(round(f * min(h, w)))) for f in radius_range)
        radius = int(rng.integers(lo, hi + 1))
    if center is None:
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    for i, j in midpoint_circle(center[0], center[1], int(radius)):
        if 0 <= i < h and 0 <= j < w:
            img[i, j] = value
    return img


def cover_object(image, annotation) -> np.ndarray:
    """Paint a white disk over the annotated object (center/radius in pixels)."""
    if annotation is None:
        raise ValueError("cover_object: missing object annotation")
    try:
        cx, cy, r = (float(annotation[k]) for k in ("object_cx", "object_cy", "object_r"))
    except (KeyError, TypeError):
        raise ValueError("cover_object: annotation lacks object_cx/object_cy/object_r") from None
    if not all(map(math.isfinite, (cx, cy, r))):
        raise ValueError("cover_object: missing object annotation")
    img = np.array(image, dtype=np.float64)
    yy, xx = _grid(*img.shape)
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r**2] = 1.0
    return img


# ---------------------------------------------------------------------------
# transform objects
# ---------------------------------------------------------------------------


@dataclass
class BiasTransform:
    """A seeded artifact insertion, callable as ``t(image, seed, annotation=None)``.

    ``params`` are forwarded to the underlying insertion function; ruler and
    hair kinds need stamp banks.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    hair_bank: StampBank | None = None
    ruler_bank: StampBank | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    def __call__(self, image, seed=None, annotation=None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        if self.kind == "identity":
            return np.array(image, dtype=np.float64)
        if self.kind == "frame":
            return insert_frame(image, rng, **self.params)
        if self.kind == "circle":
            return insert_circle(image, rng, **self.params)
        if self.kind == "cover_object":
            return cover_object(image, annotation)
        out = image
        if self.kind in ("hair", "hair_ruler"):
            out = insert_hair(out, self._bank("hair"), rng)
        if self.kind in ("ruler", "hair_ruler"):
            out = insert_ruler(out, self._bank("ruler"), rng)
        return out

    def _bank(self, kind) -> StampBank:
        bank = self.hair_bank if kind == "hair" else self.ruler_bank
        if bank is None:
            raise ValueError(f"{self.kind} transform needs a {kind} stamp bank")
        return bank

    def describe(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class CbiReport:
    ids: list
    p_orig: list[float]
    p_biased: list[float]
    change: list[float]
    switched: list[int]
    directions: list[str]
    mean_change: float
    median_change: float
    max_change: float
    switched_total: int
    switched_by_direction: dict[str, int]
    samples: int
    transform: dict = field(default_factory=dict)

    @property
    def switched_fraction(self) -> float:
        return self.switched_total / self.samples if self.samples else 0.0

    def summary(self) -> dict:
        return {
            "transform": self.transform,
            "samples": self.samples,
            "mean_change": self.mean_change,
            "median_change": self.median_change,
            "max_change": self.max_change,
            "switched_total": self.switched_total,
            "switched_by_direction": dict(sorted(self.switched_by_direction.items())),
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_sample"] = [
            {"id": i, "p_orig": a, "p_biased": b, "change": c, "switched": s, "direction": r}
            for i, a, b, c, s, r in zip(self.ids, self.p_orig, self.p_biased, self.change, self.switched, self.directions)
        ]
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "p_orig", "p_biased", "change", "switched", "direction"])
        for row in zip(self.ids, self.p_orig, self.p_biased, self.change, self.switched, self.directions):
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4], row[5]])
        return buf.getvalue()


def cbi_from_probabilities(ids, probs_orig, probs_biased, transform: dict | None = None) -> CbiReport:
    """Aggregate prediction changes; p_k is the probability of the originally predicted class."""
    probs_orig = np.asarray(probs_orig, dtype=np.float64)
    probs_biased = np.asarray(probs_biased, dtype=np.float64)
    n = len(probs_orig)
    c_orig = probs_orig.argmax(axis=1) if n else np.zeros(0, int)
    c_bias = probs_biased.argmax(axis=1) if n else np.zeros(0, int)
    rows = np.arange(n)
    p = probs_orig[rows, c_orig] if n else np.zeros(0)
    pb = probs_biased[rows, c_orig] if n else np.zeros(0)
    change = p - pb
    switched = (c_orig != c_bias).astype(int)
    directions = [f"{a}->{b}" if s else "" for a, b, s in zip(c_orig, c_bias, switched)]
    by_dir: dict[str, int] = {}
    for d in directions:
        if d:
            by_dir[d] = by_dir.get(d, 0) + 1
    return CbiReport(
        ids=list(ids),
        p_orig=p.tolist(),
        p_biased=pb.tolist(),
        change=change.tolist(),
        switched=switched.tolist(),
        directions=directions,
        mean_change=float(np.mean(change)) if n else 0.0,
        median_change=float(np.median(change)) if n else 0.0,
        max_change=float(np.max(np.abs(change))) if n else 0.0,
        switched_total=int(switched.sum()),
        switched_by_direction=by_dir,
        samples=n,
        transform=transform or {},
    )


def apply_transform(transform, images, ids, annotations=None, seed: int = 0) -> np.ndarray:
    out = []
    for k, (img, i) in enumerate(zip(images, ids)):
        ann = annotations[k] if annotations is not None else None
        out.append(transform(img, sample_seed(seed, k), annotation=ann))
    return np.stack(out) if out else np.zeros((0,) + np.shape(images)[1:])


def run_cbi(model, dataset, transform: BiasTransform, seed: int | None = None) -> CbiReport:
    """Insert the artifact into every sample and compare predictions."""
    seed = transform.seed if seed is None else seed
    images = np.asarray(dataset.images)
    anns = dataset.annotation_records() if transform.kind == "cover_object" else None
    biased = apply_transform(transform, images, dataset.ids, anns, seed)
    return cbi_from_probabilities(
        dataset.ids, predict_proba(model, images), predict_proba(model, biased), transform.describe()
    )
