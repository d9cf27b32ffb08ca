"""Synthetic lesion-like dataset with planted artifact-class correlations, plus descriptive statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import special

from . import cbi

log = logging.getLogger(__name__)

__all__ = [
    "GeneratorSpec",
    "Dataset",
    "StatsReport",
    "ARTIFACTS",
    "generate",
    "render_lesion",
    "artifact_ratio",
    "class_ratio",
    "pearson",
    "phi_from_counts",
    "cohens_kappa",
    "stats_report",
    "image_seed",
]

ARTIFACTS = ("frame", "ruler", "hair", "circle")
SPLITS = ("train", "val", "test")


@dataclass
class GeneratorSpec:
    """Configuration of the synthetic benchmark.

    ``artifacts`` maps an artifact kind to ``(P(artifact | class 0), P(artifact | class 1))``.
    Blob parameters are (class 0, class 1) pairs of ranges.
    """

    n_per_class: int = 2000
    side: int = 32
    radius: tuple[float, float] = (0.22, 0.30)
    irregularity: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.05), (0.09, 0.20))
    texture: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.03), (0.05, 0.12))
    artifacts: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"frame": (0.1, 0.9), "ruler": (0.0, 0.0), "hair": (0.0, 0.0), "circle": (0.0, 0.0)}
    )
    frame_shapes: tuple[str, ...] = ("round", "rect")
    split_fractions: tuple[float, float, float] = (0.6, 0.1, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 0:
            raise ValueError("n_per_class must be >= 0")
        if self.side < 8 or self.side % 4:
            raise ValueError("side must be a multiple of 4 and >= 8")
        for kind, probs in self.artifacts.items():
            if kind not in ARTIFACTS:
                raise ValueError(f"unknown artifact kind {kind!r}")
            if len(probs) != 2 or not all(0.0 <= p <= 1.0 for p in probs):
                raise ValueError(f"artifact probabilities for {kind} must be two values in [0, 1]")
        self.frame_shapes = tuple(self.frame_shapes)
        if not self.frame_shapes or not set(self.frame_shapes) <= {"round", "rect"}:
            raise ValueError("frame_shapes must be a non-empty subset of round, rect")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")

    def with_artifacts(self, **plan) -> "GeneratorSpec":
        merged = {k: (0.0, 0.0) for k in ARTIFACTS}
        merged.update({k: tuple(v) for k, v in plan.items()})
        return replace(self, artifacts=merged)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    splits: list[str]
    annotations: dict[str, np.ndarray]
    objects: np.ndarray  # (n, 3): center x, center y, radius in pixels
    provenance: list[dict] | None = None

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in idx],
            splits=[self.splits[i] for i in idx],
            annotations={k: v[idx] for k, v in self.annotations.items()},
            objects=self.objects[idx],
        )

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return self.subset(np.array([s == name for s in self.splits], dtype=bool))

    def of_class(self, label: int) -> "Dataset":
        return self.subset(self.labels == label)

    def annotation_records(self) -> list[dict]:
        return [
            {"object_cx": float(o[0]), "object_cy": float(o[1]), "object_r": float(o[2])} for o in self.objects
        ]

    def flags(self, artifact: str) -> np.ndarray:
        if artifact not in self.annotations:
            raise ValueError(f"unknown artifact {artifact!r}")
        return self.annotations[artifact]

    @staticmethod
    def empty(side: int) -> "Dataset":
        return Dataset(
            images=np.zeros((0, side, side)),
            labels=np.zeros(0, dtype=int),
            ids=[],
            splits=[],
            annotations={k: np.zeros(0, dtype=bool) for k in ARTIFACTS},
            objects=np.zeros((0, 3)),
        )


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0] >> 1)


def quantize(image) -> np.ndarray:
    """Round to the 8-bit grid k/255 so files round-trip exactly."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def render_lesion(rng: np.random.Generator, label: int, spec: GeneratorSpec):
    """Return (image, (cx, cy, r_max)) for one artifact-free lesion.

    Class 1 lesions have irregular borders and blotchy high-contrast interiors;
    class 0 lesions are near-circular with a smooth interior.
    """
    s = spec.side
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    cx = s / 2 + rng.uniform(-0.06, 0.06) * s
    cy = s / 2 + rng.uniform(-0.06, 0.06) * s
    r0 = rng.uniform(*spec.radius) * s
    amp = rng.uniform(*spec.irregularity[label])
    theta = np.arctan2(yy - cy, xx - cx)
    harmonics = np.arange(2, 7)
    weights = rng.normal(size=harmonics.size)
    weights /= np.linalg.norm(weights)
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    wobble = np.tensordot(weights, np.cos(harmonics[:, None, None] * theta + phases[:, None, None]), axes=1)
    boundary = r0 * (1.0 + amp * wobble)
    dist = np.hypot(yy - cy, xx - cx)
    mask = special.expit((boundary - dist) / 0.6)

    skin = rng.uniform(0.62, 0.82) + rng.uniform(-0.05, 0.05) * (xx - s / 2) / s
    lesion = np.full((s, s), rng.uniform(0.28, 0.42))
    contrast = rng.uniform(*spec.texture[label])
    for _ in range(int(rng.integers(4, 9))):
        by, bx = cy + rng.normal(0, 0.5 * r0), cx + rng.normal(0, 0.5 * r0)
        width = rng.uniform(0.08, 0.2) * s
        lesion = lesion - contrast * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * width**2))
    img = skin * (1 - mask) + lesion * mask + rng.normal(0, 0.015, (s, s))
    r_max = float(r0 * (1.0 + amp * np.abs(wobble).max())) + 1.0
    return quantize(img), (float(cx), float(cy), r_max)


def _banks(spec: GeneratorSpec):
    hair = cbi.make_stamp_bank("hair", spec.side, seed=spec.seed * 2 + 101)
    ruler = cbi.make_stamp_bank("ruler", spec.side, seed=spec.seed * 2 + 102)
    return hair, ruler


def _split_tags(n: int, fractions) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def generate(spec: GeneratorSpec) -> Dataset:
    """Deterministic dataset; ids are ``img{index:06d}`` with classes interleaved.

    Splits are assigned per class (60/10/30 by default) from a seeded shuffle.
    Artifacts are inserted by the cbi transforms in a fixed order
    (hair, ruler, circle, frame) so frames stay detectable from the corners.
    """
    n = 2 * spec.n_per_class
    if n == 0:
        return Dataset.empty(spec.side)
    hair_bank, ruler_bank = _banks(spec)
    plan = {k: spec.artifacts.get(k, (0.0, 0.0)) for k in ARTIFACTS}
    labels = np.tile([0, 1], spec.n_per_class)
    images = np.zeros((n, spec.side, spec.side))
    objects = np.zeros((n, 3))
    flags = {k: np.zeros(n, dtype=bool) for k in ARTIFACTS}
    for i in range(n):
        rng = np.random.default_rng(image_seed(spec.seed, i))
        y = int(labels[i])
        img, obj = render_lesion(rng, y, spec)
        draws = {k: rng.random() < plan[k][y] for k in ARTIFACTS}
        art_rng = np.random.default_rng(image_seed(spec.seed + 1_000_003, i))
        inserts = {
            "hair": lambda im: cbi.insert_hair(im, hair_bank, art_rng),
            "ruler": lambda im: cbi.insert_ruler(im, ruler_bank, art_rng),
            "circle": lambda im: cbi.insert_circle(im, art_rng),
            "frame": lambda im: cbi.insert_frame(im, art_rng, shapes=spec.frame_shapes),
        }
        for k in ("hair", "ruler", "circle", "frame"):
            if draws[k]:
                out = inserts[k](img)
                # a stamp landing off-image leaves no visible artifact and is not annotated
                draws[k] = bool(np.any(quantize(out) != quantize(img)))
                img = out
        images[i] = quantize(img)
        objects[i] = obj
        for k in ARTIFACTS:
            flags[k][i] = draws[k]
    splits = [""] * n
    split_rng = np.random.default_rng(image_seed(spec.seed, -1 % (1 << 32)))
    for y in (0, 1):
        members = np.flatnonzero(labels == y)
        for i, tag in zip(split_rng.permutation(members), _split_tags(len(members), spec.split_fractions)):
            splits[i] = tag
    return Dataset(images, labels, [f"img{i:06d}" for i in range(n)], splits, flags, objects)


def frame_detected(image) -> bool:
    """True when all four corner pixels are exactly 0."""
    img = np.asarray(image)
    return bool(img[0, 0] == 0 and img[0, -1] == 0 and img[-1, 0] == 0 and img[-1, -1] == 0)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def _flags_labels(dataset, artifact):
    if isinstance(dataset, tuple):
        flags, labels = dataset
        return np.asarray(flags, dtype=bool), np.asarray(labels, dtype=int)
    return np.asarray(dataset.flags(artifact), dtype=bool), np.asarray(dataset.labels, dtype=int)


def artifact_ratio(dataset, artifact: str, label: int) -> float:
    """count(artifact and class) / count(class).

    ``dataset`` may be a Dataset or a ``(flags, labels)`` pair.
    """
    flags, labels = _flags_labels(dataset, artifact)
    members = labels == label
    if not members.any():
        raise ValueError(f"artifact_ratio: class {label} is empty")
    return float(np.count_nonzero(flags & members)) / float(np.count_nonzero(members))


def class_ratio(dataset, artifact: str, positive: int = 1, negative: int = 0) -> float:
    """Artifact ratio of the positive class divided by that of the negative class.

    A zero denominator yields +inf with a warning.
    """
    num = artifact_ratio(dataset, artifact, positive)
    den = artifact_ratio(dataset, artifact, negative)
    if den == 0.0:
        log.warning("class_ratio: %s never occurs in class %d", artifact, negative)
        return math.inf
    return num / den


def _pearson_arrays(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3 or y.size != n:
        raise ValueError("pearson: need at least 3 paired observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson: constant variable")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    return r, _pearson_p(r, n)


def _pearson_p(r: float, n: int) -> float:
    """Two-sided p-value of the t statistic with n-2 degrees of freedom."""
    df = n - 2
    if abs(r) >= 1.0:
        return 0.0
    t2 = r * r * df / (1.0 - r * r)
    return float(special.betainc(df / 2.0, 0.5, df / (df + t2)))


def pearson(dataset, artifact: str | None = None):
    """Pearson r and two-sided p-value between an artifact indicator and the label."""
    flags, labels = _flags_labels(dataset, artifact)
    return _pearson_arrays(flags, labels)


def phi_from_counts(a: int, b: int, c: int, d: int):
    """Pearson r of a 2x2 table expanded to binary observations.

    ``a`` = (1, 1), ``b`` = (1, 0), ``c`` = (0, 1), ``d`` = (0, 0) pairs.
    """
    x = np.repeat([1, 1, 0, 0], [a, b, c, d])
    y = np.repeat([1, 0, 1, 0], [a, b, c, d])
    return _pearson_arrays(x, y)


def cohens_kappa(labels_a: Sequence, labels_b: Sequence) -> float:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("cohens_kappa: label sequences must be non-empty and of equal length")
    alphabet = np.union1d(a, b)
    n = a.size
    # integer numerator and denominator keep exact cases exact
    agree = int(np.count_nonzero(a == b))
    chance = sum(int(np.count_nonzero(a == k)) * int(np.count_nonzero(b == k)) for k in alphabet)
    if chance >= n * n:
        raise ValueError("cohens_kappa: degenerate marginals (chance agreement is 1)")
    return (agree * n - chance) / (n * n - chance)


@dataclass
class StatsReport:
    counts: dict[str, list[int]]
    class_sizes: list[int]
    artifact_ratios: dict[str, list[float]]
    class_ratios: dict[str, float | None]
    correlations: dict[str, dict]
    kappa: float | None = None

    def to_dict(self) -> dict:
        def finite(v):
            return v if v is None or math.isfinite(v) else "inf"

        return {
            "class_sizes": self.class_sizes,
            "counts": self.counts,
            "artifact_ratios": self.artifact_ratios,
            "class_ratios": {k: finite(v) for k, v in self.class_ratios.items()},
            "correlations": self.correlations,
            "kappa": self.kappa,
        }


def stats_report(dataset: Dataset, kappa_against: Sequence | None = None) -> StatsReport:
    """Per-artifact cardinalities, ratios and label correlations for a two-class dataset."""
    sizes = [int(np.count_nonzero(dataset.labels == k)) for k in (0, 1)]
    counts, ratios, qclass, corr = {}, {}, {}, {}
    for art in ARTIFACTS:
        flags = dataset.flags(art)
        counts[art] = [int(np.count_nonzero(flags & (dataset.labels == k))) for k in (0, 1)]
        ratios[art] = [artifact_ratio(dataset, art, k) if sizes[k] else 0.0 for k in (0, 1)]
        qclass[art] = class_ratio(dataset, art) if all(sizes) else None
        try:
            r, p = pearson(dataset, art)
            corr[art] = {"r": r, "p_value": p}
        except ValueError:
            corr[art] = {"r": None, "p_value": None}
    kappa = None
    if kappa_against is not None:
        kappa = cohens_kappa(dataset.labels, kappa_against)
    return StatsReport(counts, sizes, ratios, qclass, corr, kappa)
