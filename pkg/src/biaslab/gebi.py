"""Global explanations for bias identification: embed images with their attribution maps and cluster."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attribution, clustering, embedding

log = logging.getLogger(__name__)

__all__ = [
    "GebiConfig",
    "ClusterReport",
    "equalize_histogram",
    "contrast_stretch",
    "preprocess",
    "attribution_maps",
    "build_embeddings",
    "run_gebi",
]

MODES = ("spray", "iso_spray", "gebi")
EXPLAINERS = ("saliency", "occlusion", "lrp")


@dataclass
class GebiConfig:
    mode: str = "gebi"
    image_dims: int = 10
    attribution_dims: int = 20
    knn_k: int = 10
    cluster_k: int | None = 4
    select_method: str = "elbow"
    k_range: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
    explainer: str = "saliency"
    target_class: int = 1
    analysis_side: int = 45
    spray_side: int = 10
    equalize_images: bool = True
    equalize_maps: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown GEBI mode {self.mode!r}")
        if self.explainer not in EXPLAINERS:
            raise ValueError(f"unknown explainer {self.explainer!r}")
        if min(self.image_dims, self.attribution_dims, self.knn_k, self.analysis_side, self.spray_side) < 1:
            raise ValueError("dimensions, knn_k and sides must be >= 1")
        if self.cluster_k is not None and self.cluster_k < 1:
            raise ValueError("cluster_k must be >= 1")
        if self.mode == "gebi" and not 1.5 <= self.attribution_dims / self.image_dims <= 2.5:
            log.warning("gebi: attribution_dims is usually about twice image_dims")
        self.k_range = tuple(self.k_range)


def equalize_histogram(image, bins: int = 256) -> np.ndarray:
    """Map each pixel to the cumulative share of pixels in its bin or below."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0 or np.ptp(image) == 0:
        return image.copy()
    idx = np.clip((image * bins).astype(int), 0, bins - 1)
    cdf = np.cumsum(np.bincount(idx.ravel(), minlength=bins)) / image.size
    return cdf[idx]


def contrast_stretch(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0 or np.ptp(image) == 0:
        return image.copy()
    lo, hi = image.min(), image.max()
    return (image - lo) / (hi - lo)


def preprocess(image, side: int = 45, equalize: bool = True) -> np.ndarray:
    """Resize, histogram-equalize, then stretch to [0, 1]."""
    out = embedding.resize(image, side)
    if equalize:
        out = equalize_histogram(out)
    return contrast_stretch(out)


def attribution_maps(model, images, target_class: int, explainer: str = "saliency") -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if explainer == "saliency":
        return np.abs(attribution.saliency_tensor(model, images, target_class).data)
    if explainer == "occlusion":
        return np.stack([attribution.occlusion(model, img, target_class).values for img in images])
    if explainer == "lrp":
        return np.stack([attribution.lrp_epsilon(model, img, target_class).values for img in images])
    raise ValueError(f"unknown explainer {explainer!r}")


def _normalize_block(x: np.ndarray) -> np.ndarray:
    """Center columns and divide by the block's overall RMS."""
    x = x - x.mean(axis=0, keepdims=True)
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def _maps_for(model, images, cfg: GebiConfig, maps=None):
    if maps is None:
        maps = attribution_maps(model, images, cfg.target_class, cfg.explainer)
    return np.asarray(maps, dtype=np.float64)


def build_embeddings(images, model, cfg: GebiConfig = GebiConfig(), maps=None) -> np.ndarray:
    """Per-sample feature vectors for clustering.

    gebi: isomap(images) concatenated with isomap(maps); spray: downscaled
    maps; iso_spray: isomap(maps). Precomputed ``maps`` skip the explainer.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n < cfg.knn_k + 1:
        raise ValueError(f"build_embeddings: {n} samples are fewer than knn_k + 1 = {cfg.knn_k + 1}")
    maps = _maps_for(model, images, cfg, maps)
    prepped_maps = np.stack([preprocess(m, cfg.analysis_side, cfg.equalize_maps) for m in maps])
    if cfg.mode == "spray":
        return np.stack([embedding.downscale(m, min(cfg.spray_side, cfg.analysis_side)) for m in prepped_maps])
    map_vecs = embedding.isomap(
        prepped_maps.reshape(n, -1), embedding.EmbeddingConfig(cfg.knn_k, min(cfg.attribution_dims, n - 1))
    )
    if cfg.mode == "iso_spray":
        return map_vecs
    prepped = np.stack([preprocess(img, cfg.analysis_side, cfg.equalize_images) for img in images])
    img_vecs = embedding.isomap(
        prepped.reshape(n, -1), embedding.EmbeddingConfig(cfg.knn_k, min(cfg.image_dims, n - 1))
    )
    return np.hstack([_normalize_block(img_vecs), _normalize_block(map_vecs)])


@dataclass
class ClusterReport:
    mode: str
    clusters: list[dict]
    best_purity: dict[str, float]
    config: dict = field(default_factory=dict)

    @property
    def sizes(self) -> list[int]:
        return [c["size"] for c in self.clusters]

    def best_cluster(self, artifact: str) -> dict:
        return max(self.clusters, key=lambda c: (c["artifact_frequency"][artifact], c["size"]))

    def remaining_frequency(self, artifact: str) -> float:
        """Artifact frequency over all members outside the best cluster for that artifact."""
        best = self.best_cluster(artifact)
        rest = [c for c in self.clusters if c is not best]
        total = sum(c["size"] for c in rest)
        if not total:
            return 0.0
        return sum(c["artifact_frequency"][artifact] * c["size"] for c in rest) / total

    def to_dict(self) -> dict:
        return {"mode": self.mode, "config": self.config, "best_purity": self.best_purity, "clusters": self.clusters}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_labels(labels, dataset, cfg: GebiConfig) -> ClusterReport:
    labels = np.asarray(labels, dtype=int)
    artifacts = sorted(dataset.annotations)
    clusters = []
    for c in range(int(labels.max(initial=-1)) + 1):
        members = np.flatnonzero(labels == c)
        size = len(members)
        freq = {a: float(np.mean(dataset.annotations[a][members])) if size else 0.0 for a in artifacts}
        composition = {str(k): int(v) for k, v in zip(*np.unique(dataset.labels[members], return_counts=True))}
        clusters.append(
            {
                "cluster": c,
                "size": size,
                "members": [dataset.ids[i] for i in members],
                "artifact_frequency": freq,
                "class_composition": composition,
            }
        )
    purity = {a: max((c["artifact_frequency"][a] for c in clusters if c["size"]), default=0.0) for a in artifacts}
    return ClusterReport(cfg.mode, clusters, purity, asdict(cfg))


def run_gebi(dataset, model, cfg: GebiConfig = GebiConfig(), maps=None) -> ClusterReport:
    """Embed, cluster spectrally (fixed k or selected), and tabulate artifact frequencies per cluster."""
    vectors = build_embeddings(dataset.images, model, cfg, maps)
    k = cfg.cluster_k
    if k is None:
        k_range = [k for k in cfg.k_range if k <= len(vectors)]
        k = clustering.select_k(vectors, k_range, cfg.select_method, seed=cfg.seed, knn_k=cfg.knn_k)
    k = min(k, len(vectors))
    result = clustering.spectral_cluster(vectors, k, knn_k=cfg.knn_k, seed=cfg.seed)
    report = report_from_labels(result.labels, dataset, cfg)
    report.config["selected_k"] = k
    return report
