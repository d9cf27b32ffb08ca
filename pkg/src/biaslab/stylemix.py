"""Image-optimization style transfer on TinyCnn features and style-transfer data augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import NumericalError, predict_proba
from .synthdata import Dataset

log = logging.getLogger(__name__)

__all__ = [
    "StyleTransferConfig",
    "StdaConfig",
    "NstResult",
    "feature_maps",
    "gram_matrix",
    "content_loss",
    "style_loss",
    "total_loss",
    "nst_optimize",
    "pseudo_label",
    "stda_generate",
]


@dataclass
class StyleTransferConfig:
    alpha: float = 1.0
    beta: float = 1e-3
    content_layers: tuple[str, ...] = ("conv2",)
    style_layers: tuple[str, ...] = ("conv1", "conv2")
    iterations: int = 30
    step_size: float = 1e-3
    capture_every: int | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.iterations < 0 or self.step_size <= 0:
            raise ValueError("iterations must be >= 0 and step_size positive")
        self.content_layers = tuple(self.content_layers)
        self.style_layers = tuple(self.style_layers)


def _check_layers(model, names):
    known = {layer.name for layer in model.layers}
    missing = [n for n in names if n not in known]
    if missing:
        raise ValueError(f"unknown feature layers: {missing}")


def feature_maps(model, image, layers) -> dict[str, Tensor]:
    """Activations of the named layers for one image, each reshaped to (filters, positions)."""
    _, acts = model.forward_with_activations(image, capture=tuple(layers))
    out = {}
    for name in layers:
        a = acts[name]
        out[name] = ad.reshape(a, (a.shape[1], int(np.prod(a.shape[2:]))))
    return out


def gram_matrix(features) -> Tensor:
    """G_ij = sum_k F_ik F_jk, unnormalized."""
    f = ad.as_tensor(features)
    if f.ndim != 2:
        f = ad.reshape(f, (f.shape[0], int(np.prod(f.shape[1:]))))
    return ad.matmul(f, ad.transpose(f))


def content_loss(f_base, f_content) -> Tensor:
    """Half the summed squared difference of feature maps."""
    diff = ad.sub(ad.as_tensor(f_content), ad.as_tensor(f_base))
    return ad.mul(ad.tsum(ad.square(diff)), 0.5)


def style_loss(feats_base: dict, feats_style: dict, layers) -> Tensor:
    """Sum over layers of squared Gram-matrix differences, layers weighted equally."""
    total = None
    for name in layers:
        diff = ad.sub(gram_matrix(feats_style[name]), gram_matrix(feats_base[name]))
        term = ad.tsum(ad.square(diff))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


def total_loss(model, base, content_feats, style_feats, cfg: StyleTransferConfig) -> Tensor:
    layers = tuple(dict.fromkeys(cfg.content_layers + cfg.style_layers))
    feats = feature_maps(model, base, layers)
    lc = None
    for name in cfg.content_layers:
        term = content_loss(feats[name], content_feats[name])
        lc = term if lc is None else ad.add(lc, term)
    ls = style_loss(feats, style_feats, cfg.style_layers)
    parts = []
    if lc is not None:
        parts.append(ad.mul(lc, cfg.alpha))
    parts.append(ad.mul(ls, cfg.beta))
    return parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])


@dataclass
class NstResult:
    image: np.ndarray
    trace: list[float]
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)


def _fixed_features(model, image, layers):
    with ad.no_record():
        return {k: Tensor(v.data) for k, v in feature_maps(model, image, layers).items()}


def nst_optimize(content_image, style_image, model, cfg: StyleTransferConfig = StyleTransferConfig()) -> NstResult:
    """Gradient descent on the pixels of a base image initialized to the content image.

    ``trace`` holds L_total before every step and once after the last one;
    pixels are clamped to [0, 1] after each step.
    """
    _check_layers(model, cfg.content_layers + cfg.style_layers)
    content_image = np.asarray(content_image, dtype=np.float64)
    try:
        content_feats = _fixed_features(model, content_image, cfg.content_layers)
        style_feats = _fixed_features(model, np.asarray(style_image, dtype=np.float64), cfg.style_layers)
    except FloatingPointError as exc:
        raise NumericalError(f"style transfer diverged at iteration 0: {exc}", batch=0) from exc
    base = content_image.copy()
    trace, snapshots = [], []
    for it in range(cfg.iterations + 1):
        with Tape() as tape:
            x = tape.variable(base)
            try:
                loss = total_loss(model, x, content_feats, style_feats, cfg)
            except FloatingPointError as exc:
                raise NumericalError(f"style transfer diverged at iteration {it}: {exc}", batch=it) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"style transfer diverged at iteration {it}", batch=it)
            trace.append(value)
            if it == cfg.iterations:
                break
            (grad,) = ad.backward(loss, [x])
        base = np.clip(base - cfg.step_size * grad.data, 0.0, 1.0)
        if cfg.capture_every and (it + 1) % cfg.capture_every == 0:
            snapshots.append((it + 1, base.copy()))
    return NstResult(base, trace, snapshots)


def pseudo_label(scores, class_quota) -> np.ndarray:
    """Assign the lowest-scoring ``class_quota[0]`` samples to class 0 and the rest to class 1.

    Ties are ordered by position, so equal scores split by id order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n0, n1 = (int(q) for q in class_quota)
    if n0 < 0 or n1 < 0 or n0 + n1 != len(scores):
        raise ValueError(f"pseudo_label: quota {n0}/{n1} does not match {len(scores)} samples")
    order = np.argsort(scores, kind="stable")
    labels = np.ones(len(scores), dtype=int)
    labels[order[:n0]] = 0
    if 0 < n0 < len(scores) and scores[order[n0 - 1]] == scores[order[n0]]:
        log.warning("pseudo_label: tied scores at the threshold; split by id order")
    return labels


@dataclass
class StdaConfig:
    nst: StyleTransferConfig = field(default_factory=StyleTransferConfig)
    content_class: int = 0
    style_class: int = 1
    target_class: int = 1
    seed: int = 0


def stda_generate(dataset: Dataset, model, cfg: StdaConfig = StdaConfig(), pairs: int = 0) -> Dataset:
    """Synthesize ``pairs`` images by styling class-``content_class`` images with class-``style_class`` styles.

    Outputs are pseudo-labelled with equal class quotas from the model's
    target-class probability and tagged as training data.
    """
    if pairs < 0:
        raise ValueError("pairs must be >= 0")
    side = dataset.images.shape[-1] if len(dataset) else 32
    if pairs == 0:
        return Dataset.empty(side)
    contents = np.flatnonzero(dataset.labels == cfg.content_class)
    styles = np.flatnonzero(dataset.labels == cfg.style_class)
    if not len(contents) or not len(styles):
        raise ValueError("stda_generate: both content and style classes need samples")
    rng = np.random.default_rng(cfg.seed)
    ci = rng.choice(contents, pairs)
    si = rng.choice(styles, pairs)
    images = np.stack([nst_optimize(dataset.images[c], dataset.images[s], model, cfg.nst).image for c, s in zip(ci, si)])
    scores = predict_proba(model, images)[:, cfg.target_class]
    labels = pseudo_label(scores, (pairs // 2, pairs - pairs // 2))
    out = Dataset(
        images=images,
        labels=labels,
        ids=[f"stda{k:06d}" for k in range(pairs)],
        splits=["train"] * pairs,
        annotations={k: v[ci].copy() for k, v in dataset.annotations.items()},
        objects=dataset.objects[ci].copy(),
        provenance=[
            {"content_id": dataset.ids[c], "style_id": dataset.ids[s], "iterations": cfg.nst.iterations,
             "score": float(sc)}
            for c, s, sc in zip(ci, si, scores)
        ],
    )
    return out
