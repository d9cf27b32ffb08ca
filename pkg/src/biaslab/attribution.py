"""Local explanations (saliency, occlusion, LRP-epsilon) and explanation-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import Conv2d, Dense, Flatten, MaxPool2x2, ReLU

__all__ = [
    "AttributionMap",
    "LrpConfig",
    "PerturbationSpec",
    "saliency",
    "signed_saliency",
    "saliency_tensor",
    "occlusion",
    "lrp_epsilon",
    "max_sensitivity",
    "infidelity",
    "model_contrast_score",
    "input_dependence_rate",
]


@dataclass
class AttributionMap:
    """Per-pixel relevance for one prediction.

    ``values`` is non-negative; ``signed`` keeps the pre-absolute map when
    the generator produces one.
    """

    values: np.ndarray
    target_class: int
    source_image_id: str | None = None
    signed: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution map has non-finite values")
        if self.signed is None:
            self.signed = self.values

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LrpConfig:
    epsilon: float = 1e-6
    gamma: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


PERTURBATION_KINDS = ("noisy_baseline", "square_removal", "subset_baseline")


@dataclass(frozen=True)
class PerturbationSpec:
    """Perturbation distribution for infidelity.

    noisy_baseline: I ~ N(0, sigma^2) per pixel.
    square_removal: I equals x inside a random ``square`` x ``square`` window.
    subset_baseline: I = (x - baseline) on a random pixel subset of size ``fraction``.
    """

    kind: str = "noisy_baseline"
    sigma: float = 0.1
    square: int = 4
    fraction: float = 0.25
    baseline: float | np.ndarray = 0.0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.sigma <= 0 or self.square < 1 or not 0 < self.fraction <= 1:
            raise ValueError("perturbation parameters must be positive")

    def sample(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = image.shape
        if self.kind == "noisy_baseline":
            return rng.normal(0.0, self.sigma, image.shape)
        if self.kind == "square_removal":
            s = min(self.square, h, w)
            i, j = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
            out = np.zeros_like(image)
            out[i : i + s, j : j + s] = image[i : i + s, j : j + s]
            return out
        mask = np.zeros(image.size, dtype=bool)
        mask[rng.choice(image.size, max(1, int(round(self.fraction * image.size))), replace=False)] = True
        return np.where(mask.reshape(image.shape), image - self.baseline, 0.0)


# ---------------------------------------------------------------------------
# model plumbing
# ---------------------------------------------------------------------------


def _logits(model, x, params=None) -> Tensor:
    """Logits (N, m) for a batch tensor (N, H, W); plain callables are accepted too."""
    if hasattr(model, "forward"):
        return model.forward(x, params) if params is not None else model.forward(x)
    return model(x)


def _batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images[None] if images.ndim == 2 else images


def _target_scores(model, images, target) -> np.ndarray:
    with ad.no_record():
        logits = _logits(model, Tensor(_batch(images))).data
    return logits[:, target] if np.ndim(target) == 0 else logits[np.arange(len(logits)), target]


def predicted_class(model, image) -> int:
    with ad.no_record():
        return int(np.argmax(_logits(model, Tensor(_batch(image))).data[0]))


def saliency_tensor(model, images, targets, params=None, create_graph: bool = False) -> Tensor:
    """Signed gradient of each image's target logit with respect to its pixels.

    Under ``create_graph`` the result stays on the active tape and can be
    differentiated with respect to ``params``.
    """
    images = _batch(images)
    targets = np.broadcast_to(np.asarray(targets, dtype=int), (len(images),))
    outer = ad._recording()
    tape = outer if (create_graph and outer is not None) else Tape()
    with tape:
        x = tape.variable(images)
        logits = _logits(model, x, params)
        select = np.zeros(logits.shape)
        select[np.arange(len(images)), targets] = 1.0
        score = ad.tsum(ad.mul(logits, select))
        (grad,) = ad.backward(score, [x], create_graph=create_graph)
    return grad


def signed_saliency(model, image, target_class: int | None = None) -> np.ndarray:
    if target_class is None:
        target_class = predicted_class(model, image)
    return saliency_tensor(model, image, target_class).data[0].copy()


def saliency(model, image, target_class: int | None = None, image_id: str | None = None) -> AttributionMap:
    """|d logit_target / d pixel| with the signed map retained."""
    if target_class is None:
        target_class = predicted_class(model, image)
    signed = signed_saliency(model, image, target_class)
    return AttributionMap(np.abs(signed), target_class, image_id, signed)


def occlusion(model, image, target_class: int | None = None, patch_side: int = 4, stride: int = 2,
              image_id: str | None = None) -> AttributionMap:
    """Drop in target logit when a square patch is zeroed, averaged over covering patches."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if patch_side < 1 or patch_side > min(h, w):
        raise ValueError("patch_side must lie in [1, image side]")
    if stride < 1 or stride > patch_side:
        raise ValueError("stride must lie in [1, patch_side] to cover every pixel")
    if target_class is None:
        target_class = predicted_class(model, image)

    def starts(n):
        s = list(range(0, n - patch_side + 1, stride))
        return s if s[-1] == n - patch_side else s + [n - patch_side]

    windows = [(i, j) for i in starts(h) for j in starts(w)]
    batch = np.repeat(image[None], len(windows), axis=0)
    for k, (i, j) in enumerate(windows):
        batch[k, i : i + patch_side, j : j + patch_side] = 0.0
    base = _target_scores(model, image, target_class)[0]
    drops = base - _target_scores(model, batch, target_class)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for d, (i, j) in zip(drops, windows):
        total[i : i + patch_side, j : j + patch_side] += d
        count[i : i + patch_side, j : j + patch_side] += 1
    signed = total / count
    return AttributionMap(np.abs(signed), target_class, image_id, signed)



# ---------------------------------------------------------------------------
# LRP
# ---------------------------------------------------------------------------


def _stabilize(z, eps):
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _linear_backmap(forward: Callable[[Tensor], Tensor], a: np.ndarray, s: np.ndarray) -> np.ndarray:
    """c_j = sum_k w_jk s_k, computed as the input gradient of <forward(a), s>."""
    with Tape() as tape:
        x = tape.variable(a)
        (c,) = ad.backward(ad.tsum(ad.mul(forward(x), s)), [x])
    return c.data


def lrp_epsilon(model, image, target_class: int | None = None, cfg: LrpConfig = LrpConfig(),
                image_id: str | None = None) -> AttributionMap:
    """Epsilon-rule relevance propagation from the target logit to the pixels.

    Linear layers use R_j = a_j * sum_k rho(w_jk) R_k / (z_k + eps*sign(z_k))
    with z_k = sum_j a_j rho(w_jk) and rho(w) = w + gamma*max(0, w).
    Max-pooling passes relevance to the window winner.
    """
    image = np.asarray(image, dtype=np.float64)
    if target_class is None:
        target_class = predicted_class(model, image)
    params = model.params
    with ad.no_record():
        h = model._inputs(Tensor(image[None]))
        inputs = []
        for layer in model.layers:
            inputs.append(h.data)
            h = layer(h, params)
        logits = h.data
    relevance = np.zeros_like(logits)
    relevance[0, target_class] = logits[0, target_class]

    def rho(w):
        return w + cfg.gamma * np.maximum(w, 0.0)

    for layer, a in zip(reversed(model.layers), reversed(inputs)):
        if isinstance(layer, (Conv2d, Dense)):
            w = rho(params[layer.param_names[0]])
            if isinstance(layer, Conv2d):
                fwd = lambda x, w=w: ad.conv2d(x, w)  # noqa: E731
            else:
                fwd = lambda x, w=w: ad.matmul(x, w)  # noqa: E731
            with ad.no_record():
                z = fwd(Tensor(a)).data
            s = relevance / _stabilize(z, cfg.epsilon)
            relevance = a * _linear_backmap(fwd, a, s)
        elif isinstance(layer, MaxPool2x2):
            with Tape() as tape:
                x = tape.variable(a)
                (routed,) = ad.backward(ad.tsum(ad.mul(ad.maxpool2x2(x), relevance)), [x])
            relevance = routed.data
        elif isinstance(layer, Flatten):
            relevance = relevance.reshape(a.shape)
        elif isinstance(layer, ReLU):
            continue
        else:
            raise TypeError(f"lrp_epsilon: unsupported layer {type(layer).__name__}")
    signed = relevance.reshape(image.shape)
    return AttributionMap(np.abs(signed), target_class, image_id, signed)


# ---------------------------------------------------------------------------
# explanation quality
# ---------------------------------------------------------------------------


def _as_array(explanation, signed: bool = False) -> np.ndarray:
    if isinstance(explanation, AttributionMap):
        return explanation.signed if signed else explanation.values
    return np.asarray(explanation, dtype=np.float64)


def max_sensitivity(explainer, model, image, radius: float = 0.05, samples: int = 10, seed: int = 0) -> float:
    """Monte-Carlo max of ||phi(y) - phi(x)||_2 over y = clip(x + U(-r, r), 0, 1)."""
    if radius <= 0 or samples < 1:
        raise ValueError("radius must be positive and samples >= 1")
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ref = _as_array(explainer(model, image))
    worst = 0.0
    for _ in range(samples):
        y = np.clip(image + rng.uniform(-radius, radius, image.shape), 0.0, 1.0)
        worst = max(worst, float(np.linalg.norm(_as_array(explainer(model, y)) - ref)))
    return worst


def infidelity(explainer, model, image, spec: PerturbationSpec = PerturbationSpec(), samples: int = 100,
               seed: int = 0, target_class: int | None = None) -> float:
    """Monte-Carlo E[(I^T phi - (f(x) - f(x - I)))^2] with f the target logit.

    ``explainer(model, image, target_class)`` supplies phi; its signed map is used.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if target_class is None:
        target_class = predicted_class(model, image)
    phi = _as_array(explainer(model, image, target_class), signed=True)
    rng = np.random.default_rng(seed)
    perturbations = np.stack([spec.sample(image, rng) for _ in range(samples)])
    fx = _target_scores(model, image, target_class)[0]
    fpert = _target_scores(model, image[None] - perturbations, target_class)
    dots = np.einsum("nij,ij->n", perturbations, phi)
    return float(np.mean((dots - (fx - fpert)) ** 2))


def _correct(model, images, labels) -> np.ndarray:
    with ad.no_record():
        pred = np.argmax(_logits(model, Tensor(_batch(images))).data, axis=1)
    return pred == np.asarray(labels, dtype=int)


def model_contrast_score(attr_fn, model_a, model_b, concept_mask, images, labels) -> float:
    """Difference of mean attribution mass inside ``concept_mask`` between two models.

    Only images that both models classify correctly take part.
    """
    images = _batch(images)
    labels = np.asarray(labels, dtype=int)
    mask = np.asarray(concept_mask, dtype=bool)
    keep = _correct(model_a, images, labels) & _correct(model_b, images, labels)
    if not keep.any():
        raise ValueError("model_contrast_score: no image is correctly classified by both models")

    def mass(model):
        return float(np.mean([_as_array(attr_fn(model, img, int(y)))[mask].sum()
                              for img, y in zip(images[keep], labels[keep])]))

    return mass(model_a) - mass(model_b)


def input_dependence_rate(attr_fn, model, pairs: Sequence, cf_mask, labels=None) -> float:
    """Share of correctly classified pairs whose common-feature attribution drops when the feature is present.

    ``pairs`` holds (with_cf, without_cf) images; ``labels`` (optional) are
    the true classes used for the correctness filter.
    """
    if not len(pairs):
        return 0.0
    mask = np.asarray(cf_mask, dtype=bool)
    with_cf = np.stack([p[0] for p in pairs])
    without_cf = np.stack([p[1] for p in pairs])
    if labels is None:
        keep = np.ones(len(pairs), dtype=bool)
    else:
        keep = _correct(model, with_cf, labels) & _correct(model, without_cf, labels)
    if not keep.any():
        return 0.0
    hits = 0
    for k in np.flatnonzero(keep):
        target = None if labels is None else int(labels[k])
        a = _as_array(attr_fn(model, with_cf[k], target))[mask].mean()
        b = _as_array(attr_fn(model, without_cf[k], target))[mask].mean()
        hits += int(a < b)
    return hits / int(keep.sum())
