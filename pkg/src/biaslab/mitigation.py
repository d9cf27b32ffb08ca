"""Bias mitigation: targeted data augmentation and attribution-feedback fine-tuning."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attribution import saliency_tensor
from .autodiff import Tensor
from .cbi import BiasTransform, apply_transform, make_stamp_bank, run_cbi
from .model import (
    NumericalError,
    TrainConfig,
    TrainResult,
    TinyCnn,
    augment_seed,
    batch_schedule,
    cross_entropy,
    evaluate,
    one_hot,
    sgd_step,
    train,
)

log = logging.getLogger(__name__)

__all__ = [
    "AugmentationPolicy",
    "apply_policy",
    "policy_for",
    "stamp_banks",
    "tda_train",
    "tda_evaluate",
    "tda_sweep",
    "sweep_to_csv",
    "attribution_loss",
    "FeedbackConfig",
    "feedback_finetune",
    "mean_attribution_loss",
]

# hair/ruler insertion runs as one step before frames
_STEP = {"hair": 0, "ruler": 0, "hair_ruler": 0, "circle": 1, "cover_object": 1, "frame": 2, "identity": 3}

_BANK_SEEDS = {"train": 7001, "test": 9001}


def stamp_banks(side: int, role: str = "train"):
    """Hair and ruler banks for augmentation (``train``) or evaluation (``test``); the two never share stamps."""
    base = _BANK_SEEDS[role]
    return make_stamp_bank("hair", side, seed=base), make_stamp_bank("ruler", side, seed=base + 1)


@dataclass
class AugmentationPolicy:
    entries: list[tuple[BiasTransform, float]] = field(default_factory=list)

    def __post_init__(self):
        for t, p in self.entries:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"policy probability {p} outside [0, 1]")
        self.entries = sorted(self.entries, key=lambda e: _STEP[e[0].kind])

    def describe(self) -> list[dict]:
        return [{"transform": t.describe(), "p": p} for t, p in self.entries]


def apply_policy(image, policy: AugmentationPolicy, seed) -> np.ndarray:
    """Fire each entry independently with its probability; compose fired transforms in policy order."""
    rng = np.random.default_rng(seed)
    out = np.array(image, dtype=np.float64)
    for transform, p in policy.entries:
        fire = rng.random() < p
        child = int(rng.integers(1 << 62))
        if fire:
            out = transform(out, child)
    return out


def policy_for(kind: str, p: float, side: int = 32, seed: int = 0) -> AugmentationPolicy:
    hair, ruler = stamp_banks(side, "train")
    return AugmentationPolicy([(BiasTransform(kind, seed=seed, hair_bank=hair, ruler_bank=ruler), p)])


def tda_train(model, dataset, policy: AugmentationPolicy, cfg: TrainConfig) -> TrainResult:
    """Plain training with the policy applied per sample and epoch."""
    return train(model, dataset, cfg, augment=lambda img, s: apply_policy(img, policy, s))


def _positive_f1(report) -> float:
    return report.f1[1] if len(report.f1) > 1 else report.f1[0]


class _Biased:
    def __init__(self, images, labels):
        self.images, self.labels = images, labels


def tda_evaluate(model, test_set, kind: str, seed: int = 0) -> dict:
    """F1 of the positive class on clean and artifact-inserted test copies, plus the CBI summary."""
    side = test_set.images.shape[-1]
    hair, ruler = stamp_banks(side, "test")
    transform = BiasTransform(kind, seed=seed, hair_bank=hair, ruler_bank=ruler)
    f1_org = _positive_f1(evaluate(model, test_set))
    anns = test_set.annotation_records() if kind == "cover_object" else None
    biased = apply_transform(transform, test_set.images, test_set.ids, anns, seed)
    f1_aug = _positive_f1(evaluate(model, _Biased(biased, test_set.labels)))
    cbi = run_cbi(model, test_set, transform, seed=seed)
    return {
        "f1_org": f1_org,
        "f1_aug": f1_aug,
        "f1_mean": (f1_org + f1_aug) / 2,
        "switched": cbi.switched_total,
        "mean_change": cbi.mean_change,
        "median_change": cbi.median_change,
        "switched_by_direction": dict(sorted(cbi.switched_by_direction.items())),
    }


def tda_sweep(train_set, test_set, kind: str, ps: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
              seeds: Sequence[int] = (0,), cfg: TrainConfig = TrainConfig(), side: int | None = None,
              cache: dict | None = None) -> list[dict]:
    """One row per (p, seed): train with the policy, then evaluate on clean and biased test copies.

    ``cache`` maps seeds to already trained p=0 models (p=0 is plain training).
    """
    side = side or train_set.images.shape[-1]
    rows = []
    for seed in seeds:
        run_cfg = TrainConfig(cfg.epochs, cfg.learning_rate, cfg.batch_size, seed, cfg.lr_decay)
        for p in ps:
            if p == 0 and cache is not None and seed in cache:
                model = cache[seed]
            else:
                model = tda_train(TinyCnn(side=side, seed=seed), train_set, policy_for(kind, p, side, seed), run_cfg).model
            row = {"policy": kind, "p": p, "seed": seed}
            row.update(tda_evaluate(model, test_set, kind, seed=seed))
            rows.append(row)
            log.info("tda %s p=%.2f seed=%d f1_mean=%.4f switched=%d", kind, p, seed, row["f1_mean"], row["switched"])
    return rows


SWEEP_COLUMNS = ("policy", "p", "seed", "f1_org", "f1_aug", "f1_mean", "switched", "mean_change", "median_change",
                 "switched_by_direction")


def sweep_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        values = []
        for c in SWEEP_COLUMNS:
            v = r[c]
            if c == "switched_by_direction":
                v = ";".join(f"{k}:{n}" for k, n in sorted(v.items()))
            elif isinstance(v, float):
                v = repr(v)
            values.append(v)
        writer.writerow(values)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# attribution feedback
# ---------------------------------------------------------------------------


def attribution_loss(map_original, map_biased) -> Tensor:
    """Mean squared difference over pixels and batch."""
    a = ad.as_tensor(getattr(map_original, "signed", map_original))
    b = ad.as_tensor(getattr(map_biased, "signed", map_biased))
    if a.shape != b.shape:
        raise ad.ShapeError(f"attribution_loss: shapes {a.shape} and {b.shape} differ")
    return ad.mean(ad.square(ad.sub(b, a)))


@dataclass
class FeedbackConfig:
    alpha: float = 0.5
    epochs: int = 2
    learning_rate: float = 0.005
    batch_size: int = 32
    seed: int = 0
    transform: BiasTransform = field(default_factory=lambda: BiasTransform("frame"))
    # the classification term sees the artifact-inserted copies, as the fine-tuning
    # pipeline inserts the artifact into every sample
    classify_biased: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("epochs, learning_rate and batch_size must be positive")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.seed, lr_decay=1.0)


def _feedback_loss(model, clean, biased, labels, alpha, classify_biased=False):
    y = one_hot(labels, model.num_classes)
    cls_inputs = biased if classify_biased else clean
    reference = saliency_tensor(model, clean, labels).data if alpha > 0 else None

    def loss_fn(params):
        parts = []
        if alpha < 1:
            l_cls = cross_entropy(ad.softmax(model.forward(cls_inputs, params)), y)
            parts.append(l_cls if alpha == 0 else ad.mul(l_cls, 1.0 - alpha))
        if alpha > 0:
            r_hat = saliency_tensor(model, biased, labels, params=params, create_graph=True)
            l_atr = attribution_loss(reference, r_hat)
            parts.append(l_atr if alpha == 1 else ad.mul(l_atr, alpha))
        return parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])

    return loss_fn


def feedback_finetune(model, dataset, cfg: FeedbackConfig = FeedbackConfig()) -> TrainResult:
    """Fine-tune with (1 - alpha) * L_cls + alpha * L_atr(clean saliency, biased saliency).

    L_cls is taken on the biased copies when ``cfg.classify_biased`` is set,
    otherwise on the clean inputs. The clean saliency is a fixed target;
    gradients flow through the biased saliency by double backpropagation.
    The learning rate is constant.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=int)
    if len(images) == 0:
        raise ValueError("feedback_finetune: empty dataset")
    model = model.copy()
    tcfg = cfg.train_config()
    history, losses, current, updates = [], [], 0, 0
    for epoch, b, lr, idx in batch_schedule(len(images), tcfg):
        if epoch != current:
            history.append(float(np.mean(losses)))
            losses, current = [], epoch
        clean = images[idx]
        biased = clean
        if cfg.alpha > 0 or cfg.classify_biased:
            biased = np.stack([cfg.transform(img, augment_seed(cfg.seed, epoch, int(i))) for img, i in zip(clean, idx)])
        try:
            value = sgd_step(model, _feedback_loss(model, clean, biased, labels[idx], cfg.alpha, cfg.classify_biased), lr)
        except FloatingPointError as exc:
            raise NumericalError(f"fine-tuning diverged at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
        if not math.isfinite(value):
            raise NumericalError(f"fine-tuning diverged at epoch {epoch}, batch {b}", epoch, b)
        losses.append(value)
        updates += 1
    history.append(float(np.mean(losses)))
    return TrainResult(model, history, updates)


def mean_attribution_loss(model, dataset, transform: BiasTransform, seed: int = 0) -> float:
    """Held-out L_atr between clean and artifact-inserted saliency maps."""
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=int)
    biased = apply_transform(transform, images, dataset.ids, None, seed)
    clean_map = saliency_tensor(model, images, labels).data
    biased_map = saliency_tensor(model, biased, labels).data
    return float(np.mean((clean_map - biased_map) ** 2))
