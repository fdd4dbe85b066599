"""FGSM on the full prompted pipeline and the conditional robustness protocol.

The attack surface is the downstream image in its native space; gradients
flow through resize, prompt application, the frozen model, loosening, and
mapping. Attacks run only on samples the pipeline classifies correctly
clean, which makes the adversarial-accuracy denominator the originally
correct count rather than the full set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledImageSet
from .errors import ConfigError, EmptyInput, NonFiniteGradient
from .metrics import MetricsRecord, record_from_counts


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    attack_surface: str = "downstream_image"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 0.5:
            raise ConfigError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if self.attack_surface != "downstream_image":
            raise ConfigError(f"unsupported attack_surface {self.attack_surface!r}")


def fgsm(pipeline, x: torch.Tensor, y: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """x_adv = clip_[0,1](x + eps * sign(dL/dx)); sign(0) = 0.

    `pipeline` is any differentiable image -> logits callable; the loss is
    cross-entropy on its output. Works on a batch (N, C, h, w) or single image.
    """
    single = x.dim() == 3
    if single:
        x, y = x.unsqueeze(0), y.reshape(1)
    xa = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(pipeline(xa), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, xa)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("FGSM input gradient is not finite")
    adv = (x.detach() + config.epsilon * torch.sign(grad)).clamp(0.0, 1.0)
    return adv[0] if single else adv


def _batched_predictions(pipeline, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    preds = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            preds.append(pipeline(images[start:start + batch_size]).argmax(dim=1))
    return torch.cat(preds) if preds else torch.empty(0, dtype=torch.long)


def evaluate_robustness(
    pipeline,
    dataset: LabeledImageSet,
    config: AttackConfig,
    *,
    batch_size: int = 256,
    meta: dict | None = None,
) -> MetricsRecord:
    """Std Acc over all samples, Adv Acc over the originally-correct ones.

    orig_correct = 0 yields an undefined (None) adversarial accuracy rather
    than an exception; the counts in the record keep the 0/0 case auditable.
    """
    if len(dataset) == 0:
        raise EmptyInput("evaluation needs a non-empty dataset")
    images = torch.from_numpy(np.ascontiguousarray(dataset.images))
    labels = torch.from_numpy(np.ascontiguousarray(dataset.labels))

    clean_preds = _batched_predictions(pipeline, images, batch_size)
    correct_mask = clean_preds == labels
    orig_correct = int(correct_mask.sum())

    adv_correct = 0
    if orig_correct > 0:
        keep = torch.nonzero(correct_mask, as_tuple=True)[0]
        for start in range(0, keep.shape[0], batch_size):
            idx = keep[start:start + batch_size]
            x_adv = fgsm(pipeline, images[idx], labels[idx], config)
            with torch.no_grad():
                adv_preds = pipeline(x_adv).argmax(dim=1)
            adv_correct += int((adv_preds == labels[idx]).sum())

    return record_from_counts(
        all_count=len(dataset),
        orig_correct=orig_correct,
        adv_correct=adv_correct,
        epsilon=config.epsilon,
        **(meta or {}),
    )
