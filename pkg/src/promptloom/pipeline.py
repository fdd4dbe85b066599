"""The deployed decision function: prompt -> frozen model -> loosening -> mapping.

A PromptPipeline is the differentiable image-to-k-logits function that
training optimizes and that the attacker differentiates through (including
the block-max, which is part of the deployed pipeline).
"""

from __future__ import annotations

import torch

from .errors import ShapeMismatch
from .label_mapping import LabelMapping, apply_mapping
from .models import SourceModel, forward
from .pbl import LooseningConfig, check_feasible, loosen_tensor
from .prompts import PromptParams, apply_prompt


class PromptPipeline:
    def __init__(
        self,
        model: SourceModel,
        prompt: PromptParams,
        mapping: LabelMapping,
        loosening: LooseningConfig | None = None,
    ):
        if loosening is not None:
            if loosening.n != model.n:
                raise ShapeMismatch(f"loosening n={loosening.n} != model outputs {model.n}")
            check_feasible(loosening, mapping.k)
        mapped_from = loosening.d_I if loosening is not None else model.n
        if mapping.d != mapped_from:
            raise ShapeMismatch(f"mapping.d={mapping.d} != pipeline output dim {mapped_from}")
        self.model = model
        self.prompt = prompt
        self.mapping = mapping
        self.loosening = loosening

    @property
    def k(self) -> int:
        return self.mapping.k

    def unmapped_logits(self, image: torch.Tensor) -> torch.Tensor:
        """Logits before label mapping: n-dim, or d_I-dim when loosening is on."""
        logits = forward(self.model, apply_prompt(self.prompt, image))
        if self.loosening is not None:
            logits = loosen_tensor(logits, self.loosening)
        return logits

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return apply_mapping(self.unmapped_logits(image), self.mapping)

    def with_mapping(self, mapping: LabelMapping) -> "PromptPipeline":
        return PromptPipeline(self.model, self.prompt, mapping, self.loosening)
