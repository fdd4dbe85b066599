"""Output-boundary loosening: pool source logits into blocks, keep per-block maxima.

The loosening factor T is the BLOCK SIZE: n logits collapse to ceil(n/T)
block maxima, and label mapping then runs over that smaller vector. The
alternative reading (T = number of blocks) is available behind
t_is_block_count for study; it is infeasible for most practical
(n, T, k) combinations and is not the default.

Blocks are contiguous index runs; permute=True first applies one seeded
permutation of the n indices, fixed for the lifetime of a run.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ConfigError, InfeasibleMapping, ShapeMismatch
from .label_mapping import LabelMapping, apply_mapping
from .models import SourceModel, forward
from .prompts import PromptParams, apply_prompt


@dataclass(frozen=True)
class LooseningConfig:
    T: int
    n: int
    permute: bool = False
    permutation_seed: int = 0
    t_is_block_count: bool = False

    def __post_init__(self):
        if not 1 <= self.T <= self.n:
            raise ConfigError(f"T must lie in [1, n={self.n}], got {self.T}")

    @property
    def d_I(self) -> int:
        """Dimension of the pooled intermediate vector."""
        if self.t_is_block_count:
            return self.T
        return -(-self.n // self.T)

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "n": self.n,
            "permute": self.permute,
            "permutation_seed": self.permutation_seed,
            "t_is_block_count": self.t_is_block_count,
            "d_I": self.d_I,
        }


@dataclass
class IntermediateVector:
    values: np.ndarray  # (d_I,)
    block_index_map: list[np.ndarray]  # block i holds the original indices pooled into I[i]


def make_blocks(config: LooseningConfig) -> list[np.ndarray]:
    """Partition {0..n-1} into the pooled index blocks (fixed per config)."""
    n, T = config.n, config.T
    order = np.arange(n)
    if config.permute:
        order = np.random.default_rng(config.permutation_seed).permutation(n)
    if config.t_is_block_count:
        q, r = divmod(n, T)
        sizes = [q + 1] * r + [q] * (T - r)
    else:
        sizes = [T] * (n // T)
        if n % T:
            sizes.append(n % T)
    blocks, start = [], 0
    for size in sizes:
        blocks.append(order[start:start + size].copy())
        start += size
    return blocks


def loosen(V, config: LooseningConfig) -> IntermediateVector:
    """Pool one n-dim vector to its per-block maxima."""
    V = np.asarray(V)
    if V.shape != (config.n,):
        raise ShapeMismatch(f"V must have shape ({config.n},), got {V.shape}")
    blocks = make_blocks(config)
    values = np.array([V[block].max() for block in blocks], dtype=V.dtype)
    return IntermediateVector(values=values, block_index_map=blocks)


@lru_cache(maxsize=64)
def _gather_plan(config: LooseningConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """(d_I, T_max) index matrix (-1 padded) plus its validity mask."""
    blocks = make_blocks(config)
    t_max = max(len(b) for b in blocks)
    idx = np.full((len(blocks), t_max), -1, dtype=np.int64)
    for i, block in enumerate(blocks):
        idx[i, :len(block)] = block
    index = torch.from_numpy(idx)
    return index, index >= 0


def loosen_tensor(V: torch.Tensor, config: LooseningConfig) -> torch.Tensor:
    """Differentiable block-max over the trailing dim: (..., n) -> (..., d_I).

    Gradient of each max is routed to the lowest-index maximizer within its
    block (deterministic tie-break).
    """
    if V.shape[-1] != config.n:
        raise ShapeMismatch(f"trailing dim {V.shape[-1]} != n={config.n}")
    index, valid = _gather_plan(config)
    gathered = V[..., index.clamp(min=0)]
    neg_inf = torch.tensor(float("-inf"), dtype=V.dtype)
    gathered = torch.where(valid, gathered, neg_inf)
    max_vals = gathered.detach().max(dim=-1, keepdim=True).values
    t_max = index.shape[1]
    positions = torch.arange(t_max)
    first = torch.where(gathered.detach() == max_vals, positions, t_max).min(dim=-1).values
    return gathered.gather(-1, first.unsqueeze(-1)).squeeze(-1)


def check_feasible(config: LooseningConfig, k: int) -> None:
    if config.d_I < k:
        raise InfeasibleMapping(
            f"T={config.T} pools n={config.n} logits to {config.d_I} < k={k} classes"
        )


def loosened_forward(
    model: SourceModel,
    prompt: PromptParams,
    image: torch.Tensor,
    config: LooseningConfig,
    mapping: LabelMapping,
) -> torch.Tensor:
    """Mapped, loosened logits for a batch of downstream images."""
    if config.n != model.n:
        raise ShapeMismatch(f"loosening n={config.n} != model outputs {model.n}")
    check_feasible(config, mapping.k)
    if mapping.d != config.d_I:
        raise ShapeMismatch(f"mapping.d={mapping.d} != pooled dim {config.d_I}")
    pooled = loosen_tensor(forward(model, apply_prompt(prompt, image)), config)
    return apply_mapping(pooled, mapping)
