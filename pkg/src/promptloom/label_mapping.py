"""Injective maps from downstream classes to source output indices.

Two strategies:
  RLM - one uniformly random injective map, fixed before training.
  ILM - re-derived during training from a frequency matrix of argmax
        predictions, via a deterministic greedy matcher (optimal bipartite
        matching available as a non-default method; greedy is not optimal in
        general).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InfeasibleMapping, ShapeMismatch


@dataclass
class LabelMapping:
    d: int  # dimension being mapped from (n, or the loosened dimension)
    k: int  # downstream class count
    assign: np.ndarray  # (k,) distinct ints in [0, d)
    strategy: str  # "RLM" | "ILM"
    epoch_created: int = 0

    def __post_init__(self):
        self.assign = np.asarray(self.assign, dtype=np.int64)
        if self.assign.shape != (self.k,):
            raise ShapeMismatch(f"assign must have length k={self.k}")
        if len(set(self.assign.tolist())) != self.k:
            raise InfeasibleMapping("assign is not injective")
        if self.assign.min() < 0 or self.assign.max() >= self.d:
            raise InfeasibleMapping(f"assign entries must lie in [0, {self.d})")

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "epoch": self.epoch_created,
            "assign": self.assign.tolist(),
        }


@dataclass
class FrequencyMatrix:
    """counts[j][i] = class-j training samples whose argmax output index was i."""

    counts: np.ndarray  # (k, d) non-negative ints

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ShapeMismatch(f"counts must be 2-D, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ShapeMismatch("counts must be non-negative")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def d(self) -> int:
        return self.counts.shape[1]


def random_mapping(d: int, k: int, seed: int) -> LabelMapping:
    """Uniformly random injective map (seeded, fixed thereafter)."""
    if d < k:
        raise InfeasibleMapping(f"cannot map {k} classes into {d} indices")
    rng = np.random.default_rng(seed)
    assign = rng.permutation(d)[:k]
    return LabelMapping(d=d, k=k, assign=assign, strategy="RLM", epoch_created=0)


def ilm_update(freq: FrequencyMatrix, *, method: str = "greedy", epoch: int = 0) -> LabelMapping:
    """Derive a mapping from prediction frequencies.

    Greedy: repeatedly take the largest remaining counts[j][i] over unassigned
    classes j and unused indices i (ties: smaller j, then smaller i). Classes
    whose remaining row is all zeros get the smallest unused indices in class
    order.
    """
    k, d = freq.k, freq.d
    if d < k:
        raise InfeasibleMapping(f"cannot map {k} classes into {d} indices")
    if method == "optimal":
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(freq.counts, maximize=True)
        assign = np.zeros(k, dtype=np.int64)
        assign[rows] = cols
        return LabelMapping(d=d, k=k, assign=assign, strategy="ILM", epoch_created=epoch)
    if method != "greedy":
        raise ValueError(f"unknown ilm method {method!r}")

    counts = freq.counts
    j_idx, i_idx = np.unravel_index(np.arange(k * d), (k, d))
    order = np.lexsort((i_idx, j_idx, -counts.ravel()))
    assign = np.full(k, -1, dtype=np.int64)
    used = np.zeros(d, dtype=bool)
    remaining = k
    for flat in order:
        if remaining == 0 or counts.ravel()[flat] == 0:
            break
        j, i = int(j_idx[flat]), int(i_idx[flat])
        if assign[j] >= 0 or used[i]:
            continue
        assign[j] = i
        used[i] = True
        remaining -= 1
    free = iter(np.flatnonzero(~used))
    for j in range(k):
        if assign[j] < 0:
            assign[j] = next(free)
    return LabelMapping(d=d, k=k, assign=assign, strategy="ILM", epoch_created=epoch)


def apply_mapping(vec, mapping: LabelMapping):
    """Gather mapped entries: out[..., j] = vec[..., assign[j]].

    Accepts numpy arrays or torch tensors with trailing dimension mapping.d;
    the torch path keeps autograd intact.
    """
    if isinstance(vec, torch.Tensor):
        if vec.shape[-1] != mapping.d:
            raise ShapeMismatch(f"vector dim {vec.shape[-1]} != mapping.d={mapping.d}")
        idx = torch.from_numpy(mapping.assign)
        return vec.index_select(-1, idx)
    arr = np.asarray(vec)
    if arr.shape[-1] != mapping.d:
        raise ShapeMismatch(f"vector dim {arr.shape[-1]} != mapping.d={mapping.d}")
    return np.take(arr, mapping.assign, axis=-1)
