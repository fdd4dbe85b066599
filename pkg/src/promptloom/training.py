"""Prompt training against a frozen source model, with dynamics logging.

Only the prompt values receive gradient updates; the source parameters are
frozen and byte-identical before and after a run. Per-epoch dynamics split
into two streams when a run directory is given:

    dynamics.jsonl   deterministic quantities (loss, confidence, accuracies,
                     mapping snapshot) - two runs with the same config and
                     seed produce byte-identical files
    timing.jsonl     wall time, attack time, peak memory (never deterministic)

Mapping snapshots also stream to mapping_history.jsonl, one line per epoch.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import psutil
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, fgsm
from .data import DatasetManifest, load_dataset
from .errors import ConfigError, InfeasibleMapping, NonFiniteLoss
from .label_mapping import FrequencyMatrix, LabelMapping, apply_mapping, ilm_update, random_mapping
from .metrics import json_17g
from .models import SourceModel, state_checksum
from .pbl import LooseningConfig
from .pipeline import PromptPipeline
from .prompts import PromptParams, default_pad_width, init_prompt, save_prompt

_SHUFFLE_SALT = 0x10057


@dataclass
class VPTrainConfig:
    epochs: int
    learning_rate: float = 0.1
    batch_size: int = 64
    seed: int = 0
    lm_strategy: str = "ILM"
    ilm_cadence: str = "per_epoch"
    ilm_method: str = "greedy"
    loosening: LooseningConfig | None = None
    adversarial: bool = False
    at_epsilon: float = 0.0
    prompt_mode: str = "pad"
    pad_width: int | None = None
    prompt_init: str = "zeros"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        # learning_rate 0 is allowed: it pins the prompt, which the
        # constant-loss dynamics property relies on
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lm_strategy not in ("RLM", "ILM"):
            raise ConfigError(f"lm_strategy must be RLM or ILM, got {self.lm_strategy!r}")
        if self.ilm_cadence not in ("per_epoch", "per_batch"):
            raise ConfigError(f"ilm_cadence must be per_epoch or per_batch, got {self.ilm_cadence!r}")
        if not 0.0 <= self.at_epsilon <= 0.5:
            raise ConfigError(f"at_epsilon must lie in [0, 0.5], got {self.at_epsilon}")

    def to_json(self) -> dict:
        doc = {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "lm_strategy": self.lm_strategy,
            "ilm_cadence": self.ilm_cadence,
            "ilm_method": self.ilm_method,
            "loosening": self.loosening.to_json() if self.loosening else None,
            "adversarial": self.adversarial,
            "at_epsilon": self.at_epsilon,
            "prompt_mode": self.prompt_mode,
            "pad_width": self.pad_width,
            "prompt_init": self.prompt_init,
        }
        return doc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    mean_confidence: float
    train_std_acc: float
    test_std_acc: float
    wall_time_s: float
    attack_time_s: float
    peak_memory_bytes: int
    mapping: dict  # snapshot of the mapping used during this epoch

    def dynamics_line(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "mean_confidence": self.mean_confidence,
            "train_std_acc": self.train_std_acc,
            "test_std_acc": self.test_std_acc,
            "mapping": self.mapping,
        }

    def timing_line(self, method: str) -> dict:
        return {
            "epoch": self.epoch,
            "wall_time_s": self.wall_time_s,
            "attack_time_s": self.attack_time_s,
            "peak_memory_bytes": self.peak_memory_bytes,
            "peak_memory_method": method,
        }


@dataclass
class DynamicsLog:
    lm_strategy: str
    seed: int
    loosening: dict | None
    adversarial: bool
    peak_memory_method: str
    epochs: list[EpochRecord] = field(default_factory=list)
    final_mapping: LabelMapping | None = None

    @property
    def total_wall_time_s(self) -> float:
        return sum(r.wall_time_s for r in self.epochs)

    @property
    def mean_epoch_time_s(self) -> float:
        return self.total_wall_time_s / max(len(self.epochs), 1)

    @property
    def peak_memory_bytes(self) -> int:
        return max((r.peak_memory_bytes for r in self.epochs), default=0)


class _PeakRssSampler:
    """Samples process RSS at 10 Hz; per-epoch peak via snapshot()."""

    method = "rss_sampling_10hz"

    def __init__(self):
        self._proc = psutil.Process()
        self._lock = threading.Lock()
        self._peak = self._proc.memory_info().rss
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.wait(0.1):
            rss = self._proc.memory_info().rss
            with self._lock:
                self._peak = max(self._peak, rss)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=1.0)

    def snapshot(self) -> int:
        rss = self._proc.memory_info().rss
        with self._lock:
            peak = max(self._peak, rss)
            self._peak = rss
        return peak


def compute_confidence(logits_mapped, y: int) -> float:
    """Softmax probability of the true class under the mapped logits."""
    logits = torch.as_tensor(logits_mapped, dtype=torch.float64)
    return float(F.softmax(logits, dim=-1)[int(y)])


def _std_accuracy(pipeline: PromptPipeline, images: torch.Tensor, labels: torch.Tensor,
                  batch_size: int) -> float:
    if images.shape[0] == 0:
        return 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            preds = pipeline(images[start:start + batch_size]).argmax(dim=1)
            correct += int((preds == labels[start:start + batch_size]).sum())
    return correct / images.shape[0]


def _initial_mapping(model: SourceModel, pipelineless_prompt: PromptParams,
                     config: VPTrainConfig, images: torch.Tensor, labels: torch.Tensor,
                     k: int, d: int) -> LabelMapping:
    if config.lm_strategy == "RLM":
        return random_mapping(d, k, config.seed)
    # ILM starts from the untrained prompt's prediction frequencies, so the
    # first epoch already exploits what the source model knows
    probe = PromptPipeline(model, pipelineless_prompt, random_mapping(d, k, 0),
                           loosening=config.loosening)
    counts = np.zeros((k, d), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, images.shape[0], config.batch_size):
            raw = probe.unmapped_logits(images[start:start + config.batch_size])
            arg = raw.argmax(dim=1).numpy()
            np.add.at(counts, (labels[start:start + config.batch_size].numpy(), arg), 1)
    return ilm_update(FrequencyMatrix(counts), method=config.ilm_method, epoch=0)


def train_prompt(
    model: SourceModel,
    dataset: DatasetManifest,
    config: VPTrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[PromptParams, DynamicsLog]:
    """Optimize a prompt against the frozen model; returns it with the full log.

    With out_dir set, streams dynamics.jsonl / timing.jsonl /
    mapping_history.jsonl epoch by epoch and saves the final prompt
    checkpoint there.
    """
    if not model.frozen:
        raise ConfigError("source model must be frozen before prompt training")
    k = dataset.class_count
    if config.loosening is not None:
        if config.loosening.n != model.n:
            raise ConfigError(
                f"loosening.n={config.loosening.n} != model outputs {model.n}"
            )
        d = config.loosening.d_I
    else:
        d = model.n
    if d < k:
        raise InfeasibleMapping(f"pipeline output dim {d} < {k} downstream classes")

    train_set = load_dataset(dataset, "train")
    test_set = load_dataset(dataset, "test")
    images = torch.from_numpy(train_set.images)
    labels = torch.from_numpy(train_set.labels)
    test_images = torch.from_numpy(test_set.images)
    test_labels = torch.from_numpy(test_set.labels)
    count = images.shape[0]

    torch.manual_seed(config.seed)
    pad = config.pad_width
    if config.prompt_mode == "pad" and pad is None:
        pad = default_pad_width(model.input_resolution)
    prompt = init_prompt(
        config.prompt_mode, model.input_resolution, pad, config.seed,
        channels=model.channels, init=config.prompt_init,
    )
    prompt.values.requires_grad_(True)
    opt = torch.optim.SGD([prompt.values], lr=config.learning_rate, momentum=0.9)
    # one fixed shuffle for the whole run: an epoch-invariant batch partition
    # keeps per-sample float rounding identical across epochs, which the
    # lr=0 constant-dynamics contract depends on
    shuffle_gen = torch.Generator().manual_seed(config.seed ^ _SHUFFLE_SALT)
    perm = torch.randperm(count, generator=shuffle_gen)

    mapping = _initial_mapping(model, prompt, config, images, labels, k, d)
    checksum_before = state_checksum(model.module)

    writers = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run_meta = {
            "config": config.to_json(),
            "model_checksum": checksum_before,
            "model_arch": model.arch_id,
            "dataset": dataset.name,
            "dataset_checksum": dataset.checksum,
        }
        (out_dir / "run.json").write_text(json_17g(run_meta) + "\n", encoding="utf-8")
        writers["dynamics"] = open(out_dir / "dynamics.jsonl", "w", encoding="utf-8")
        writers["timing"] = open(out_dir / "timing.jsonl", "w", encoding="utf-8")
        writers["mapping"] = open(out_dir / "mapping_history.jsonl", "w", encoding="utf-8")

    log = DynamicsLog(
        lm_strategy=config.lm_strategy,
        seed=config.seed,
        loosening=config.loosening.to_json() if config.loosening else None,
        adversarial=config.adversarial,
        peak_memory_method=_PeakRssSampler.method,
    )
    attack_cfg = AttackConfig(config.at_epsilon) if config.adversarial else None

    try:
        with _PeakRssSampler() as mem:
            for epoch in range(config.epochs):
                tic = time.perf_counter()
                lr_e = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
                for group in opt.param_groups:
                    group["lr"] = lr_e

                loss_sum = 0.0
                conf_sum = 0.0
                attack_time = 0.0
                counts = np.zeros((k, d), dtype=np.int64)
                epoch_mapping = mapping  # constant within the epoch for per_epoch cadence

                for start in range(0, count, config.batch_size):
                    idx = perm[start:start + config.batch_size]
                    xb, yb = images[idx], labels[idx]
                    pipeline = PromptPipeline(model, prompt, mapping, config.loosening)
                    if attack_cfg is not None:
                        t_atk = time.perf_counter()
                        xb = fgsm(pipeline, xb, yb, attack_cfg)
                        attack_time += time.perf_counter() - t_atk

                    opt.zero_grad()
                    raw = pipeline.unmapped_logits(xb)
                    logits = apply_mapping(raw, mapping)
                    loss = F.cross_entropy(logits, yb)
                    if not torch.isfinite(loss):
                        raise NonFiniteLoss(f"loss is {loss.item()} at epoch {epoch}")
                    with torch.no_grad():
                        probs = F.softmax(logits, dim=1)
                        conf_sum += float(probs[torch.arange(len(yb)), yb].sum())
                        np.add.at(counts, (yb.numpy(), raw.argmax(dim=1).numpy()), 1)
                    loss.backward()
                    opt.step()
                    loss_sum += float(loss.detach()) * len(yb)

                    if config.lm_strategy == "ILM" and config.ilm_cadence == "per_batch":
                        mapping = ilm_update(
                            FrequencyMatrix(counts), method=config.ilm_method, epoch=epoch,
                        )

                if config.lm_strategy == "ILM" and config.ilm_cadence == "per_epoch":
                    mapping = ilm_update(
                        FrequencyMatrix(counts), method=config.ilm_method, epoch=epoch + 1,
                    )

                eval_pipeline = PromptPipeline(model, prompt, mapping, config.loosening)
                eval_batch = max(256, config.batch_size)
                train_acc = _std_accuracy(eval_pipeline, images, labels, eval_batch)
                test_acc = _std_accuracy(eval_pipeline, test_images, test_labels, eval_batch)

                record = EpochRecord(
                    epoch=epoch,
                    train_loss=loss_sum / count,
                    mean_confidence=conf_sum / count,
                    train_std_acc=train_acc,
                    test_std_acc=test_acc,
                    wall_time_s=time.perf_counter() - tic,
                    attack_time_s=attack_time,
                    peak_memory_bytes=mem.snapshot(),
                    mapping=epoch_mapping.to_json(),
                )
                log.epochs.append(record)
                if writers:
                    writers["dynamics"].write(json_17g(record.dynamics_line()) + "\n")
                    writers["dynamics"].flush()
                    writers["timing"].write(json_17g(record.timing_line(mem.method)) + "\n")
                    writers["timing"].flush()
                    writers["mapping"].write(json_17g(epoch_mapping.to_json()) + "\n")
                    writers["mapping"].flush()
    finally:
        for fh in writers.values():
            fh.close()

    prompt.values.requires_grad_(False)
    if state_checksum(model.module) != checksum_before:
        raise ConfigError("source model parameters changed during prompt training")
    if out_dir is not None:
        save_prompt(prompt, out_dir, model_checksum=checksum_before, epoch=config.epochs)
        final = {"mapping": mapping.to_json()}
        (out_dir / "final_mapping.json").write_text(json_17g(final) + "\n", encoding="utf-8")

    log.final_mapping = mapping
    return prompt, log


def train_prompt_adversarial(
    model: SourceModel,
    dataset: DatasetManifest,
    config: VPTrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[PromptParams, DynamicsLog]:
    """Prompt training where every batch is replaced by its FGSM counterpart."""
    if not config.adversarial:
        raise ConfigError("train_prompt_adversarial requires config.adversarial=True")
    return train_prompt(model, dataset, config, out_dir)
