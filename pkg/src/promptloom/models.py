"""Small frozen source classifiers and their standard / adversarial training.

Models are plain CNNs (2-4 conv blocks + linear head) that train in minutes
on CPU. Outputs are pre-softmax logits; softmax happens only inside loss and
confidence computations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetManifest, load_dataset
from .errors import ChecksumMismatch, ConfigError, MissingFile, NonFiniteLoss, ShapeMismatch

_SHUFFLE_SALT = 0x5EED  # decouples batch order from parameter init


class SmallCNN(nn.Module):
    """Conv(3x3)+GroupNorm+ReLU+MaxPool blocks with doubling width, then a linear head."""

    def __init__(self, channels: int, n_classes: int, input_resolution: tuple[int, int],
                 depth: int = 2, width: int = 16):
        super().__init__()
        h, w = input_resolution
        if min(h, w) // (2 ** depth) < 1:
            raise ConfigError(f"depth={depth} pools {input_resolution} below 1x1")
        layers: list[nn.Module] = []
        c_in = channels
        for b in range(depth):
            c_out = width * (2 ** b)
            # GroupNorm (not BatchNorm): per-sample statistics keep forward
            # passes deterministic and independent of batch composition
            layers += [
                nn.Conv2d(c_in, c_out, 3, padding=1),
                nn.GroupNorm(4, c_out),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            c_in = c_out
            h, w = h // 2, w // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in * h * w, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # inputs are [0, 1] pixels; centering keeps the first conv well-conditioned
        return self.head(self.features(x - 0.5).flatten(1))


@dataclass
class SourceModel:
    """A classifier plus the metadata needed to freeze and checkpoint it."""

    arch_id: str
    module: SmallCNN
    n: int
    input_resolution: tuple[int, int]
    channels: int
    training_mode: str  # "standard" | "adversarial"
    seed: int
    frozen: bool = False
    param_checksum: str = ""
    final_train_acc: float | None = None

    def forward(self, batch) -> torch.Tensor:
        return forward(self, batch)


@dataclass
class SourceTrainConfig:
    epochs: int
    learning_rate: float = 0.02
    batch_size: int = 64
    seed: int = 0
    at_epsilon: float = 0.0
    at_steps: int = 1
    depth: int = 2
    width: int = 16
    n_out: int | None = None  # defaults to the dataset's class count
    input_resolution: tuple[int, int] | None = None  # defaults to dataset resolution

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.at_epsilon <= 0.5:
            raise ConfigError(f"at_epsilon must lie in [0, 0.5], got {self.at_epsilon}")
        if self.at_steps < 1:
            raise ConfigError(f"at_steps must be >= 1, got {self.at_steps}")


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over the float32 LE bytes of all state tensors, state_dict order."""
    digest = hashlib.sha256()
    for tensor in module.state_dict().values():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        digest.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest.hexdigest()


def forward(model: SourceModel, batch) -> torch.Tensor:
    """Logits for a batch (N, C, H, W) or a single image (C, H, W)."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    single = batch.dim() == 3
    if single:
        batch = batch.unsqueeze(0)
    if batch.dim() != 4:
        raise ShapeMismatch(f"expected a 4-D batch, got {tuple(batch.shape)}")
    if batch.shape[1] != model.channels or tuple(batch.shape[2:]) != tuple(model.input_resolution):
        raise ShapeMismatch(
            f"batch {tuple(batch.shape[1:])} does not match model input "
            f"({model.channels}, {model.input_resolution[0]}, {model.input_resolution[1]})"
        )
    dtype = next(model.module.parameters()).dtype
    logits = model.module(batch.to(dtype))
    return logits[0] if single else logits


def _fgsm_batch(module: nn.Module, x: torch.Tensor, y: torch.Tensor,
                epsilon: float, steps: int) -> torch.Tensor:
    """Inner maximization for adversarial training (FGSM, or small-step PGD)."""
    if steps == 1:
        xa = x.detach().clone().requires_grad_(True)
        loss = F.cross_entropy(module(xa), y, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xa)
        return (x + epsilon * torch.sign(grad)).clamp(0.0, 1.0).detach()
    alpha = 2.0 * epsilon / steps
    delta = torch.zeros_like(x)
    for _ in range(steps):
        xa = (x + delta).detach().requires_grad_(True)
        loss = F.cross_entropy(module(xa), y, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xa)
        delta = (delta + alpha * torch.sign(grad)).clamp(-epsilon, epsilon)
        delta = ((x + delta).clamp(0.0, 1.0) - x).detach()
    return (x + delta).detach()


def _train(manifest: DatasetManifest, config: SourceTrainConfig, mode: str) -> SourceModel:
    train_set = load_dataset(manifest, "train")
    resolution = tuple(config.input_resolution or manifest.resolution)
    if tuple(manifest.resolution) != resolution:
        raise ConfigError(
            f"input_resolution {resolution} != dataset resolution {manifest.resolution}; "
            "resize source data before training"
        )
    n_out = config.n_out or manifest.class_count
    channels = train_set.images.shape[1]

    torch.manual_seed(config.seed)
    module = SmallCNN(channels, n_out, resolution, depth=config.depth, width=config.width)
    opt = torch.optim.SGD(module.parameters(), lr=config.learning_rate, momentum=0.9)
    milestones = {config.epochs // 2, (3 * config.epochs) // 4}

    images = torch.from_numpy(train_set.images)
    labels = torch.from_numpy(train_set.labels)
    count = len(train_set)
    shuffle_gen = torch.Generator().manual_seed(config.seed ^ _SHUFFLE_SALT)

    lr = config.learning_rate
    for epoch in range(config.epochs):
        if epoch in milestones and epoch > 0:
            lr *= 0.1
            for group in opt.param_groups:
                group["lr"] = lr
        perm = torch.randperm(count, generator=shuffle_gen)
        for start in range(0, count, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb, yb = images[idx], labels[idx]
            if mode == "adversarial":
                xb = _fgsm_batch(module, xb, yb, config.at_epsilon, config.at_steps)
            opt.zero_grad()
            loss = F.cross_entropy(module(xb), yb)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss is {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()

    module.eval()
    with torch.no_grad():
        preds = torch.cat([
            module(images[i:i + 512]).argmax(dim=1) for i in range(0, count, 512)
        ])
        final_acc = (preds == labels).float().mean().item()

    model = SourceModel(
        arch_id=f"smallcnn-d{config.depth}-w{config.width}",
        module=module,
        n=n_out,
        input_resolution=resolution,
        channels=channels,
        training_mode=mode,
        seed=config.seed,
        final_train_acc=final_acc,
    )
    freeze(model)
    return model


def train_standard(manifest: DatasetManifest, config: SourceTrainConfig) -> SourceModel:
    """Minimize expected cross-entropy on clean samples; return a frozen model."""
    return _train(manifest, config, "standard")


def train_adversarial(manifest: DatasetManifest, config: SourceTrainConfig) -> SourceModel:
    """Min-max training: each minibatch is perturbed at at_epsilon before the step.

    at_epsilon=0 collapses to standard training exactly (same seed, same
    parameter checksum); the config keeps it allowed for that degenerate check.
    """
    return _train(manifest, config, "adversarial")


def freeze(model: SourceModel) -> SourceModel:
    model.module.eval()
    for p in model.module.parameters():
        p.requires_grad_(False)
    model.frozen = True
    model.param_checksum = state_checksum(model.module)
    return model


def _parse_arch_id(arch_id: str) -> tuple[int, int]:
    try:
        kind, d, w = arch_id.split("-")
        assert kind == "smallcnn"
        return int(d[1:]), int(w[1:])
    except (ValueError, AssertionError):
        raise ConfigError(f"unknown arch_id {arch_id!r}") from None


def save_model(model: SourceModel, out_dir: str | Path) -> Path:
    """Write model.json + model_params.bin (raw float32 LE, state_dict order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = b"".join(
        np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()
        for t in model.module.state_dict().values()
    )
    (out_dir / "model_params.bin").write_bytes(blob)
    doc = {
        "arch_id": model.arch_id,
        "n": model.n,
        "input_resolution": list(model.input_resolution),
        "channels": model.channels,
        "training_mode": model.training_mode,
        "seed": model.seed,
        "checksum": model.param_checksum or state_checksum(model.module),
        "final_train_acc": model.final_train_acc,
    }
    (out_dir / "model.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return out_dir


def load_model(ckpt_dir: str | Path) -> SourceModel:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "model.json"
    blob_path = ckpt_dir / "model_params.bin"
    if not meta_path.is_file() or not blob_path.is_file():
        raise MissingFile(f"{ckpt_dir} lacks model.json / model_params.bin")
    doc = json.loads(meta_path.read_text(encoding="utf-8"))
    depth, width = _parse_arch_id(doc["arch_id"])
    module = SmallCNN(
        doc["channels"], doc["n"], tuple(doc["input_resolution"]), depth=depth, width=width
    )
    flat = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    state, offset = {}, 0
    for name, tensor in module.state_dict().items():
        numel = tensor.numel()
        chunk = flat[offset:offset + numel]
        if chunk.size != numel:
            raise ChecksumMismatch(f"{blob_path}: parameter blob truncated at {name}")
        state[name] = torch.from_numpy(chunk.copy()).view(tensor.shape)
        offset += numel
    if offset != flat.size:
        raise ChecksumMismatch(f"{blob_path}: {flat.size - offset} trailing floats")
    module.load_state_dict(state)
    model = SourceModel(
        arch_id=doc["arch_id"],
        module=module,
        n=doc["n"],
        input_resolution=tuple(doc["input_resolution"]),
        channels=doc["channels"],
        training_mode=doc["training_mode"],
        seed=doc["seed"],
        final_train_acc=doc.get("final_train_acc"),
    )
    freeze(model)
    if model.param_checksum != doc["checksum"]:
        raise ChecksumMismatch(
            f"{ckpt_dir}: parameters hash to {model.param_checksum[:12]}..., "
            f"manifest says {doc['checksum'][:12]}..."
        )
    return model
