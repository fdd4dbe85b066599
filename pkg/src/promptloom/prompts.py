"""Pixel-space visual prompts: parameterization, application, checkpoints, PNG export.

Two geometries:
  pad      - learnable border of width p around the (resized) image, which sits
             untouched in the interior. Attack pixels and prompt pixels stay
             disjoint.
  additive - learnable full-resolution frame added to the resized image.

Both clamp the final output hard to [0, 1]; gradients through the clamp are
zero outside the interval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, InvalidGeometry, MissingFile, ShapeMismatch


@dataclass
class PromptParams:
    mode: str  # "pad" | "additive"
    values: torch.Tensor  # (channels, H, W) at source resolution
    pad_width: int
    source_resolution: tuple[int, int]
    channels: int
    seed: int
    init: str = "zeros"

    @property
    def border_pixel_count(self) -> int:
        """Learnable pixels per channel (pad mode counts only the border)."""
        h, w = self.source_resolution
        if self.mode == "pad":
            p = self.pad_width
            return h * w - (h - 2 * p) * (w - 2 * p)
        return h * w

    @property
    def param_count(self) -> int:
        return self.channels * self.border_pixel_count

    def interior_resolution(self) -> tuple[int, int]:
        h, w = self.source_resolution
        if self.mode == "pad":
            return h - 2 * self.pad_width, w - 2 * self.pad_width
        return h, w


def default_pad_width(source_resolution: tuple[int, int]) -> int:
    return int(np.ceil(source_resolution[0] / 8))


def init_prompt(
    mode: str,
    source_resolution: tuple[int, int],
    pad_width: int | None = None,
    seed: int = 0,
    *,
    channels: int = 3,
    init: str = "zeros",
    dtype: torch.dtype = torch.float32,
) -> PromptParams:
    """Create a prompt; zeros by default, seeded uniform [0,1) with init="uniform"."""
    if mode not in ("pad", "additive"):
        raise ConfigError(f"mode must be 'pad' or 'additive', got {mode!r}")
    h, w = (int(v) for v in source_resolution)
    if h < 1 or w < 1:
        raise InvalidGeometry(f"bad source_resolution {source_resolution}")
    if mode == "pad":
        if pad_width is None:
            pad_width = default_pad_width((h, w))
        if pad_width < 0 or 2 * pad_width >= min(h, w):
            raise InvalidGeometry(
                f"pad_width={pad_width} leaves no interior at {h}x{w} (need 2p < min(H, W))"
            )
    else:
        pad_width = 0
    if init == "zeros":
        values = torch.zeros(channels, h, w, dtype=dtype)
    elif init == "uniform":
        gen = torch.Generator().manual_seed(seed)
        values = torch.rand(channels, h, w, generator=gen, dtype=dtype)
        if mode == "pad":
            # interior never contributes; keep it zero so checkpoints are canonical
            p = pad_width
            values[:, p:h - p, p:w - p] = 0.0
    else:
        raise ConfigError(f"init must be 'zeros' or 'uniform', got {init!r}")
    return PromptParams(
        mode=mode,
        values=values,
        pad_width=pad_width,
        source_resolution=(h, w),
        channels=channels,
        seed=seed,
        init=init,
    )


def _border_mask(prompt: PromptParams) -> torch.Tensor:
    h, w = prompt.source_resolution
    p = prompt.pad_width
    mask = torch.ones(h, w, dtype=torch.bool)
    mask[p:h - p, p:w - p] = False
    return mask


def _resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    # identity skip keeps already-sized inputs bitwise intact
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return F.interpolate(image, size=size, mode="bilinear", align_corners=False)


def apply_prompt(prompt: PromptParams, image: torch.Tensor) -> torch.Tensor:
    """Apply the prompt to an image (C, h, w) or batch (N, C, h, w).

    Output is at source resolution, always inside [0, 1], and differentiable
    w.r.t. both the prompt values and the image.
    """
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
    if image.dim() != 4:
        raise ShapeMismatch(f"expected image of 3 or 4 dims, got {tuple(image.shape)}")
    if image.shape[1] != prompt.channels:
        raise ShapeMismatch(
            f"image has {image.shape[1]} channels, prompt expects {prompt.channels}"
        )
    lo, hi = image.detach().min(), image.detach().max()
    if image.numel() and (lo < 0.0 or hi > 1.0):
        raise ShapeMismatch(f"image values outside [0, 1]: [{lo:.4g}, {hi:.4g}]")

    image = image.to(prompt.values.dtype)
    if prompt.mode == "additive":
        out = (_resize(image, prompt.source_resolution) + prompt.values).clamp(0.0, 1.0)
    else:
        interior = _resize(image, prompt.interior_resolution())
        p = prompt.pad_width
        canvas = prompt.values.clamp(0.0, 1.0)
        padded = F.pad(interior, (p, p, p, p))
        out = torch.where(_border_mask(prompt), canvas, padded)
    return out[0] if single else out


def prompt_panel(prompt: PromptParams) -> np.ndarray:
    """The prompt applied to a mid-gray image: (channels, H, W) floats in [0, 1]."""
    h, w = prompt.interior_resolution()
    gray = torch.full((prompt.channels, h, w), 0.5, dtype=prompt.values.dtype)
    with torch.no_grad():
        panel = apply_prompt(prompt, gray)
    return panel.numpy()


def save_prompt_png(prompt: PromptParams, path: str | Path) -> Path:
    """Export the prompt as 8-bit RGB, values linearly mapped from [0, 1]."""
    panel = prompt_panel(prompt)
    if panel.shape[0] == 1:
        panel = np.repeat(panel, 3, axis=0)
    elif panel.shape[0] != 3:
        panel = panel[:3]
    rgb = np.clip(np.round(panel * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.transpose(rgb, (1, 2, 0)), mode="RGB").save(path)
    return path


def save_prompt(
    prompt: PromptParams,
    out_dir: str | Path,
    *,
    model_checksum: str = "",
    epoch: int = 0,
    stem: str = "prompt_final",
) -> Path:
    """Write <stem>.json header + <stem>.bin float32 LE blob of the values."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "mode": prompt.mode,
        "pad_width": prompt.pad_width,
        "source_resolution": list(prompt.source_resolution),
        "channels": prompt.channels,
        "model_checksum": model_checksum,
        "seed": prompt.seed,
        "epoch": epoch,
        "init": prompt.init,
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    blob = np.ascontiguousarray(
        prompt.values.detach().to(torch.float32).numpy(), dtype="<f4"
    ).tobytes()
    (out_dir / f"{stem}.bin").write_bytes(blob)
    return out_dir


def load_prompt(ckpt_dir: str | Path, stem: str = "prompt_final") -> tuple[PromptParams, dict]:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / f"{stem}.json"
    blob_path = ckpt_dir / f"{stem}.bin"
    if not meta_path.is_file() or not blob_path.is_file():
        raise MissingFile(f"{ckpt_dir} lacks {stem}.json / {stem}.bin")
    header = json.loads(meta_path.read_text(encoding="utf-8"))
    h, w = header["source_resolution"]
    channels = header["channels"]
    flat = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if flat.size != channels * h * w:
        raise ShapeMismatch(
            f"{blob_path}: expected {channels * h * w} floats, found {flat.size}"
        )
    prompt = PromptParams(
        mode=header["mode"],
        values=torch.from_numpy(flat.copy()).view(channels, h, w),
        pad_width=header["pad_width"],
        source_resolution=(h, w),
        channels=channels,
        seed=header["seed"],
        init=header.get("init", "zeros"),
    )
    return prompt, header
