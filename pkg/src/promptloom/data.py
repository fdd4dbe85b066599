"""Dataset manifests, binary image stores, and the synthetic dataset generator.

On-disk layout of a dataset directory:
    manifest.json      UTF-8 JSON with the manifest fields
    train_images.bin   header of 4 uint64 LE (count, channels, H, W), then
                       float32 LE pixels in C order, values in [0, 1]
    train_labels.bin   uint64 LE, one per image
    test_images.bin / test_labels.bin   same encoding

The manifest checksum is SHA-256 over the four binary files' bytes,
concatenated in the order above.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatch,
    ConfigError,
    InvalidShape,
    LabelOutOfRange,
    MissingFile,
)

_BIN_FILES = ("train_images.bin", "train_labels.bin", "test_images.bin", "test_labels.bin")


@dataclass
class DatasetManifest:
    name: str
    role: str  # "source" or "downstream"
    class_count: int
    resolution: tuple[int, int]  # (H, W)
    train_size: int
    test_size: int
    pixel_range: tuple[float, float]
    storage_path: str
    checksum: str

    def __post_init__(self):
        if self.role not in ("source", "downstream"):
            raise ConfigError(f"role must be 'source' or 'downstream', got {self.role!r}")
        if self.class_count < 2:
            raise InvalidShape(f"class_count must be >= 2, got {self.class_count}")
        if self.train_size < self.class_count:
            raise InvalidShape(
                f"train_size={self.train_size} < class_count={self.class_count}"
            )
        if tuple(self.pixel_range) != (0.0, 1.0):
            raise ConfigError("pixel_range is fixed to [0, 1]")
        self.resolution = tuple(int(v) for v in self.resolution)
        self.pixel_range = tuple(float(v) for v in self.pixel_range)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (count, channels, H, W) float32 in [0, 1]
    labels: np.ndarray  # (count,) int64 in [0, class_count)
    class_count: int

    def __len__(self):
        return self.images.shape[0]


def write_array(path: Path, images: np.ndarray) -> None:
    """Write an image array with the 4x uint64 shape header."""
    arr = np.ascontiguousarray(images, dtype="<f4")
    if arr.ndim != 4:
        raise InvalidShape(f"image array must be 4-D, got shape {arr.shape}")
    header = np.asarray(arr.shape, dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(arr.tobytes())


def read_array(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(32), dtype="<u8")
        if header.size != 4:
            raise InvalidShape(f"{path}: truncated shape header")
        count, channels, h, w = (int(v) for v in header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = count * channels * h * w
    if data.size != expected:
        raise InvalidShape(f"{path}: expected {expected} floats, found {data.size}")
    return data.reshape(count, channels, h, w).astype(np.float32)


def write_labels(path: Path, labels: np.ndarray) -> None:
    np.ascontiguousarray(labels, dtype="<u8").tofile(path)


def read_labels(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(str(path))
    return np.fromfile(path, dtype="<u8").astype(np.int64)


def dataset_checksum(storage_dir: Path) -> str:
    digest = hashlib.sha256()
    for fname in _BIN_FILES:
        fpath = storage_dir / fname
        if not fpath.is_file():
            raise MissingFile(str(fpath))
        digest.update(fpath.read_bytes())
    return digest.hexdigest()


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    doc = asdict(manifest)
    doc["resolution"] = list(manifest.resolution)
    doc["pixel_range"] = list(manifest.pixel_range)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    doc = json.loads(path.read_text(encoding="utf-8"))
    storage = Path(doc["storage_path"])
    if not storage.is_absolute():
        storage = (path.parent / storage).resolve()
    doc["storage_path"] = str(storage)
    doc["resolution"] = tuple(doc["resolution"])
    doc["pixel_range"] = tuple(doc["pixel_range"])
    return DatasetManifest(**doc)


def load_dataset(manifest: DatasetManifest, split: str) -> LabeledImageSet:
    """Load one split, verifying the checksum and every declared invariant."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    storage = Path(manifest.storage_path)
    actual = dataset_checksum(storage)
    if actual != manifest.checksum:
        raise ChecksumMismatch(
            f"{storage}: checksum {actual[:12]}... != manifest {manifest.checksum[:12]}..."
        )
    images = read_array(storage / f"{split}_images.bin")
    labels = read_labels(storage / f"{split}_labels.bin")
    declared = manifest.train_size if split == "train" else manifest.test_size
    if images.shape[0] != declared or labels.shape[0] != declared:
        raise InvalidShape(
            f"{split} split holds {images.shape[0]} images / {labels.shape[0]} labels, "
            f"manifest declares {declared}"
        )
    if images.shape[2:] != manifest.resolution:
        raise InvalidShape(
            f"stored resolution {images.shape[2:]} != declared {manifest.resolution}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= manifest.class_count):
        raise LabelOutOfRange(
            f"labels must lie in [0, {manifest.class_count}), found "
            f"[{labels.min()}, {labels.max()}]"
        )
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise InvalidShape("pixel values outside [0, 1]")
    return LabeledImageSet(images=images, labels=labels, class_count=manifest.class_count)


# ---------------------------------------------------------------------------
# Synthetic data: smooth class-conditioned blob patterns.
#
# Pattern parameters are drawn in continuous [0, 1] coordinates so the same
# pattern index rasterizes consistently at any resolution. A source dataset at
# 32x32 and a downstream dataset at 24x24 built from the same pattern_seed
# therefore depict the same underlying patterns.
# ---------------------------------------------------------------------------

_BUMPS_PER_PATTERN = 2


def _blob_params(rng, bumps: int, channels: int, radius_range=(0.12, 0.28)):
    centers = rng.uniform(0.2, 0.8, size=(bumps, 2))
    radii = rng.uniform(*radius_range, size=bumps)
    signs = rng.choice([-1.0, 1.0], size=bumps)
    weights = signs * rng.uniform(0.6, 1.0, size=bumps)
    chan = rng.uniform(-1.0, 1.0, size=channels)
    chan /= np.abs(chan).max()
    return centers, radii, weights, chan


def _field(centers, radii, weights, grid_y, grid_x):
    out = np.zeros(grid_y.shape, dtype=np.float64)
    for (cy, cx), r, wgt in zip(centers, radii, weights):
        d2 = (grid_y - cy) ** 2 + (grid_x - cx) ** 2
        out += wgt * np.exp(-d2 / (2.0 * r * r))
    return out


def pattern_bank(
    count: int,
    resolution: tuple[int, int],
    channels: int = 3,
    pattern_seed: int = 0,
    window: tuple[float, float, float, float] | None = None,
    paired: bool = False,
    detail_scale: float = 0.35,
) -> np.ndarray:
    """Rasterize `count` deterministic blob patterns, each (channels, H, W).

    `window` = (y0, x0, y1, x1) rasterizes only that sub-region of the
    continuous pattern space. A downstream dataset rendered with the window
    matching a pad-mode interior samples the patterns at exactly the pixel
    positions the source model saw.

    `paired=True` builds patterns in sibling pairs: indices 2i and 2i+1 share
    a common blob structure and differ only by +/- detail_scale times a
    smaller detail blob. Sibling separation then rides on a low-amplitude
    feature, which standard training exploits and adversarial training
    sacrifices.
    """
    h, w = resolution
    y0, x0, y1, x1 = window if window is not None else (0.0, 0.0, 1.0, 1.0)
    ys = y0 + (np.arange(h) + 0.5) / h * (y1 - y0)
    xs = x0 + (np.arange(w) + 0.5) / w * (x1 - x0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    # normalization grid is window-independent so the same pattern keeps the
    # same amplitude no matter which sub-region gets rasterized
    ref = (np.arange(64) + 0.5) / 64
    ref_yy, ref_xx = np.meshgrid(ref, ref, indexing="ij")

    rng = np.random.default_rng(pattern_seed)
    bank = np.zeros((count, channels, h, w), dtype=np.float32)
    if not paired:
        for idx in range(count):
            centers, radii, weights, chan = _blob_params(rng, _BUMPS_PER_PATTERN, channels)
            norm = max(np.abs(_field(centers, radii, weights, ref_yy, ref_xx)).max(), 1e-12)
            base = _field(centers, radii, weights, yy, xx) / norm
            bank[idx] = (chan[:, None, None] * base[None]).astype(np.float32)
        return bank

    for pair in range(-(-count // 2)):
        common = _blob_params(rng, _BUMPS_PER_PATTERN, channels)
        detail = _blob_params(rng, 1, channels, radius_range=(0.08, 0.16))
        # one normalization per pair keeps the +/- detail symmetry exact
        norm = max(np.abs(_field(*common[:3], ref_yy, ref_xx)).max(), 1e-12)
        base = _field(*common[:3], yy, xx) / norm
        extra = detail_scale * _field(*detail[:3], yy, xx) / norm
        chan = common[3]
        for sign, idx in ((+1.0, 2 * pair), (-1.0, 2 * pair + 1)):
            if idx >= count:
                break
            bank[idx] = (chan[:, None, None] * (base + sign * extra)[None]).astype(np.float32)
    return bank


def make_synthetic_dataset(
    k: int,
    per_class: int,
    resolution: tuple[int, int],
    seed: int,
    out_dir: str | Path,
    *,
    name: str | None = None,
    role: str = "downstream",
    channels: int = 3,
    test_per_class: int | None = None,
    pattern_seed: int = 0,
    pattern_indices: list[int] | None = None,
    mixture_size: int = 1,
    dominant_weight: float = 0.7,
    amplitude: float = 0.3,
    noise_sigma: float = 0.08,
    window: tuple[float, float, float, float] | None = None,
    paired: bool = False,
    detail_scale: float = 0.35,
) -> DatasetManifest:
    """Generate a separable synthetic image dataset and write it to `out_dir`.

    Each class is a smooth blob pattern on a 0.5 background plus Gaussian
    pixel noise, clipped to [0, 1]. With mixture_size=m > 1, class c draws a
    per-sample dominant component from the m patterns at indices
    pattern_indices[c*m : (c+1)*m]; this yields classes whose argmax response
    under a source model flips between sibling output indices.

    Same arguments produce byte-identical files.
    """
    if k < 2:
        raise InvalidShape(f"need k >= 2 classes, got {k}")
    if per_class < 1:
        raise InvalidShape(f"need per_class >= 1, got {per_class}")
    h, w = (int(v) for v in resolution)
    if h < 4 or w < 4:
        raise InvalidShape(f"resolution too small: {resolution}")
    if mixture_size < 1:
        raise InvalidShape(f"mixture_size must be >= 1, got {mixture_size}")
    if test_per_class is None:
        test_per_class = per_class
    if test_per_class < 0:
        raise InvalidShape(f"test_per_class must be >= 0, got {test_per_class}")

    n_patterns = k * mixture_size
    if pattern_indices is None:
        pattern_indices = list(range(n_patterns))
    if len(pattern_indices) != n_patterns:
        raise InvalidShape(
            f"pattern_indices must hold k*mixture_size={n_patterns} entries, "
            f"got {len(pattern_indices)}"
        )
    bank = pattern_bank(
        max(pattern_indices) + 1, (h, w), channels, pattern_seed,
        window=window, paired=paired, detail_scale=detail_scale,
    )

    rng = np.random.default_rng(seed)

    def _render_split(count_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        total = count_per_class * k
        images = np.zeros((total, channels, h, w), dtype=np.float32)
        labels = np.zeros(total, dtype=np.int64)
        pos = 0
        for cls in range(k):
            comp_idx = [pattern_indices[cls * mixture_size + j] for j in range(mixture_size)]
            for _ in range(count_per_class):
                if mixture_size == 1:
                    signal = bank[comp_idx[0]]
                else:
                    dom = rng.integers(mixture_size)
                    rest = (1.0 - dominant_weight) / (mixture_size - 1)
                    weights = np.full(mixture_size, rest)
                    weights[dom] = dominant_weight
                    signal = np.tensordot(weights, bank[comp_idx], axes=1)
                scale = rng.uniform(0.8, 1.2)
                img = 0.5 + amplitude * scale * signal
                img += rng.normal(0.0, noise_sigma, size=img.shape)
                images[pos] = np.clip(img, 0.0, 1.0).astype(np.float32)
                labels[pos] = cls
                pos += 1
        return images, labels

    train_images, train_labels = _render_split(per_class)
    test_images, test_labels = _render_split(test_per_class)

    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_array(out_dir / "train_images.bin", train_images)
    write_labels(out_dir / "train_labels.bin", train_labels)
    write_array(out_dir / "test_images.bin", test_images)
    write_labels(out_dir / "test_labels.bin", test_labels)

    manifest = DatasetManifest(
        name=name or f"synthetic-k{k}-{h}x{w}-s{seed}",
        role=role,
        class_count=k,
        resolution=(h, w),
        train_size=per_class * k,
        test_size=test_per_class * k,
        pixel_range=(0.0, 1.0),
        storage_path=str(out_dir.resolve()),
        checksum=dataset_checksum(out_dir),
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
