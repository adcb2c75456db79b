"""Desk-scale assets: a deterministic synthetic 10-class image set and a small
CNN trained on it, used by the experiment harness and the acceptance suite.

Images are 16×16 single-channel, built from fixed low-frequency class
templates plus per-sample jitter (circular shifts and pixel noise), so the
whole dataset regenerates bit-identically from its seeds on any platform.
The trained checkpoint ships in-repo; ``ensure_desk_assets`` regenerates it
only when missing.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ArrayDataset, save_dataset

__all__ = [
    "DESK_IMAGE_SIZE",
    "DESK_NUM_CLASSES",
    "DESK_TEMPLATE_SEED",
    "DESK_TRAIN_SEED",
    "DESK_TEST_SEED",
    "DeskCNN",
    "make_desk_dataset",
    "train_desk_model",
    "save_desk_model",
    "load_desk_model",
    "ensure_desk_assets",
    "ensure_desk_dataset",
]

DESK_IMAGE_SIZE = 16
DESK_NUM_CLASSES = 10
DESK_TEMPLATE_SEED = 7
DESK_TRAIN_SEED = 101
DESK_TEST_SEED = 202
_TEMPLATE_AMP = 0.6
_SAMPLE_NOISE = 0.12
_MAX_SHIFT = 2


def _bilinear_upsample(small: np.ndarray, size: int) -> np.ndarray:
    src = np.asarray(small, dtype=np.float64)
    coords = np.linspace(0.0, src.shape[0] - 1.0, size)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src.shape[0] - 1)
    frac = coords - lo
    rows = src[lo] * (1.0 - frac)[:, None] + src[hi] * frac[:, None]
    return rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]


def _class_templates(seed: int, size: int, num_classes: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(num_classes):
        coarse = rng.normal(size=(4, 4))
        t = _bilinear_upsample(coarse, size)
        t -= t.mean()
        templates.append(t / np.abs(t).max())
    return np.stack(templates)


def make_desk_dataset(
    n_per_class: int,
    seed: int,
    template_seed: int = DESK_TEMPLATE_SEED,
    image_size: int = DESK_IMAGE_SIZE,
    num_classes: int = DESK_NUM_CLASSES,
    template_amp: float = _TEMPLATE_AMP,
    noise_std: float = _SAMPLE_NOISE,
) -> ArrayDataset:
    """Synthesize a balanced labeled image set; fully determined by the seeds."""
    templates = _class_templates(template_seed, image_size, num_classes)
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.empty((n, image_size, image_size, 1), dtype=np.float32)
    for i, cls in enumerate(labels):
        dy, dx = rng.integers(-_MAX_SHIFT, _MAX_SHIFT + 1, size=2)
        pattern = np.roll(templates[cls], (dy, dx), axis=(0, 1))
        pixel = 0.5 + template_amp * pattern + noise_std * rng.normal(size=pattern.shape)
        images[i, :, :, 0] = np.clip(pixel, 0.0, 1.0)
    order = rng.permutation(n)
    return ArrayDataset(
        images=images[order],
        labels=labels[order].astype(np.int64),
        classes=[f"class_{c}" for c in range(num_classes)],
    )


class DeskCNN(nn.Module):
    """Three conv blocks ending in global average pooling, then an affine head.

    The embedding is the pooled post-ReLU channel vector, the same shape of
    feature real backbones expose before their classification layer.
    """

    def __init__(
        self,
        in_channels: int = 1,
        embed_dim: int = 32,
        num_classes: int = DESK_NUM_CLASSES,
        image_size: int = DESK_IMAGE_SIZE,
    ) -> None:
        super().__init__()
        self.hparams = {
            "in_channels": in_channels,
            "embed_dim": embed_dim,
            "num_classes": num_classes,
            "image_size": image_size,
        }
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 8, kernel_size=3, padding=1),
            nn.BatchNorm2d(8),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, kernel_size=3, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, embed_dim, kernel_size=3, padding=1),
            nn.BatchNorm2d(embed_dim),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(embed_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def train_desk_model(
    dataset: ArrayDataset,
    seed: int = 0,
    epochs: int = 10,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> DeskCNN:
    """Train the desk CNN on a clean dataset (plain supervised fit)."""
    torch.manual_seed(seed)
    model = DeskCNN(in_channels=dataset.images.shape[3])
    images = torch.from_numpy(dataset.images.transpose(0, 3, 1, 2)).contiguous()
    labels = torch.from_numpy(dataset.labels)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    n = images.shape[0]
    model.train()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(images[idx]), labels[idx])
            loss.backward()
            optimizer.step()
    model.eval()
    return model


def save_desk_model(model: DeskCNN, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"arch": model.hparams, "state_dict": model.state_dict()}, path)


def load_desk_model(path: str | Path) -> DeskCNN:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = DeskCNN(**payload["arch"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def ensure_desk_assets(
    asset_dir: str | Path,
    train_per_class: int = 400,
    test_per_class: int = 640,
) -> tuple[Path, ArrayDataset]:
    """Return (checkpoint path, test dataset), training the model if absent."""
    asset_dir = Path(asset_dir)
    checkpoint = asset_dir / "desk_cnn.pt"
    test_set = make_desk_dataset(test_per_class, seed=DESK_TEST_SEED)
    if not checkpoint.exists():
        train_set = make_desk_dataset(train_per_class, seed=DESK_TRAIN_SEED)
        model = train_desk_model(train_set)
        save_desk_model(model, checkpoint)
    return checkpoint, test_set


def ensure_desk_dataset(directory: str | Path, test_per_class: int = 640) -> Path:
    """Write the desk test set in directory-of-arrays form if not present."""
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        save_dataset(make_desk_dataset(test_per_class, seed=DESK_TEST_SEED), directory)
    return directory
