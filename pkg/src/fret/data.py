"""Shifted test-stream construction: parametric corruptions, long-tail
label-shift subsampling, and batched stream assembly.

Images are n×H×W×ch float32 arrays in [0, 1]. Five corruption kinds are
implemented natively with the corruption benchmark's published severity
parameters; the remaining kinds must be supplied as pre-corrupted archives in
the same directory-of-arrays layout, one per (kind, severity).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import InsufficientSamplesError, ShapeMismatchError, UnsupportedCorruptionError

__all__ = [
    "CORRUPTION_KINDS",
    "NATIVE_KINDS",
    "CorruptionSpec",
    "LongTailSpec",
    "ArrayDataset",
    "StreamBatch",
    "severity_parameter",
    "corrupt",
    "longtail_subsample",
    "build_stream",
    "save_dataset",
    "load_dataset",
    "corrupted_segment_dir",
]

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "glass_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "frost",
    "fog",
    "brightness",
    "contrast",
    "elastic",
    "pixelate",
    "jpeg",
)

# Severity parameters for the natively implemented kinds, indexed 1..5.
_SEVERITY_PARAMS: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.08, 0.12, 0.18, 0.26, 0.38),  # noise sigma
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # photons at full intensity
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # salt/pepper fraction
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # scale toward channel mean
}

NATIVE_KINDS = tuple(_SEVERITY_PARAMS)


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption kind at one severity level in [1, 5]."""

    kind: str
    severity: int

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in [1, 5], got {self.severity}")

    @property
    def tag(self) -> str:
        return f"{self.kind}/s{self.severity}"


@dataclass(frozen=True)
class LongTailSpec:
    """Exponential class-count profile with a most/least frequency ratio."""

    imbalance_factor: float
    profile: str = "exponential"

    def __post_init__(self) -> None:
        if self.imbalance_factor < 1:
            raise ValueError("imbalance factor must be >= 1")
        if self.profile != "exponential":
            raise ValueError(f"unsupported profile {self.profile!r}")


@dataclass
class ArrayDataset:
    """In-memory labeled image set (images NHWC float32 in [0, 1])."""

    images: np.ndarray
    labels: np.ndarray
    classes: list[str]

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ShapeMismatchError(
                f"images must be n×H×W×ch, got shape {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeMismatchError("one label required per image")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class StreamBatch:
    """One adaptation batch; labels ride along for evaluation only."""

    images: torch.Tensor  # n × ch × H × W float32
    labels: torch.Tensor  # n int64
    segment: int
    tag: str


def severity_parameter(kind: str, severity: int) -> float:
    """Published severity parameter for a natively implemented kind."""
    if kind not in _SEVERITY_PARAMS:
        raise UnsupportedCorruptionError(
            f"{kind!r} has no native implementation; provide a pre-corrupted archive"
        )
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in [1, 5], got {severity}")
    return _SEVERITY_PARAMS[kind][severity - 1]


def corrupt(images: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Apply ``spec`` to a batch of [0, 1] images, deterministically in ``seed``.

    Output has the same shape, dtype float32, values clipped to [0, 1].
    """
    if images.min() < 0 or images.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    param = severity_parameter(spec.kind, spec.severity)
    rng = np.random.default_rng(seed)
    x = images.astype(np.float64, copy=False)

    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, param, size=x.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(x * param) / param
    elif spec.kind == "impulse_noise":
        hit = rng.random(x.shape) < param
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif spec.kind == "brightness":
        out = x + param
    else:  # contrast
        means = x.mean(axis=(1, 2), keepdims=True)
        out = (x - means) * param + means

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def longtail_subsample(
    dataset: ArrayDataset, spec: LongTailSpec, seed: int
) -> ArrayDataset:
    """Subsample to an exponential long-tail class profile.

    Class ``k`` (by class index) keeps ``round(n_max * IF^(-k/(C-1)))`` samples
    drawn without replacement; ``IF = 1`` keeps the balanced set.
    """
    rng = np.random.default_rng(seed)
    num_classes = len(dataset.classes)
    counts = np.bincount(dataset.labels, minlength=num_classes)
    n_max = int(counts.max())
    factor = spec.imbalance_factor

    keep: list[np.ndarray] = []
    for k in range(num_classes):
        exponent = -k / (num_classes - 1) if num_classes > 1 else 0.0
        target = int(round(n_max * factor**exponent))
        available = np.flatnonzero(dataset.labels == k)
        if available.size < target:
            raise InsufficientSamplesError(
                f"class {k} has {available.size} samples, profile needs {target}"
            )
        chosen = rng.choice(available, size=target, replace=False)
        keep.append(np.sort(chosen))
    idx = np.concatenate(keep)
    return ArrayDataset(
        images=dataset.images[idx], labels=dataset.labels[idx], classes=dataset.classes
    )


def _to_batch_tensor(images: np.ndarray) -> torch.Tensor:
    # NHWC float32 on disk, NCHW for the model
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def corrupted_segment_dir(root: Path, spec: CorruptionSpec) -> Path:
    return Path(root) / spec.kind / f"severity_{spec.severity}"


def build_stream(
    base: ArrayDataset,
    specs: list[CorruptionSpec | None],
    batch_size: int,
    longtail: LongTailSpec | None = None,
    seed: int = 0,
    corrupted_root: Path | None = None,
) -> list[StreamBatch]:
    """Assemble an ordered batch stream, one segment per corruption spec.

    ``None`` entries in ``specs`` yield clean segments. Samples are shuffled
    within each segment under ``seed``; segments are concatenated in spec
    order; the last batch of a segment may be short. Non-native kinds load
    from ``corrupted_root`` (index-aligned with ``base``), which must then
    also reflect any long-tail subsampling seed via this function.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    master = np.random.SeedSequence(entropy=(int(seed), 0xF2E7))
    tail_seed, *segment_seeds = master.spawn(len(specs) + 1)

    if longtail is not None:
        base = longtail_subsample(
            base, longtail, seed=int(tail_seed.generate_state(1)[0])
        )

    stream: list[StreamBatch] = []
    for segment, (spec, seg_seq) in enumerate(zip(specs, segment_seeds)):
        corrupt_seq, shuffle_seq = seg_seq.spawn(2)
        if spec is None:
            images, tag = base.images, "clean"
        elif spec.kind in NATIVE_KINDS:
            images = corrupt(base.images, spec, seed=int(corrupt_seq.generate_state(1)[0]))
            tag = spec.tag
        else:
            if corrupted_root is None:
                raise UnsupportedCorruptionError(
                    f"{spec.kind!r} is not native and no pre-corrupted archive was given"
                )
            archive = load_dataset(corrupted_segment_dir(corrupted_root, spec))
            if len(archive) != len(base):
                raise ShapeMismatchError(
                    "pre-corrupted archive is not index-aligned with the base set"
                )
            images, tag = archive.images, spec.tag

        order = np.random.default_rng(shuffle_seq.generate_state(1)[0]).permutation(
            len(base)
        )
        labels = torch.from_numpy(base.labels[order].astype(np.int64))
        batched = _to_batch_tensor(images[order])
        for start in range(0, len(base), batch_size):
            stop = start + batch_size
            stream.append(
                StreamBatch(
                    images=batched[start:stop],
                    labels=labels[start:stop],
                    segment=segment,
                    tag=tag,
                )
            )
    return stream


def save_dataset(dataset: ArrayDataset, directory: str | Path) -> None:
    """Write the directory-of-arrays layout (raw binaries + JSON manifest)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, height, width, channels = dataset.images.shape
    dataset.images.astype(np.float32).tofile(directory / "images.f32")
    dataset.labels.astype(np.int64).tofile(directory / "labels.i64")
    manifest = {
        "num_samples": int(n),
        "height": int(height),
        "width": int(width),
        "channels": int(channels),
        "classes": list(dataset.classes),
        "images_file": "images.f32",
        "labels_file": "labels.i64",
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(directory: str | Path) -> ArrayDataset:
    """Read a dataset written by :func:`save_dataset`."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    shape = (
        manifest["num_samples"],
        manifest["height"],
        manifest["width"],
        manifest["channels"],
    )
    images = np.fromfile(directory / manifest["images_file"], dtype=np.float32).reshape(
        shape
    )
    labels = np.fromfile(directory / manifest["labels_file"], dtype=np.int64)
    return ArrayDataset(images=images, labels=labels, classes=list(manifest["classes"]))
