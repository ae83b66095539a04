"""Seeded synthetic inputs in the model's normalized pixel space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, ViTConfig
from .vit import predict


def noise_probes(cfg: ViTConfig, n: int, seed: int) -> np.ndarray:
    """Standard-normal images; the data-free probe source used for calibration."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 3, cfg.image_size, cfg.image_size)).astype(np.float32)


def class_means(cfg: ViTConfig, num_components: int, seed: int, coarse: int = 4) -> np.ndarray:
    """Smooth per-component mean images: coarse Gaussian fields upsampled by repetition."""
    rng = np.random.default_rng(seed)
    rep = cfg.image_size // coarse
    base = rng.standard_normal((num_components, 3, coarse, coarse))
    return np.repeat(np.repeat(base, rep, axis=2), rep, axis=3).astype(np.float32)


def gaussian_mixture(
    cfg: ViTConfig, n: int, seed: int, noise: float = 0.5, num_components: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """(images, component ids): mean image of a random component plus white noise."""
    k = num_components or cfg.num_classes
    means = class_means(cfg, k, seed=1000003 * (seed + 1))
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, k, size=n)
    x = means[comp] + noise * rng.standard_normal((n, 3, cfg.image_size, cfg.image_size))
    return x.astype(np.float32), comp


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask])


def labeled_dataset(reference: Checkpoint, n: int, seed: int, noise: float = 0.5) -> Dataset:
    """Gaussian-mixture images labeled by the frozen reference (un-edited) model."""
    images, _ = gaussian_mixture(reference.config, n, seed, noise=noise)
    return Dataset(images, predict(reference, images))


def non_target(ds: Dataset, target: int) -> Dataset:
    return ds.subset(ds.labels != target)
