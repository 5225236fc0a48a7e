"""Synthetic image datasets for the source/target domain pair.

Images are ``[N, 3, S, S]`` float32 tensors roughly in ``[-1, 1]``. All geometry
uses coordinates relative to the image side, so the same generator at size 16
renders the same scene as at size 8, just sharper. That is what the resolution
transfer experiments rely on.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

GENERATORS = ("class_gaussians", "class_stripes", "shifted_variant", "unit_gaussian")

# fixed per-class colours (RGB in [0, 1]); classes past the palette wrap around
_PALETTE = np.array([
    [0.95, 0.25, 0.20], [0.20, 0.80, 0.30], [0.25, 0.35, 0.95], [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85], [0.20, 0.85, 0.85], [0.95, 0.55, 0.15], [0.55, 0.55, 0.55],
])


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "class_gaussians"
    image_size: int = 8
    num_classes: int = 4
    base_id: str = "class_gaussians"   # used by shifted_variant
    transform_seed: int = 1
    noise: float = 0.05

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.generator == "shifted_variant" and self.base_id not in ("class_gaussians", "class_stripes"):
            raise ValueError(f"shifted_variant cannot wrap {self.base_id!r}")
        if self.image_size < 2 or self.num_classes < 1:
            raise ValueError("image_size must be >= 2 and num_classes >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "DatasetSpec":
        return cls(**dict(d))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _class_centers(num_classes: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(num_classes) / max(num_classes, 1)
    return 0.5 + 0.22 * np.stack([np.sin(ang), np.cos(ang)], axis=1)


def _gaussians(labels: np.ndarray, k: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    n = len(labels)
    rr, cc = _grid(size)
    centers = _class_centers(k)[labels]
    centers = centers + 0.05 * rng.standard_normal((n, 2))
    width = 0.16 * np.exp(0.15 * rng.standard_normal(n))
    d2 = (rr[None] - centers[:, 0, None, None]) ** 2 + (cc[None] - centers[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2 * width[:, None, None] ** 2))
    color = _PALETTE[labels % len(_PALETTE)] * np.exp(0.1 * rng.standard_normal((n, 3)))
    img = -0.8 + 1.6 * blob[:, None] * color[:, :, None, None]
    return img + noise * rng.standard_normal(img.shape)


def _stripes(labels: np.ndarray, k: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    n = len(labels)
    rr, cc = _grid(size)
    theta = np.pi * labels / k + 0.05 * rng.standard_normal(n)
    phase = rng.uniform(0, 2 * np.pi, n)
    proj = np.cos(theta)[:, None, None] * rr[None] + np.sin(theta)[:, None, None] * cc[None]
    wave = np.sin(2 * np.pi * 2.0 * proj + phase[:, None, None])
    color = _PALETTE[labels % len(_PALETTE)]
    img = 0.7 * wave[:, None] * color[:, :, None, None]
    return img + noise * rng.standard_normal(img.shape)


def class_transforms(num_classes: int, transform_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class ``(scale [K, 3], shift [K, 3])`` used by ``shifted_variant``."""
    rng = np.random.default_rng(transform_seed)
    scale = rng.uniform(0.5, 1.5, (num_classes, 3))
    shift = rng.uniform(-0.4, 0.4, (num_classes, 3))
    return scale, shift


class ToyDataset:
    """Deterministic sampler for one :class:`DatasetSpec`."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec

    def sample(self, n: int, seed: int, labels=None) -> tuple[torch.Tensor, torch.Tensor]:
        """``n`` images and labels. Labels default to a balanced ``arange(n) % K``."""
        s = self.spec
        rng = np.random.default_rng(seed)
        labels = np.arange(n) % s.num_classes if labels is None else np.asarray(labels, dtype=np.int64)
        if len(labels) and (labels.min() < 0 or labels.max() >= s.num_classes):
            raise ValueError("label out of range")
        gen = s.base_id if s.generator == "shifted_variant" else s.generator
        if gen == "class_gaussians":
            img = _gaussians(labels, s.num_classes, s.image_size, rng, s.noise)
        elif gen == "class_stripes":
            img = _stripes(labels, s.num_classes, s.image_size, rng, s.noise)
        else:
            img = rng.standard_normal((n, 3, s.image_size, s.image_size))
        if s.generator == "shifted_variant":
            scale, shift = class_transforms(s.num_classes, s.transform_seed)
            img = scale[labels][:, :, None, None] * img + shift[labels][:, :, None, None]
        return torch.from_numpy(img.astype(np.float32)), torch.from_numpy(labels.astype(np.int64))

    def splits(self, n_train: int, n_eval: int, seed: int):
        """Disjoint train/eval draws from independent child seeds of ``seed``."""
        a, b = np.random.SeedSequence(seed).spawn(2)
        return (self.sample(n_train, int(a.generate_state(1)[0])),
                self.sample(n_eval, int(b.generate_state(1)[0])))
