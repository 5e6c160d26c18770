"""Synthetic 2D datasets and geometric augmentation operators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    name: str
    seed: int

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def make_dataset(kind: str, m: int, seed: int, **params) -> Dataset:
    """Deterministic synthetic dataset; labels are component/moon/ring indices."""
    if m < 1:
        raise DatasetError(f"dataset size must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    if kind == "gauss_mix":
        k = int(params.get("components", 4))
        spread = float(params.get("spread", 0.15))
        if k < 1:
            raise DatasetError(f"gauss_mix needs >= 1 component, got {k}")
        angles = 2.0 * np.pi * np.arange(k) / k
        centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        labels = rng.integers(0, k, size=m)
        points = centers[labels] + spread * rng.standard_normal((m, 2))
    elif kind == "two_moons":
        noise = float(params.get("noise", 0.08))
        labels = rng.integers(0, 2, size=m)
        theta = rng.uniform(0.0, np.pi, size=m)
        x = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
        points = np.stack([x, y], axis=1) + noise * rng.standard_normal((m, 2))
    elif kind == "rings":
        k = int(params.get("components", 2))
        noise = float(params.get("noise", 0.05))
        if k < 1:
            raise DatasetError(f"rings needs >= 1 ring, got {k}")
        labels = rng.integers(0, k, size=m)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
        radius = 1.0 + labels
        points = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        points = points + noise * rng.standard_normal((m, 2))
    else:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    return Dataset(points=points, labels=labels.astype(np.int64), name=kind, seed=seed)


class Augmentor:
    """Stochastic geometric augmentation; output shape equals input shape."""

    def __init__(self, kind: str, rng: np.random.Generator, sigma: float = 0.1, max_angle: float = 0.0, parts=None):
        if kind not in ("gaussian_jitter", "rotation", "compose"):
            raise DatasetError(f"unknown augmentor kind {kind!r}")
        self.kind = kind
        self.rng = rng
        self.sigma = sigma
        self.max_angle = max_angle
        self.parts = parts or []

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian_jitter":
            return x + self.sigma * self.rng.standard_normal(x.shape)
        if self.kind == "rotation":
            ang = self.rng.uniform(-self.max_angle, self.max_angle, size=x.shape[0])
            c, s = np.cos(ang), np.sin(ang)
            out = np.empty_like(x)
            out[:, 0] = c * x[:, 0] - s * x[:, 1]
            out[:, 1] = s * x[:, 0] + c * x[:, 1]
            return out
        out = x
        for part in self.parts:
            out = part(out)
        return out
