"""Synthetic labeled shape corpus: the trainable substrate for every attack.

Eight grayscale shape classes rendered analytically with jittered position,
scale, rotation, and intensity. Pixel values live in [-1, 1]; background is -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError

__all__ = ["ShapeCorpusSpec", "ShapeDataset", "gen_corpus", "DEFAULT_LEAVES",
           "DEFAULT_FAMILIES"]

DEFAULT_LEAVES = ("triangle", "square", "pentagon", "circle", "ellipse",
                  "plus", "x-cross", "ring")

DEFAULT_FAMILIES = {
    "triangle": "polygon", "square": "polygon", "pentagon": "polygon",
    "circle": "round", "ellipse": "round", "ring": "round",
    "plus": "cross", "x-cross": "cross",
}


@dataclass(frozen=True)
class ShapeCorpusSpec:
    resolution: int = 16
    channels: int = 1
    leaf_labels: tuple = DEFAULT_LEAVES
    families: dict = field(default_factory=lambda: dict(DEFAULT_FAMILIES))
    pos_jitter: float = 0.09      # fraction of resolution
    scale_range: tuple = (0.78, 1.12)
    rot_jitter: float = 0.22      # radians; plus and x-cross sit 45 degrees apart
    intensity_range: tuple = (0.45, 1.0)
    seed: int = 0

    def label_index(self, name):
        return self.leaf_labels.index(name)


@dataclass
class ShapeDataset:
    images: np.ndarray  # (N, C, H, W) in [-1, 1]
    labels: np.ndarray  # (N,) int leaf indices
    spec: ShapeCorpusSpec

    def __len__(self):
        return len(self.labels)


def _rotate(xg, yg, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * xg + s * yg, -s * xg + c * yg


def _sdf_polygon(xg, yg, n_sides, radius):
    r = np.hypot(xg, yg)
    phi = np.arctan2(yg, xg)
    sector = 2.0 * np.pi / n_sides
    local = np.mod(phi + sector / 2.0, sector) - sector / 2.0
    edge = radius * np.cos(np.pi / n_sides) / np.maximum(np.cos(local), 1e-9)
    return r - edge


def _sdf_rect(xg, yg, half_w, half_h):
    dx = np.abs(xg) - half_w
    dy = np.abs(yg) - half_h
    return np.maximum(dx, dy)


def _shape_sdf(name, xg, yg, radius):
    if name == "triangle":
        return _sdf_polygon(xg, yg, 3, radius * 1.15)
    if name == "square":
        return _sdf_polygon(xg, yg, 4, radius * 1.05)
    if name == "pentagon":
        return _sdf_polygon(xg, yg, 5, radius)
    if name == "circle":
        return np.hypot(xg, yg) - radius
    if name == "ellipse":
        b = 0.55 * radius
        return (np.hypot(xg / (1.05 * radius), yg / b) - 1.0) * b
    if name == "ring":
        return np.abs(np.hypot(xg, yg) - radius * 0.82) - radius * 0.34
    if name == "plus":
        bar = radius * 0.30
        return np.minimum(_sdf_rect(xg, yg, radius, bar), _sdf_rect(xg, yg, bar, radius))
    if name == "x-cross":
        xr, yr = _rotate(xg, yg, np.pi / 4.0)
        bar = radius * 0.30
        return np.minimum(_sdf_rect(xr, yr, radius, bar), _sdf_rect(xr, yr, bar, radius))
    raise ConfigurationError(f"unknown shape label {name!r}")


def render_shape(name, resolution, cx, cy, scale, rot, intensity):
    """One anti-aliased shape image (resolution x resolution) in [-1, 1]."""
    coords = np.arange(resolution) + 0.5
    yg, xg = np.meshgrid(coords - cy, coords - cx, indexing="ij")
    xr, yr = _rotate(xg, yg, rot)
    base_radius = 0.31 * resolution * scale
    d = _shape_sdf(name, xr, yr, base_radius)
    alpha = np.clip(0.5 - d, 0.0, 1.0)  # one-pixel soft edge
    return -1.0 + alpha * (intensity + 1.0)


def gen_corpus(spec, n_per_class):
    """Balanced dataset, deterministic given spec.seed; images in [-1, 1]."""
    if spec.resolution < 8:
        raise ConfigurationError(f"resolution must be >= 8, got {spec.resolution}")
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    n_classes = len(spec.leaf_labels)
    images = np.empty((n_classes * n_per_class, spec.channels, res, res))
    labels = np.empty(n_classes * n_per_class, dtype=np.int64)
    mid = res / 2.0
    i = 0
    for ci, name in enumerate(spec.leaf_labels):
        for _ in range(n_per_class):
            cx = mid + rng.uniform(-spec.pos_jitter, spec.pos_jitter) * res
            cy = mid + rng.uniform(-spec.pos_jitter, spec.pos_jitter) * res
            scale = rng.uniform(*spec.scale_range)
            rot = rng.uniform(-spec.rot_jitter, spec.rot_jitter)
            intensity = rng.uniform(*spec.intensity_range)
            img = render_shape(name, res, cx, cy, scale, rot, intensity)
            images[i, :] = np.clip(img, -1.0, 1.0)[None]
            labels[i] = ci
            i += 1
    return ShapeDataset(images=images, labels=labels, spec=spec)
