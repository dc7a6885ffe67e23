"""Clean-image sources and patch samplers for training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .noise import NoiseDomain, pool_sigma


def synthetic_image(rng: np.random.Generator, size: int = 64, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth test scene: shaded background, shapes, a grating.

    Returns a float32 (size, size, channels) array in [0, 1].
    """
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.9, (2, channels))
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3.0
    img = c0 + (c1 - c0) * t[..., None]

    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0, 1, channels)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        kind = rng.integers(3)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        elif kind == 1:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            freq = rng.uniform(4, 12)
            phase = rng.uniform(0, 2 * np.pi)
            grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            img[mask] = img[mask] * (1 - grating[mask, None]) + color * grating[mask, None]
            continue
        img[mask] = color
    img = gaussian_filter(img, sigma=(0.6, 0.6, 0))
    return np.clip(img, 0, 1).astype(np.float32)


def synthetic_image_set(n: int, size: int = 64, channels: int = 3, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size, channels) for _ in range(n)]


def dihedral(x: np.ndarray, index: int, axes=(0, 1)) -> np.ndarray:
    """One of the 8 dihedral transforms (index 0..7) on the given spatial axes."""
    out = np.rot90(x, index % 4, axes=axes)
    if index >= 4:
        out = np.flip(out, axis=axes[1])
    return out


def inverse_dihedral(x: np.ndarray, index: int, axes=(0, 1)) -> np.ndarray:
    if index >= 4:
        x = np.flip(x, axis=axes[1])
    return np.rot90(x, -(index % 4), axes=axes)


@dataclass
class Batch:
    noisy: np.ndarray
    clean: np.ndarray
    sigma1: np.ndarray | None = None
    sigma4: np.ndarray | None = None


def _crop_origin(rng, shape, patch):
    h, w = shape[:2]
    if patch > h or patch > w:
        raise ValueError(f"patch size {patch} exceeds image size {h}x{w}")
    return int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))


class SyntheticNoiseDataset:
    """Clean images with noise synthesized on the fly from a :class:`NoiseDomain`."""

    has_sigma = True

    def __init__(self, images: list[np.ndarray], domain: NoiseDomain):
        if not images:
            raise ValueError("empty dataset")
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.domain = domain

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, rng, batch_size: int, patch_size: int, augment: bool = True) -> Batch:
        noisy, clean, s1 = [], [], []
        for _ in range(batch_size):
            im = self.images[int(rng.integers(len(self.images)))]
            r, c = _crop_origin(rng, im.shape, patch_size)
            patch = im[r:r + patch_size, c:c + patch_size]
            if augment:
                patch = np.ascontiguousarray(dihedral(patch, int(rng.integers(8))))
            pair = self.domain.synthesize(patch, rng)
            noisy.append(pair.noisy)
            clean.append(pair.clean)
            s1.append(pair.sigma1)
        s1 = np.stack(s1)
        return Batch(np.stack(noisy), np.stack(clean), s1, pool_sigma(s1))


class PairDataset:
    """Fixed (noisy, clean[, sigma1]) image triples."""

    def __init__(self, noisy: list[np.ndarray], clean: list[np.ndarray],
                 sigma1: list[np.ndarray] | None = None):
        if not noisy:
            raise ValueError("empty dataset")
        if len(noisy) != len(clean) or (sigma1 is not None and len(sigma1) != len(noisy)):
            raise ValueError("noisy/clean/sigma lists differ in length")
        self.noisy = [np.asarray(a, dtype=np.float32) for a in noisy]
        self.clean = [np.asarray(a, dtype=np.float32) for a in clean]
        self.sigma1 = None if sigma1 is None else [np.asarray(a, dtype=np.float32) for a in sigma1]

    @property
    def has_sigma(self) -> bool:
        return self.sigma1 is not None

    def __len__(self) -> int:
        return len(self.noisy)

    def subset(self, k: int) -> "PairDataset":
        if k > len(self):
            raise ValueError(f"requested {k} pairs but only {len(self)} available")
        s1 = None if self.sigma1 is None else self.sigma1[:k]
        return PairDataset(self.noisy[:k], self.clean[:k], s1)

    def sample(self, rng, batch_size: int, patch_size: int, augment: bool = True) -> Batch:
        noisy, clean, s1 = [], [], []
        for _ in range(batch_size):
            i = int(rng.integers(len(self)))
            r, c = _crop_origin(rng, self.noisy[i].shape, patch_size)
            d = int(rng.integers(8)) if augment else 0
            window = (slice(r, r + patch_size), slice(c, c + patch_size))
            noisy.append(dihedral(self.noisy[i][window], d))
            clean.append(dihedral(self.clean[i][window], d))
            if self.sigma1 is not None:
                s1.append(dihedral(self.sigma1[i][window], d))
        batch = Batch(np.ascontiguousarray(np.stack(noisy)), np.ascontiguousarray(np.stack(clean)))
        if s1:
            batch.sigma1 = np.ascontiguousarray(np.stack(s1))
            batch.sigma4 = pool_sigma(batch.sigma1)
        return batch


def make_pairs(images: list[np.ndarray], domain: NoiseDomain, seed: int) -> PairDataset:
    """Freeze one noise realization per clean image."""
    rng = np.random.default_rng(seed)
    pairs = [domain.synthesize(im, rng) for im in images]
    return PairDataset([p.noisy for p in pairs], [p.clean for p in pairs],
                       [p.sigma1 for p in pairs])
