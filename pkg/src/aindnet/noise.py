"""Synthetic camera noise with per-pixel ground-truth noise levels.

The in-camera model is: clean sRGB -> inverse CRF -> heteroscedastic
Gaussian noise in the linear domain -> CRF -> clip.  The CRF family is
the power curve ``x ** (1/gamma)``.

Ground-truth noise level maps are computed by first-order propagation of the
linear-domain standard deviation through the CRF.  The CRF slope is
unbounded at 0, so the slope is evaluated no closer to zero than one
linear-domain standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, avg_pool


@dataclass(frozen=True)
class NoiseParams:
    sigma_s: float
    sigma_c: float
    crf_gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_s < 0 or self.sigma_c < 0:
            raise ValueError(f"noise levels must be >= 0, got {self}")
        if self.crf_gamma <= 0:
            raise ValueError(f"crf_gamma must be > 0, got {self.crf_gamma}")


@dataclass
class NoisyPair:
    noisy: np.ndarray
    clean: np.ndarray
    sigma1: np.ndarray
    sigma4: np.ndarray


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def pool_sigma(sigma1: np.ndarray, k: int = 4) -> np.ndarray:
    """Quarter-resolution noise map: k x k average pool of the full map."""
    squeeze = sigma1.ndim == 3
    t = Tensor(sigma1[None] if squeeze else sigma1)
    out = avg_pool(t, k).data
    return out[0] if squeeze else out


def sample_awgn(clean, sigma: float, seed=0, clip: bool = True):
    """Additive white Gaussian noise.  Returns ``(noisy, sigma_map)``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = _arr(clean)
    rng = _rng(seed)
    noisy = x + rng.standard_normal(x.shape).astype(x.dtype) * x.dtype.type(sigma)
    if clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return noisy, np.full_like(x, sigma)


def heteroscedastic_variance(x_linear, sigma_s: float, sigma_c: float) -> np.ndarray:
    return x_linear * sigma_s ** 2 + sigma_c ** 2


def sample_heteroscedastic(clean_linear, p: NoiseParams, rng=None, field=None):
    """Zero-mean Gaussian noise with variance ``x*sigma_s**2 + sigma_c**2``.

    ``field``, if given, multiplies the per-pixel standard deviation (used for
    spatially correlated noise domains).  Returns ``(noisy_linear, var_map)``;
    no clipping is applied here.
    """
    x = _arr(clean_linear)
    rng = _rng(p.seed if rng is None else rng)
    var = heteroscedastic_variance(x, p.sigma_s, p.sigma_c)
    if field is not None:
        var = var * np.asarray(field) ** 2
    noise = rng.standard_normal(x.shape).astype(x.dtype) * np.sqrt(var)
    return x + noise, var


def apply_crf(linear, crf_gamma: float) -> np.ndarray:
    x = np.clip(_arr(linear), 0.0, 1.0)
    if crf_gamma == 1.0:
        return x
    return x ** (1.0 / crf_gamma)


def inverse_crf(srgb, crf_gamma: float) -> np.ndarray:
    x = np.clip(_arr(srgb), 0.0, 1.0)
    if crf_gamma == 1.0:
        return x
    return x ** crf_gamma


def crf_slope(linear, crf_gamma: float) -> np.ndarray:
    """Derivative of the CRF; infinite at 0 for crf_gamma > 1."""
    x = np.asarray(linear)
    if crf_gamma == 1.0:
        return np.ones_like(x)
    with np.errstate(divide="ignore"):
        return (1.0 / crf_gamma) * x ** (1.0 / crf_gamma - 1.0)


def propagated_sigma(x_linear, var, crf_gamma: float) -> np.ndarray:
    """First-order sRGB-domain std: ``f'(max(x, std_lin)) * std_lin``."""
    std = np.sqrt(var)
    if crf_gamma == 1.0:
        return std
    at = np.maximum(x_linear, std)
    out = np.zeros_like(std)
    nz = std > 0
    out[nz] = crf_slope(at[nz], crf_gamma) * std[nz]
    return out


def synthesize_pair(clean_srgb, p: NoiseParams, rng=None, field=None) -> NoisyPair:
    """Noisy sRGB image plus full- and quarter-resolution noise-level maps."""
    x = _arr(clean_srgb)
    rng = _rng(p.seed if rng is None else rng)
    if p.sigma_s == 0 and p.sigma_c == 0:
        zeros = np.zeros_like(x)
        return NoisyPair(x.copy(), x, zeros, pool_sigma(zeros))
    x_lin = inverse_crf(x, p.crf_gamma)
    noisy_lin, var = sample_heteroscedastic(x_lin, p, rng=rng, field=field)
    noisy = apply_crf(noisy_lin, p.crf_gamma).astype(x.dtype, copy=False)
    sigma1 = propagated_sigma(x_lin, var, p.crf_gamma).astype(x.dtype, copy=False)
    return NoisyPair(noisy, x, sigma1, pool_sigma(sigma1))


def smooth_field(shape: tuple[int, int], rng, low: float = 0.5, high: float = 1.5,
                 cells: int = 4) -> np.ndarray:
    """Spatially correlated positive field in [low, high], shape (H, W, 1).

    Uniform values on a coarse ``cells x cells`` grid, bilinearly upsampled.
    """
    from .tensor import linear_resize_matrix

    h, w = shape
    coarse = _rng(rng).uniform(low, high, size=(cells, cells))
    fh = -(-h // cells)
    fw = -(-w // cells)
    mh = linear_resize_matrix(cells, fh)[:h]
    mw = linear_resize_matrix(cells, fw)[:w]
    return (mh @ coarse @ mw.T)[:, :, None]


@dataclass(frozen=True)
class NoiseDomain:
    """A distribution over :class:`NoiseParams`.

    Parameters are drawn uniformly from the given ranges.  When
    ``field_strength > 0`` every sample also gets a smooth multiplicative
    std field drawn from ``[1 - field_strength, 1 + field_strength]``.
    """

    sigma_s: tuple[float, float] = (0.0, 0.16)
    sigma_c: tuple[float, float] = (0.0, 0.06)
    crf_gamma: tuple[float, float] = (1.6, 2.6)
    field_strength: float = 0.0
    awgn: bool = False  # AWGN domain: sigma_c is the AWGN std, CRF ignored

    def __post_init__(self):
        for name in ("sigma_s", "sigma_c", "crf_gamma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: [{lo}, {hi}]")
        if self.crf_gamma[0] <= 0:
            raise ValueError("crf_gamma range must be positive")
        if not 0 <= self.field_strength < 1:
            raise ValueError("field_strength must be in [0, 1)")

    def draw(self, rng) -> NoiseParams:
        rng = _rng(rng)
        s = rng.uniform(*self.sigma_s)
        c = rng.uniform(*self.sigma_c)
        g = rng.uniform(*self.crf_gamma)
        return NoiseParams(float(s), float(c), float(g), int(rng.integers(2 ** 31)))

    def synthesize(self, clean, rng, params: NoiseParams | None = None) -> NoisyPair:
        rng = _rng(rng)
        p = self.draw(rng) if params is None else params
        x = _arr(clean)
        if self.awgn:
            noisy, smap = sample_awgn(x, p.sigma_c, rng)
            return NoisyPair(noisy, x, smap, pool_sigma(smap))
        field = None
        if self.field_strength > 0:
            field = smooth_field(x.shape[:2], rng, 1 - self.field_strength,
                                 1 + self.field_strength)
        return synthesize_pair(x, p, rng=rng, field=field)


def awgn_domain(sigma: float | tuple[float, float]) -> NoiseDomain:
    lo, hi = (sigma, sigma) if np.isscalar(sigma) else sigma
    return NoiseDomain(sigma_s=(0.0, 0.0), sigma_c=(lo, hi), crf_gamma=(1.0, 1.0), awgn=True)


def make_domain_shift(source: NoiseDomain | dict, target: NoiseDomain | dict,
                      seeds: tuple[int, int] = (0, 1)):
    """Two independent param samplers for a source and a shifted target domain."""
    if isinstance(source, dict):
        source = NoiseDomain(**source)
    if isinstance(target, dict):
        target = NoiseDomain(**target)
    return DomainSampler(source, seeds[0]), DomainSampler(target, seeds[1])


class DomainSampler:
    """Seeded stream of NoiseParams from one domain."""

    def __init__(self, domain: NoiseDomain, seed: int = 0):
        self.domain = domain
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> NoiseParams:
        return self.domain.draw(self.rng)

    def sample(self, n: int) -> list[NoiseParams]:
        return [next(self) for _ in range(n)]

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)


# source and target defaults for few-shot experiments
SOURCE_DOMAIN = NoiseDomain(sigma_s=(0.0, 0.16), sigma_c=(0.0, 0.06), crf_gamma=(1.8, 2.4))
TARGET_DOMAIN = NoiseDomain(sigma_s=(0.02, 0.12), sigma_c=(0.01, 0.05), crf_gamma=(1.0, 1.0),
                            field_strength=0.5)

