"""AINDNet: noise-level estimator + AIN-conditioned U-Net reconstruction.

All forward functions are pure functions of a :class:`ParamStore` and a
:class:`ModelConfig`.  Parameter names encode position in the network
(``est.*``, ``rec.enc{level}.block{j}.ain{1,2}.*``, ``rec.last.*`` ...),
and :func:`aindnet.params.tag_for` turns those names into partition tags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import ConfigurationError, Tensor

EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    num_scales: int = 3
    blocks_per_scale: int = 2
    estimator_channels: int = 16
    ain_hidden: int = 16
    lambda_ms: float = 0.8
    slope: float = 0.2
    residual: bool = False
    norm: str = "ain"  # "ain" or "in_concat" (plain IN, noise map concatenated at input)

    def __post_init__(self):
        if not 0.0 <= self.lambda_ms <= 1.0:
            raise ConfigurationError(f"lambda_ms must be in [0, 1], got {self.lambda_ms}")
        if self.num_scales < 1:
            raise ConfigurationError("num_scales must be >= 1")
        if self.norm not in ("ain", "in_concat"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        for name in ("in_channels", "base_channels", "estimator_channels", "ain_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def full(cls, in_channels: int = 3) -> "ModelConfig":
        """Full-size configuration (64 base channels, 32 estimator channels)."""
        return cls(in_channels=in_channels, base_channels=64, num_scales=3,
                   blocks_per_scale=4, estimator_channels=32, ain_hidden=64)

    @classmethod
    def micro(cls, in_channels: int = 3) -> "ModelConfig":
        return cls(in_channels=in_channels, base_channels=12, num_scales=3,
                   blocks_per_scale=1, estimator_channels=16, ain_hidden=8)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def pad_multiple(self) -> int:
        return max(4, 2 ** (self.num_scales - 1))


# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, store: ParamStore, rng: np.random.Generator, slope: float, dtype):
        self.store, self.rng, self.dtype = store, rng, dtype
        self.gain = np.sqrt(2.0 / (1.0 + slope ** 2))

    def conv(self, name, c_in, c_out, k=3, bias_value=0.0, zero=False):
        std = self.gain / np.sqrt(k * k * c_in)
        w = np.zeros((k, k, c_in, c_out)) if zero else self.rng.normal(0, std, (k, k, c_in, c_out))
        self.store.add(f"{name}.w", w.astype(self.dtype))
        self.store.add(f"{name}.b", np.full(c_out, bias_value, dtype=self.dtype))

    def tconv(self, name, c_in, c_out, k=2):
        std = self.gain / np.sqrt(c_in)
        self.store.add(f"{name}.w", self.rng.normal(0, std, (k, k, c_out, c_in)).astype(self.dtype))
        self.store.add(f"{name}.b", np.zeros(c_out, dtype=self.dtype))

    def ain(self, name, channels, cfg: ModelConfig):
        if cfg.norm == "in_concat":
            self.store.add(f"{name}.gamma", np.ones(channels, dtype=self.dtype))
            self.store.add(f"{name}.beta", np.zeros(channels, dtype=self.dtype))
            return
        self.conv(f"{name}.shared", cfg.in_channels, cfg.ain_hidden)
        # gamma head emits exactly 1 and beta head exactly 0 at init -> plain IN
        self.conv(f"{name}.gamma", cfg.ain_hidden, channels, bias_value=1.0, zero=True)
        self.conv(f"{name}.beta", cfg.ain_hidden, channels, zero=True)

    def block(self, name, channels, cfg):
        self.conv(f"{name}.conv1", channels, channels)
        self.ain(f"{name}.ain1", channels, cfg)
        self.conv(f"{name}.conv2", channels, channels)
        self.ain(f"{name}.ain2", channels, cfg)


# softplus(-3) ~= 0.049: estimator starts near typical noise levels
SIGMA_HEAD_BIAS = -3.0


def init_estimator(init: _Init, cfg: ModelConfig) -> None:
    c, e = cfg.in_channels, cfg.estimator_channels
    init.conv("est.c1", c, e)
    init.conv("est.c1b", e, e)
    init.conv("est.c2", e, e)
    init.conv("est.c4", e, e)
    init.conv("est.head4", e, c, bias_value=SIGMA_HEAD_BIAS)
    init.tconv("est.up2", e, e)
    init.tconv("est.up1", e, e)
    init.conv("est.d1", e, e)
    init.conv("est.head1", e, c, bias_value=SIGMA_HEAD_BIAS)


def _fcn_count(c: int, e: int) -> int:
    return (9 * c * e + e) + 3 * (9 * e * e + e) + (9 * e * c + c)


def fcn_width(cfg: ModelConfig) -> int:
    """FCN baseline width whose parameter count is closest to the U-Net estimator's."""
    target = count_params(cfg)["estimator"]
    return min(range(1, 4 * cfg.estimator_channels + 1),
               key=lambda e: abs(_fcn_count(cfg.in_channels, e) - target))


def init_fcn_estimator(init: _Init, cfg: ModelConfig, width: int) -> None:
    c, e = cfg.in_channels, width
    init.conv("est.fcn0", c, e)
    for i in range(1, 4):
        init.conv(f"est.fcn{i}", e, e)
    init.conv("est.fcn4", e, c, bias_value=SIGMA_HEAD_BIAS)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    store = ParamStore()
    init = _Init(store, np.random.default_rng(seed), cfg.slope, dtype)
    init_estimator(init, cfg)
    head_in = cfg.in_channels * (2 if cfg.norm == "in_concat" else 1)
    init.conv("rec.head", head_in, cfg.channels(0))
    levels = cfg.num_scales
    for i in range(levels):
        if i > 0:
            init.conv(f"rec.down{i}", cfg.channels(i - 1), cfg.channels(i))
        for j in range(cfg.blocks_per_scale):
            init.block(f"rec.enc{i}.block{j}", cfg.channels(i), cfg)
    for i in reversed(range(levels - 1)):
        init.tconv(f"rec.up{i}", cfg.channels(i + 1), cfg.channels(i))
        init.conv(f"rec.fuse{i}", 2 * cfg.channels(i), cfg.channels(i))
        for j in range(cfg.blocks_per_scale):
            init.block(f"rec.dec{i}.block{j}", cfg.channels(i), cfg)
    init.conv("rec.last", cfg.channels(0), cfg.in_channels)
    return store


def init_fcn_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                    width: int | None = None) -> ParamStore:
    """Five-conv baseline; ``width`` defaults to :func:`fcn_width`."""
    store = ParamStore()
    width = fcn_width(cfg) if width is None else width
    init_fcn_estimator(_Init(store, np.random.default_rng(seed), cfg.slope, dtype), cfg, width)
    return store


def count_params(cfg: ModelConfig) -> dict[str, int]:
    store = init_params(cfg, dtype=np.float32)
    est = store.num_params("estimator")
    return {"estimator": est, "reconstruction": store.num_params() - est,
            "total": store.num_params()}


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _conv(x, store, name, pad=1):
    return T.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=1, pad=pad)


def _tconv(x, store, name):
    return T.transposed_conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=2)


def instance_stats(h: Tensor, eps: float = EPS) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel spatial mean and std (with ``eps`` inside the sqrt)."""
    mu = T.mean(h, axis=(1, 2), keepdims=True)
    var = T.mean(T.square(h - mu), axis=(1, 2), keepdims=True) + eps
    return mu, T.sqrt(var)


def adaptive_normalize(h: Tensor, gamma, beta, eps: float = EPS) -> Tensor:
    """``gamma * (h - mu_c) / sigma_c + beta`` with pixel-wise gamma/beta."""
    mu, sigma = instance_stats(h, eps)
    return gamma * ((h - mu) / sigma) + beta


def pool_to(sigma_hat: Tensor, h: Tensor) -> Tensor:
    """Average-pool the noise map down to ``h``'s spatial size."""
    factor = sigma_hat.shape[1] // h.shape[1]
    if factor < 1 or sigma_hat.shape[1] != factor * h.shape[1] \
            or sigma_hat.shape[2] != factor * h.shape[2]:
        raise ConfigurationError(
            f"noise map {sigma_hat.shape[1:3]} does not pool to feature size {h.shape[1:3]}")
    return T.avg_pool(sigma_hat, factor)


def ain_params(cond: Tensor, store: ParamStore, name: str, cfg: ModelConfig):
    """Pixel-wise (gamma, beta) generated from the pooled noise map."""
    if cfg.norm == "in_concat":
        return store[f"{name}.gamma"], store[f"{name}.beta"]
    a = T.leaky_relu(_conv(cond, store, f"{name}.shared"), cfg.slope)
    return _conv(a, store, f"{name}.gamma"), _conv(a, store, f"{name}.beta")


def ain_transform(h: Tensor, sigma_hat: Tensor, store: ParamStore, name: str,
                  cfg: ModelConfig) -> Tensor:
    cond = pool_to(sigma_hat, h)
    gamma, beta = ain_params(cond, store, name, cfg)
    return adaptive_normalize(h, gamma, beta)


def ain_resblock_forward(h: Tensor, sigma_hat: Tensor, store: ParamStore, name: str,
                         cfg: ModelConfig) -> Tensor:
    """``h + AIN(conv(act(AIN(conv(h)))))``."""
    t = _conv(h, store, f"{name}.conv1")
    t = T.leaky_relu(ain_transform(t, sigma_hat, store, f"{name}.ain1", cfg), cfg.slope)
    t = _conv(t, store, f"{name}.conv2")
    t = ain_transform(t, sigma_hat, store, f"{name}.ain2", cfg)
    return h + t


# ---------------------------------------------------------------------------
# Estimator, fusion, reconstruction
# ---------------------------------------------------------------------------

def _check_input(y: Tensor, cfg: ModelConfig) -> None:
    if y.ndim != 4 or y.shape[3] != cfg.in_channels:
        raise ConfigurationError(
            f"expected (N, H, W, {cfg.in_channels}) input, got {y.shape}")


def estimator_forward(y: Tensor, store: ParamStore, cfg: ModelConfig):
    """Multi-scale noise-level estimate ``(sigma_hat_1, sigma_hat_4)``.

    Inputs whose size is not a multiple of 4 are replicate-padded; sigma_hat_1
    is cropped back to H x W and sigma_hat_4 is ceil(H/4) x ceil(W/4).
    """
    _check_input(y, cfg)
    h, w = y.shape[1:3]
    yp = T.replicate_pad(y, 4)
    s = cfg.slope
    e1 = T.leaky_relu(_conv(yp, store, "est.c1"), s)
    e1 = T.leaky_relu(_conv(e1, store, "est.c1b"), s)
    e2 = T.leaky_relu(_conv(T.avg_pool(e1, 2), store, "est.c2"), s)
    e4 = T.leaky_relu(_conv(T.avg_pool(e2, 2), store, "est.c4"), s)
    sigma4 = T.softplus(_conv(e4, store, "est.head4"))
    u2 = T.leaky_relu(_tconv(e4, store, "est.up2"), s) + e2
    u1 = T.leaky_relu(_tconv(u2, store, "est.up1"), s) + e1
    u1 = T.leaky_relu(_conv(u1, store, "est.d1"), s)
    sigma1 = T.softplus(_conv(u1, store, "est.head1"))
    return T.crop(sigma1, h, w), sigma4


def fcn_estimator_forward(y: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Five-conv single-scale baseline estimator (full resolution only)."""
    f = y
    for i in range(4):
        f = T.leaky_relu(_conv(f, store, f"est.fcn{i}"), cfg.slope)
    return T.softplus(_conv(f, store, "est.fcn4"))


def fuse_noise_levels(sigma4: Tensor, sigma1: Tensor, lambda_ms: float) -> Tensor:
    """``lambda * L(sigma4) + (1 - lambda) * sigma1`` with L bilinear x4."""
    up = T.upsample_linear(sigma4, 4)
    h, w = sigma1.shape[1:3]
    if not (h <= up.shape[1] < h + 4 and w <= up.shape[2] < w + 4) \
            or up.shape[3] != sigma1.shape[3] or up.shape[0] != sigma1.shape[0]:
        raise ConfigurationError(
            f"upsampled sigma4 {up.shape} does not match sigma1 {sigma1.shape}")
    up = T.crop(up, h, w)
    if lambda_ms == 0.0:
        return sigma1
    if lambda_ms == 1.0:
        return up
    return up * lambda_ms + sigma1 * (1.0 - lambda_ms)


def reconstruct_forward(y: Tensor, sigma_hat: Tensor, store: ParamStore,
                        cfg: ModelConfig) -> Tensor:
    """U-Net reconstruction; ``y`` and ``sigma_hat`` share full resolution."""
    _check_input(y, cfg)
    h, w = y.shape[1:3]
    m = cfg.pad_multiple
    yp, sp = T.replicate_pad(y, m), T.replicate_pad(sigma_hat, m)
    s = cfg.slope
    x = T.concat([yp, sp]) if cfg.norm == "in_concat" else yp
    f = T.leaky_relu(_conv(x, store, "rec.head"), s)
    skips = []
    for i in range(cfg.num_scales):
        if i > 0:
            skips.append(f)
            f = T.leaky_relu(_conv(T.avg_pool(f, 2), store, f"rec.down{i}"), s)
        for j in range(cfg.blocks_per_scale):
            f = ain_resblock_forward(f, sp, store, f"rec.enc{i}.block{j}", cfg)
    for i in reversed(range(cfg.num_scales - 1)):
        f = T.leaky_relu(_tconv(f, store, f"rec.up{i}"), s)
        f = T.leaky_relu(_conv(T.concat([f, skips[i]]), store, f"rec.fuse{i}"), s)
        for j in range(cfg.blocks_per_scale):
            f = ain_resblock_forward(f, sp, store, f"rec.dec{i}.block{j}", cfg)
    out = _conv(f, store, "rec.last")
    if cfg.residual:
        out = out + yp
    return T.crop(out, h, w)


def aindnet_forward(y: Tensor, store: ParamStore, cfg: ModelConfig):
    """Returns ``(x_hat, sigma_hat_1, sigma_hat_4)``."""
    sigma1, sigma4 = estimator_forward(y, store, cfg)
    sigma_hat = fuse_noise_levels(sigma4, sigma1, cfg.lambda_ms)
    return reconstruct_forward(y, sigma_hat, store, cfg), sigma1, sigma4


class AINDNet:
    """Convenience wrapper binding a config to a parameter store."""

    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)

    def __call__(self, y):
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=self.dtype))
        return aindnet_forward(y, self.store, self.cfg)

    @property
    def dtype(self):
        return next(iter(self.store.items()))[1].dtype

    def denoise(self, y: np.ndarray, batch: int = 8) -> np.ndarray:
        """Denoise an (N, H, W, C) or (H, W, C) array without recording a tape."""
        single = y.ndim == 3
        arr = y[None] if single else y
        outs = []
        for i in range(0, arr.shape[0], batch):
            x_hat, _, _ = self(arr[i:i + batch].astype(self.dtype))
            outs.append(x_hat.data)
        out = np.concatenate(outs)
        return out[0] if single else out

    def estimate(self, y: np.ndarray) -> np.ndarray:
        t = Tensor(np.asarray(y, dtype=self.dtype))
        return estimator_forward(t, self.store, self.cfg)[0].data
