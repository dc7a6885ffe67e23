"""Shared builders for the gradient-check tests."""

import numpy as np

from aindnet import tensor as T
from aindnet.model import ModelConfig, aindnet_forward, init_params
from aindnet.params import ParamStore
from aindnet.tensor import Tensor

# two-scale micro model used for full-model gradient checks
GRAD_CFG = ModelConfig(base_channels=4, num_scales=2, blocks_per_scale=1, estimator_channels=4,
                       ain_hidden=4)


def op_cases(rng, dtype):
    def t(*shape, positive=False, kink_free=False):
        data = rng.standard_normal(shape)
        if positive:
            data = np.abs(data) + 0.5
        if kink_free:  # keep finite differences off the non-smooth point at 0
            data = np.sign(data) * (np.abs(data) + 0.1)
        return Tensor(data.astype(dtype))

    n, h, w = int(rng.integers(1, 3)), 2 * int(rng.integers(2, 4)), 2 * int(rng.integers(2, 4))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = t(n, h, w, c_in)
    return {
        "add": ([x, t(1, 1, 1, c_in)], lambda a, b: a + b),
        "sub": ([x, t(n, h, w, c_in)], lambda a, b: a - b),
        "mul": ([x, t(1, h, w, 1)], lambda a, b: a * b),
        "div": ([x, t(1, 1, 1, c_in, positive=True)], lambda a, b: a / b),
        "square": ([x], T.square),
        "sqrt": ([t(n, h, w, c_in, positive=True)], T.sqrt),
        "power": ([t(n, h, w, c_in, positive=True)], lambda a: T.power(a, 1.7)),
        "abs": ([t(n, h, w, c_in, kink_free=True)], T.abs),
        "softplus": ([x], T.softplus),
        "leaky_relu": ([t(n, h, w, c_in, kink_free=True)], lambda a: T.leaky_relu(a, 0.2)),
        "mean": ([x], lambda a: T.mean(a, axis=(1, 2), keepdims=True)),
        "concat": ([x, t(n, h, w, c_out)], lambda a, b: T.concat([a, b])),
        "conv2d": ([x, t(3, 3, c_in, c_out), t(c_out)], lambda a, k, b: T.conv2d(a, k, b, pad=1)),
        "conv2d_s2": ([x, t(3, 3, c_in, c_out), t(c_out)], lambda a, k, b: T.conv2d(a, k, b, stride=2, pad=1)),
        "transposed_conv2d": ([x, t(2, 2, c_out, c_in), t(c_out)],
                              lambda a, k, b: T.transposed_conv2d(a, k, b, stride=2)),
        "avg_pool": ([x], lambda a: T.avg_pool(a, 2)),
        "avg_pool_pad": ([t(n, h + 1, w - 1, c_in)], lambda a: T.avg_pool(a, 4)),
        "upsample_linear": ([x], lambda a: T.upsample_linear(a, 4)),
        "upsample_nearest": ([x], lambda a: T.upsample_nearest(a, 2)),
        "replicate_pad": ([t(n, h + 1, w + 3, c_in)], lambda a: T.replicate_pad(a, 4)),
        "crop": ([x], lambda a: T.crop(a, h - 1, w - 2)),
    }


def block_store(channels, cfg, seed=0, dtype=np.float64):
    """Parameters of one AIN-ResBlock named ``blk`` with random (non-init) AIN heads."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for conv in ("conv1", "conv2"):
        store.add(f"blk.{conv}.w", rng.normal(0, 0.3, (3, 3, channels, channels)).astype(dtype))
        store.add(f"blk.{conv}.b", rng.normal(0, 0.1, channels).astype(dtype))
    for ain in ("ain1", "ain2"):
        store.add(f"blk.{ain}.shared.w", rng.normal(0, 0.3, (3, 3, cfg.in_channels, cfg.ain_hidden)).astype(dtype))
        store.add(f"blk.{ain}.shared.b", rng.normal(0, 0.1, cfg.ain_hidden).astype(dtype))
        for head in ("gamma", "beta"):
            store.add(f"blk.{ain}.{head}.w", rng.normal(0, 0.3, (3, 3, cfg.ain_hidden, channels)).astype(dtype))
            store.add(f"blk.{ain}.{head}.b", rng.normal(0, 0.1, channels).astype(dtype))
    return store


def kink_margin(fn):
    """Smallest |input| seen by any leaky-relu while evaluating ``fn``."""
    seen = []
    orig = T.leaky_relu

    def spy(x, slope):
        seen.append(float(np.abs(x.data).min()))
        return orig(x, slope)

    T.leaky_relu = spy
    try:
        fn()
    finally:
        T.leaky_relu = orig
    return min(seen)


def grad_setup(seed, dtype, cfg=GRAD_CFG, size=16, margin=1e-5):
    """Loss and inputs for the full-model checks.

    Draws are repeated until every leaky-relu input sits at least ``margin``
    from the kink, so a 1e-6 stencil (and float32 rounding) cannot cross it.
    """
    rng = np.random.default_rng(seed)
    for _ in range(50):
        store = init_params(cfg, int(rng.integers(2 ** 31)), dtype=np.float64)
        # move AIN heads off their init so every generator path carries gradient
        for name, t in store.items():
            if ".gamma." in name or ".beta." in name:
                t.data[...] = rng.normal(0, 0.1, t.shape)
        y64 = rng.random((1, size, size, cfg.in_channels))
        if kink_margin(lambda: aindnet_forward(Tensor(y64), store, cfg)) > margin:
            break
    else:
        raise RuntimeError("no kink-free draw found")
    store = store.astype(dtype)
    for name, t in store.items():
        t.name = name
    y = Tensor(y64.astype(dtype), name="y")
    probe = rng.normal(size=y64.shape).astype(dtype)

    def loss():
        x_hat, s1, s4 = aindnet_forward(y, store, cfg)
        return T.sum(x_hat * probe) + T.sum(s1) * 0.5 + T.sum(s4)

    return loss, [y, *[store[n] for n in store]]
