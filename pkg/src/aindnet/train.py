"""Losses, Adam, the transfer partition and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .model import (ModelConfig, aindnet_forward, estimator_forward, fcn_estimator_forward,
                    init_fcn_params, init_params)
from .params import TAGS, ParamStore
from .tensor import ConfigurationError, Tape, Tensor

log = logging.getLogger(__name__)

MODES = ("scratch_sn", "scratch_rn", "retrain_all", "transfer")
TRANSFER_TAGS = frozenset({"ain", "estimator", "last_conv"})


@dataclass
class TrainConfig:
    mode: str = "scratch_sn"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    patch_size: int = 32
    steps: int = 1000
    lambda_asymm: float = 0.05
    w1: float = 0.2
    w4: float = 0.8
    alpha: float = 0.25
    freeze_ablation: tuple[str, ...] = ()
    augment: bool = True
    seed: int = 0
    log_every: int = 100
    val_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.freeze_ablation = tuple(self.freeze_ablation)
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0 < self.alpha < 0.5:
            raise ConfigurationError(f"alpha must be in (0, 0.5), got {self.alpha}")
        if self.steps < 0 or self.batch_size < 1 or self.patch_size < 4:
            raise ConfigurationError("steps >= 0, batch_size >= 1 and patch_size >= 4 required")
        bad = set(self.freeze_ablation) - TRANSFER_TAGS
        if bad:
            raise ConfigurationError(f"freeze_ablation accepts only {sorted(TRANSFER_TAGS)}, got {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["freeze_ablation"] = list(self.freeze_ablation)
        return d


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")


def asymm_loss_single(sigma_hat: Tensor, sigma, alpha: float = 0.25) -> Tensor:
    """Mean of ``|alpha - 1[err < 0]| * err**2`` with ``err = sigma_hat - sigma``.

    Under-estimates are weighted ``1 - alpha``, over-estimates ``alpha``.
    """
    sigma = T.as_tensor(sigma, sigma_hat.dtype)
    _same_shape(sigma_hat, sigma)
    err = sigma_hat - sigma
    weight = np.abs(alpha - (err.data < 0)).astype(err.dtype)
    return T.mean(T.square(err) * weight)


def ms_asymm_loss(sigma_hat_1: Tensor, sigma_hat_4: Tensor, sigma_1, w1: float = 0.2,
                  w4: float = 0.8, alpha: float = 0.25, sigma_4=None) -> Tensor:
    """Two-scale asymmetric loss; ground truth at 1/4 is the 4x4 pool of ``sigma_1``."""
    sigma_1 = T.as_tensor(sigma_1, sigma_hat_1.dtype)
    if sigma_4 is None:
        sigma_4 = T.avg_pool(Tensor(sigma_1.data), 4)
    return (asymm_loss_single(sigma_hat_1, sigma_1, alpha) * w1
            + asymm_loss_single(sigma_hat_4, sigma_4, alpha) * w4)


def recon_loss_rn(x_hat: Tensor, x) -> Tensor:
    """Mean absolute reconstruction error."""
    x = T.as_tensor(x, x_hat.dtype)
    _same_shape(x_hat, x)
    return T.mean(T.abs(x_hat - x))


def joint_loss_sn(x_hat: Tensor, x, sigma_hat_1: Tensor, sigma_hat_4: Tensor, sigma_1,
                  cfg: TrainConfig, sigma_4=None) -> tuple[Tensor, dict]:
    l1 = recon_loss_rn(x_hat, x)
    asymm = ms_asymm_loss(sigma_hat_1, sigma_hat_4, sigma_1, cfg.w1, cfg.w4, cfg.alpha, sigma_4)
    total = l1 + asymm * cfg.lambda_asymm
    return total, {"l1": float(l1.data), "asymm": float(asymm.data)}


# ---------------------------------------------------------------------------
# Optimizer and partition
# ---------------------------------------------------------------------------

class Adam:
    """Adam restricted to parameters whose tag is trainable.

    Moments and step counts are kept per parameter, so frozen parameters
    are never read or written.
    """

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, store: ParamStore, trainable_tags) -> None:
        trainable_tags = set(trainable_tags)
        names = [n for n in store if store.tag(n) in trainable_tags]
        missing = [n for n in names if store[n].grad is None]
        if missing:
            raise RuntimeError(f"adam step before backward: no grad for {missing[:3]}")
        b1, b2 = self.betas
        for name in names:
            p = store[name]
            g = p.grad.astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.steps[name] = 0
            self.steps[name] += 1
            t = self.steps[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"hyper": {"lr": self.lr, "betas": list(self.betas), "eps": self.eps},
                "steps": dict(self.steps), "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.steps = dict(state["steps"])
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def adam_step(store: ParamStore, optimizer: Adam, trainable_tags) -> None:
    optimizer.step(store, trainable_tags)


def partition_parameters(mode: str, freeze_ablation=()) -> frozenset[str]:
    """Tags updated in a given training mode.

    Transfer mode trains AIN modules, the estimator and the last conv;
    each ablation name removes one of those tags.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mode != "transfer":
        return frozenset(TAGS)
    bad = set(freeze_ablation) - TRANSFER_TAGS
    if bad:
        raise ConfigurationError(f"unknown ablation {sorted(bad)}")
    return TRANSFER_TAGS - set(freeze_ablation)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def psnr_batch(x_hat: np.ndarray, x: np.ndarray) -> float:
    mse = float(np.mean((np.clip(x_hat, 0, 1).astype(np.float64) - x) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def validate(store: ParamStore, model_cfg: ModelConfig, val) -> float:
    """Mean PSNR over ``val`` (a PairDataset) with no tape recorded."""
    scores = []
    for y, x in zip(val.noisy, val.clean):
        x_hat, _, _ = aindnet_forward(Tensor(y[None].astype(np.float32)), store, model_cfg)
        scores.append(psnr_batch(x_hat.data[0], x))
    return float(np.mean(scores))


class MetricsLog:
    """Plain-text metrics, one ``key=value`` record per line."""

    def __init__(self, stream: TextIO | None = None):
        self.stream = stream
        self.records: list[dict] = []

    def write(self, **fields) -> None:
        self.records.append(fields)
        if self.stream is not None:
            parts = []
            for k, v in fields.items():
                parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
            self.stream.write(" ".join(parts) + "\n")
            self.stream.flush()


def train(dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          init: Checkpoint | None = None, val=None, metrics: MetricsLog | None = None,
          callback: Callable[[int, ParamStore], None] | None = None) -> Checkpoint:
    """Run ``cfg.steps`` optimisation steps and return the resulting checkpoint.

    Scratch modes start from fresh parameters seeded by ``cfg.seed``;
    ``retrain_all`` and ``transfer`` continue from ``init``.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.mode in ("transfer", "retrain_all") and init is None:
        raise ConfigurationError(f"mode {cfg.mode!r} requires an init checkpoint")
    if model_cfg is None:
        if init is None:
            raise ConfigurationError("model_cfg or init required")
        model_cfg = init.model_config
    elif init is not None and init.model_config != model_cfg:
        raise ConfigurationError("init checkpoint architecture differs from model_cfg")
    if cfg.mode == "scratch_sn" and not dataset.has_sigma:
        raise ConfigurationError("scratch_sn needs ground-truth noise maps")
    if cfg.steps == 0 and init is not None:
        return Checkpoint(init.model_config, init.store.copy(), init.optimizer, dict(init.meta))

    metrics = metrics or MetricsLog()
    trainable = partition_parameters(cfg.mode, cfg.freeze_ablation)
    metrics.write(step=0, mode=cfg.mode, trainable=",".join(sorted(trainable)))

    if cfg.mode.startswith("scratch"):
        store = init_params(model_cfg, cfg.seed)
    else:
        store = init.store.copy()
    for name, t in store.items():
        t.requires_grad = store.tag(name) in trainable

    opt = Adam(cfg.lr, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    for step in range(1, cfg.steps + 1):
        batch = dataset.sample(rng, cfg.batch_size, cfg.patch_size, cfg.augment)
        with Tape() as tape:
            x_hat, s1, s4 = aindnet_forward(Tensor(batch.noisy), store, model_cfg)
            if cfg.mode == "scratch_sn":
                loss, parts = joint_loss_sn(x_hat, batch.clean, s1, s4, batch.sigma1, cfg,
                                            batch.sigma4)
            else:
                loss = recon_loss_rn(x_hat, batch.clean)
                parts = {"l1": float(loss.data)}
        tape.backward(loss)
        opt.step(store, trainable)
        store.zero_grad()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss at step {step}")
        record = {"step": step, "loss": float(loss.data), **parts}
        if val is not None and cfg.val_every and step % cfg.val_every == 0:
            record["val_psnr"] = validate(store, model_cfg, val)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps or "val_psnr" in record):
            metrics.write(**record)
            log.debug("step %d loss %.5f", step, record["loss"])
        if callback is not None:
            callback(step, store)

    for _, t in store.items():
        t.requires_grad = True
    meta = {"mode": cfg.mode, "steps": cfg.steps, "seed": cfg.seed}
    return Checkpoint(model_cfg, store, opt.state_dict(), meta)


def train_estimator(dataset, cfg: TrainConfig, model_cfg: ModelConfig, kind: str = "unet",
                    metrics: MetricsLog | None = None) -> ParamStore:
    """Estimator-only L1 regression of the full-resolution noise map.

    ``kind`` is ``"unet"`` (multi-scale estimator) or ``"fcn"`` (five-conv
    baseline).  Both see identical batches for a given seed.
    """
    if kind == "unet":
        store = ParamStore()
        full = init_params(model_cfg, cfg.seed)
        for name in full.names_with_tag("estimator"):
            store.add(name, full[name].data.copy(), "estimator")
        forward = lambda y: estimator_forward(y, store, model_cfg)[0]  # noqa: E731
    elif kind == "fcn":
        store = init_fcn_params(model_cfg, cfg.seed)
        forward = lambda y: fcn_estimator_forward(y, store, model_cfg)  # noqa: E731
    else:
        raise ConfigurationError(f"unknown estimator kind {kind!r}")
    metrics = metrics or MetricsLog()
    opt = Adam(cfg.lr, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    for step in range(1, cfg.steps + 1):
        batch = dataset.sample(rng, cfg.batch_size, cfg.patch_size, cfg.augment)
        with Tape() as tape:
            loss = recon_loss_rn(forward(Tensor(batch.noisy)), batch.sigma1)
        tape.backward(loss)
        opt.step(store, {"estimator"})
        store.zero_grad()
        if cfg.log_every and step % cfg.log_every == 0:
            metrics.write(step=step, loss=float(loss.data))
    return store


def estimator_fn(store: ParamStore, model_cfg: ModelConfig, kind: str = "unet"):
    """Array -> array full-resolution estimate for a trained estimator store."""
    def run(y: np.ndarray) -> np.ndarray:
        t = Tensor(np.asarray(y, dtype=np.float32))
        if kind == "fcn":
            return fcn_estimator_forward(t, store, model_cfg).data
        return estimator_forward(t, store, model_cfg)[0].data
    return run
