"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests.

Each function returns plain dicts so callers can print, assert or dump
them as they like.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .data import SyntheticNoiseDataset, make_pairs, synthetic_image_set
from .evaluate import estimator_accuracy, evaluate_pairs, fewshot_transfer_experiment, psnr
from .model import AINDNet, ModelConfig, count_params, fcn_width
from .noise import SOURCE_DOMAIN, TARGET_DOMAIN, NoiseDomain, awgn_domain
from .train import TrainConfig, estimator_fn, train, train_estimator


@dataclass
class ToyDenoiseSetup:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    patch_size: int = 32
    sigma: float = 25 / 255
    train_images: int = 64
    test_images: int = 8
    image_size: int = 64
    seed: int = 0


def toy_denoise(setup: ToyDenoiseSetup = ToyDenoiseSetup(), model_cfg: ModelConfig | None = None,
                metrics=None) -> dict:
    """Train the micro model on AWGN and report held-out PSNR against the noisy input."""
    model_cfg = model_cfg or ModelConfig.micro()
    domain = awgn_domain(setup.sigma)
    train_imgs = synthetic_image_set(setup.train_images, setup.image_size, seed=setup.seed)
    test = make_pairs(synthetic_image_set(setup.test_images, setup.image_size, seed=setup.seed + 1000),
                      domain, seed=setup.seed + 2000)
    tcfg = TrainConfig(mode="scratch_sn", lr=setup.lr, steps=setup.steps, batch_size=setup.batch_size,
                       patch_size=setup.patch_size, seed=setup.seed, log_every=100)
    t0 = time.perf_counter()
    ckpt = train(SyntheticNoiseDataset(train_imgs, domain), tcfg, model_cfg, metrics=metrics)
    seconds = time.perf_counter() - t0
    net = AINDNet(ckpt.model_config, ckpt.store)
    noisy = float(np.mean([psnr(np.clip(y, 0, 1), x) for y, x in zip(test.noisy, test.clean)]))
    denoised = evaluate_pairs(net.denoise, test).aggregate()["psnr"]
    return {"params": count_params(model_cfg)["total"], "noisy_psnr": noisy,
            "denoised_psnr": denoised, "train_seconds": seconds, "checkpoint": ckpt, "test": test}


@dataclass
class FewshotSetup:
    source_steps: int = 1000
    finetune_steps: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    patch_size: int = 32
    ks: tuple[int, ...] = (0, 1, 4)
    modes: tuple[str, ...] = ("scratch_rn", "retrain_all", "transfer")
    source_images: int = 64
    target_pairs: int = 4
    test_pairs: int = 8
    image_size: int = 64
    seed: int = 0


def fewshot_trend(setup: FewshotSetup = FewshotSetup(), model_cfg: ModelConfig | None = None,
                  source: NoiseDomain = SOURCE_DOMAIN, target: NoiseDomain = TARGET_DOMAIN,
                  source_ckpt: Checkpoint | None = None) -> dict:
    """Source training on ``source`` then the few-shot table on ``target``."""
    model_cfg = model_cfg or ModelConfig.micro()
    s = setup.seed
    if source_ckpt is None:
        imgs = synthetic_image_set(setup.source_images, setup.image_size, seed=s)
        source_ckpt = train(SyntheticNoiseDataset(imgs, source),
                            TrainConfig(mode="scratch_sn", lr=setup.lr, steps=setup.source_steps,
                                        batch_size=setup.batch_size, patch_size=setup.patch_size,
                                        seed=s, log_every=0),
                            model_cfg)
    tgt_train = make_pairs(synthetic_image_set(setup.target_pairs, setup.image_size, seed=s + 1),
                           target, seed=s + 3)
    tgt_test = make_pairs(synthetic_image_set(setup.test_pairs, setup.image_size, seed=s + 2),
                          target, seed=s + 4)
    tcfg = TrainConfig(lr=setup.lr, steps=setup.finetune_steps, batch_size=setup.batch_size,
                       patch_size=setup.patch_size, seed=s, log_every=0)
    rows = fewshot_transfer_experiment(source_ckpt, tgt_train, tgt_test, setup.ks, setup.modes, tcfg)
    return {"rows": rows, "source": source_ckpt,
            "psnr": {(r["mode"], r["k"]): r["psnr"] for r in rows}}


@dataclass
class EstimatorSetup:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 8
    patch_size: int = 32
    train_images: int = 64
    test_images: int = 8
    image_size: int = 64
    crf_gamma: float = 2.2
    seed: int = 0


def estimator_comparison(setup: EstimatorSetup = EstimatorSetup(),
                         model_cfg: ModelConfig | None = None) -> dict:
    """U-Net estimator vs the five-conv baseline, same data, steps and seed.

    The baseline width is chosen so both have about the same parameter
    count.  Returns the per-grid-cell accuracy rows for each.
    """
    model_cfg = model_cfg or ModelConfig()
    imgs = synthetic_image_set(setup.train_images, setup.image_size, seed=setup.seed)
    test = synthetic_image_set(setup.test_images, setup.image_size, seed=setup.seed + 123)
    ds = SyntheticNoiseDataset(imgs, NoiseDomain())
    tcfg = TrainConfig(lr=setup.lr, steps=setup.steps, batch_size=setup.batch_size,
                       patch_size=setup.patch_size, seed=setup.seed, log_every=0)
    out = {"fcn_width": fcn_width(model_cfg)}
    for kind in ("unet", "fcn"):
        store = train_estimator(ds, tcfg, model_cfg, kind)
        rows = estimator_accuracy(estimator_fn(store, model_cfg, kind), test,
                                  crf_gamma=setup.crf_gamma, seed=setup.seed)
        out[kind] = {"params": store.num_params(), "rows": rows, "avg_mae": rows[-1]["mae"]}
    return out
