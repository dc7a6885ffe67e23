"""Command-line entry point: ``aindnet {synthesize,train,transfer,denoise,eval,fewshot}``.

Every failure exits with status 2 and a single stderr line of the form
``aindnet-error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, load_config
from .data import SyntheticNoiseDataset, make_pairs, synthetic_image_set
from .evaluate import (EvalReport, evaluate_pairs, fewshot_table, fewshot_transfer_experiment,
                       psnr, rows_to_csv, self_ensemble_denoise, ssim)
from .imageio import list_images, load_dataset, read_image, write_dataset, write_image
from .model import AINDNet
from .noise import pool_sigma
from .tensor import ConfigurationError
from .train import MetricsLog, train

log = logging.getLogger("aindnet")


class CommandError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _out_dir(args) -> Path:
    if not args.out:
        raise CommandError("usage", "--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    (out / "resolved_config.yaml").write_text(cfg.dump())


def _clean_images(cfg: RunConfig) -> tuple[list[np.ndarray], list[str]]:
    if cfg.data.clean_dir:
        paths = list_images(cfg.data.clean_dir)
        if not paths:
            raise CommandError("data", f"no images in {cfg.data.clean_dir}")
        imgs = [read_image(p) for p in paths]
        channels = cfg.model.in_channels
        if channels == 1:
            imgs = [im.mean(axis=2, keepdims=True) if im.shape[2] == 3 else im for im in imgs]
        return imgs, [p.name for p in paths]
    imgs = synthetic_image_set(cfg.data.synthetic_count, cfg.data.synthetic_size,
                               cfg.model.in_channels, seed=cfg.seed)
    return imgs, [f"synthetic{i:04d}" for i in range(len(imgs))]


def _load_ckpt(path, cfg: RunConfig | None = None) -> Checkpoint:
    if not path:
        raise CommandError("usage", "--init checkpoint is required")
    if not Path(path).is_file():
        raise CommandError("io", f"checkpoint {path} not found")
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    domain = cfg.noise.domain()
    imgs, names = _clean_images(cfg)
    rng = np.random.default_rng(cfg.seed)
    items = []
    for img, name in zip(imgs, names):
        p = domain.draw(rng)
        pair = domain.synthesize(img, rng, params=p)
        items.append({"noisy": pair.noisy, "clean": pair.clean, "sigma1": pair.sigma1,
                      "sigma4": pool_sigma(pair.sigma1), "source": name,
                      "params": {"sigma_s": p.sigma_s, "sigma_c": p.sigma_c,
                                 "crf_gamma": p.crf_gamma, "awgn": domain.awgn}})
    write_dataset(out, items, {"seed": cfg.seed, "noise": cfg.resolved()["noise"]})
    _write_resolved(cfg, out)
    print(f"wrote {len(items)} pairs to {out}")
    return 0


def _train_common(args, cfg: RunConfig, mode: str, init: Checkpoint | None, target: bool) -> int:
    out = _out_dir(args)
    overrides = {"mode": mode}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if getattr(args, "freeze_ablation", None):
        overrides["freeze_ablation"] = tuple(args.freeze_ablation)
    tcfg = cfg.train_config(**overrides)
    if cfg.data.dataset_dir:
        dataset = load_dataset(cfg.data.dataset_dir)
    else:
        imgs, _ = _clean_images(cfg)
        noise = cfg.target_noise if target else cfg.noise
        if mode == "scratch_sn":
            dataset = SyntheticNoiseDataset(imgs, noise.domain())
        else:
            dataset = make_pairs(imgs, noise.domain(), cfg.seed)
    val = load_dataset(cfg.data.val_dir) if cfg.data.val_dir else None
    model_cfg = init.model_config if init is not None else cfg.model
    with open(out / "metrics.log", "w") as fh:
        ckpt = train(dataset, tcfg, model_cfg, init=init, val=val, metrics=MetricsLog(fh))
    digest = ckpt.save(out / "checkpoint.ckpt")
    _write_resolved(cfg, out)
    print(f"trainable={','.join(sorted(_trainable(tcfg)))} checkpoint={out / 'checkpoint.ckpt'} sha256={digest}")
    return 0


def _trainable(tcfg):
    from .train import partition_parameters
    return partition_parameters(tcfg.mode, tcfg.freeze_ablation)


def cmd_train(args) -> int:
    cfg = _config(args)
    mode = cfg.train.mode
    if mode not in ("scratch_sn", "scratch_rn"):
        raise CommandError("config", f"train runs scratch_sn or scratch_rn, got {mode!r}; "
                                     "use the transfer command for fine-tuning")
    return _train_common(args, cfg, mode, None, target=mode == "scratch_rn")


def cmd_transfer(args) -> int:
    cfg = _config(args)
    init = _load_ckpt(args.init)
    mode = "retrain_all" if cfg.train.mode == "retrain_all" else "transfer"
    if args.freeze_ablation and mode != "transfer":
        raise CommandError("config", "--freeze-ablation only applies to transfer mode")
    return _train_common(args, cfg, mode, init, target=True)


def cmd_denoise(args) -> int:
    ckpt = _load_ckpt(args.init)
    out = _out_dir(args)
    if not args.images:
        raise CommandError("usage", "no input images given")
    net = AINDNet(ckpt.model_config, ckpt.store)
    for path in args.images:
        img = read_image(path)
        if img.shape[2] != ckpt.model_config.in_channels:
            raise CommandError("architecture", f"{path} has {img.shape[2]} channels, model expects "
                                               f"{ckpt.model_config.in_channels}")
        y = img[None]
        x_hat = self_ensemble_denoise(net.denoise, y) if args.ensemble else net.denoise(y)
        write_image(out / (Path(path).stem + "_denoised.png"), x_hat[0])
    print(f"denoised {len(args.images)} image(s) into {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    dataset_dir = args.dataset or cfg.data.dataset_dir
    if not dataset_dir:
        raise CommandError("usage", "eval needs a dataset directory")
    pairs = load_dataset(dataset_dir, require_clean=True)
    meta = {"seed": cfg.seed, "dataset": str(dataset_dir)}
    if args.init:
        ckpt = _load_ckpt(args.init)
        net = AINDNet(ckpt.model_config, ckpt.store)
        denoise = net.denoise
        if args.ensemble:
            denoise = lambda y: self_ensemble_denoise(net.denoise, y)  # noqa: E731
        meta.update(config_hash=ckpt.config_hash(), checkpoint_sha256=ckpt.checksum())
    else:
        net, denoise = None, (lambda y: y)
        meta.update(config_hash="none", checkpoint_sha256="none")
    report = EvalReport(meta=meta)
    for i, (y, x) in enumerate(zip(pairs.noisy, pairs.clean)):
        x_hat = np.clip(denoise(y[None])[0], 0, 1)
        row = {"psnr": psnr(x_hat, x), "ssim": ssim(x_hat, x)}
        if net is not None and pairs.sigma1 is not None:
            err = net.estimate(y[None])[0].astype(np.float64) - pairs.sigma1[i]
            row.update(mae=float(np.mean(np.abs(err))), err_std=float(np.std(err)))
        report.add(f"img{i:03d}", **row)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_text(), end="")
    return 0


def cmd_fewshot(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    source = _load_ckpt(args.init)
    fs = cfg.fewshot
    if max(fs.ks) > fs.train_pairs:
        raise CommandError("config", f"k={max(fs.ks)} exceeds fewshot.train_pairs={fs.train_pairs}")
    domain = cfg.target_noise.domain()
    c = source.model_config.in_channels
    train_imgs = synthetic_image_set(fs.train_pairs, fs.image_size, c, seed=cfg.seed + 1)
    test_imgs = synthetic_image_set(fs.test_pairs, fs.image_size, c, seed=cfg.seed + 2)
    tcfg = cfg.train_config(**({"steps": args.steps} if args.steps is not None else {}))
    rows = fewshot_transfer_experiment(source, make_pairs(train_imgs, domain, cfg.seed + 3),
                                       make_pairs(test_imgs, domain, cfg.seed + 4),
                                       fs.ks, fs.modes, tcfg)
    meta = {"seed": cfg.seed, "config_hash": source.config_hash(),
            "checkpoint_sha256": source.checksum()}
    header = "".join(f"# {k}: {v}\n" for k, v in meta.items())
    (out / "fewshot.txt").write_text(header + fewshot_table(rows))
    (out / "fewshot.csv").write_text(rows_to_csv(rows, meta))
    (out / "fewshot.json").write_text(json.dumps(rows, indent=2))
    _write_resolved(cfg, out)
    print(header + fewshot_table(rows), end="")
    return 0


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Argument errors use the same one-line prefix as command failures."""

    def error(self, message):
        self.exit(2, f"aindnet-error[usage]: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aindnet", description="AIN denoiser: synthesize data, train, transfer, denoise, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, init=False):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if init:
            p.add_argument("--init", help="checkpoint file")

    p = sub.add_parser("synthesize", help="write noisy/clean/sigma tuples + manifest")
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train a denoiser from scratch")
    common(p)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="fine-tune a checkpoint on the target domain")
    common(p, init=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--freeze-ablation", action="append", choices=("ain", "estimator", "last_conv"),
                   help="drop one tag from the transfer partition (repeatable)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("denoise", help="denoise PNG/PPM images")
    common(p, init=True)
    p.add_argument("--ensemble", action="store_true", help="8-transform self-ensemble")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM/estimator report on a synthesized dataset")
    common(p, init=True)
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("dataset", nargs="?")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="few-shot transfer table on the target domain")
    common(p, init=True)
    p.add_argument("--steps", type=int, help="fine-tuning steps per (mode, k)")
    p.set_defaults(func=cmd_fewshot)
    return parser


def _limit_threads() -> None:
    n = os.environ.get("AINDNET_THREADS")
    if n:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads()
    try:
        return args.func(args)
    except CommandError as exc:
        category, msg = exc.category, str(exc)
    except CheckpointError as exc:
        category, msg = "checkpoint", str(exc)
    except ConfigurationError as exc:
        category, msg = "config", str(exc)
    except (FileNotFoundError, OSError) as exc:
        category, msg = "io", str(exc)
    except ValueError as exc:
        category, msg = "value", str(exc)
    print(f"aindnet-error[{category}]: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
