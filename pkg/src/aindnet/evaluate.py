"""Image-quality metrics, estimator accuracy, self-ensemble and few-shot harness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .checkpoint import Checkpoint
from .data import PairDataset, dihedral, inverse_dihedral
from .model import AINDNet
from .noise import NoiseParams, synthesize_pair
from .tensor import ConfigurationError
from .train import TrainConfig, train

LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, k1: float = 0.01,
         k2: float = 0.03, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows; colour images use luma."""
    a, b = _to_gray(a), _to_gray(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    w = _gaussian_window(win, sigma)
    r = win // 2

    def filt(z):
        z = correlate1d(correlate1d(z, w, axis=0), w, axis=1)
        return z[r:-r, r:-r]

    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Estimator accuracy
# ---------------------------------------------------------------------------

SIGMA_GRID = ((0.08, 0.02), (0.08, 0.04), (0.08, 0.06),
              (0.12, 0.02), (0.12, 0.04), (0.12, 0.06))


def estimator_accuracy(estimate: Callable[[np.ndarray], np.ndarray], images: Sequence[np.ndarray],
                       grid: Iterable[tuple[float, float]] = SIGMA_GRID,
                       crf_gamma: float = 2.2, seed: int = 0) -> list[dict]:
    """MAE and error STD of ``estimate`` (full-resolution map) per grid cell.

    ``estimate`` maps an (N, H, W, C) noisy batch to an (N, H, W, C) sigma
    map.  The last row is the average over cells.
    """
    if estimate is None:
        raise ValueError("no estimator given")
    rows = []
    for k, (s, c) in enumerate(grid):
        rng = np.random.default_rng([seed, k])
        errors = []
        for im in images:
            pair = synthesize_pair(im, NoiseParams(s, c, crf_gamma), rng=rng)
            est = np.asarray(estimate(pair.noisy[None]))[0]
            errors.append((est.astype(np.float64) - pair.sigma1).ravel())
        err = np.concatenate(errors)
        rows.append({"sigma_s": s, "sigma_c": c, "mae": float(np.mean(np.abs(err))),
                     "std": float(np.std(err))})
    rows.append({"sigma_s": "avg", "sigma_c": "", "mae": float(np.mean([r["mae"] for r in rows])),
                 "std": float(np.mean([r["std"] for r in rows]))})
    return rows


# ---------------------------------------------------------------------------
# Self-ensemble
# ---------------------------------------------------------------------------

def self_ensemble_denoise(model: Callable[[np.ndarray], np.ndarray], y: np.ndarray) -> np.ndarray:
    """Average ``model`` over the 8 rotations/flips of an (N, H, W, C) batch."""
    acc = None
    for d in range(8):
        out = inverse_dihedral(np.asarray(model(np.ascontiguousarray(dihedral(y, d, axes=(1, 2))))),
                               d, axes=(1, 2))
        acc = out.astype(np.float64) if acc is None else acc + out
    return (acc / 8).astype(y.dtype)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_image: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, name: str, **metrics) -> None:
        self.per_image.append({"image": name, **metrics})

    def aggregate(self) -> dict:
        keys = [k for k in self.per_image[0] if k != "image"] if self.per_image else []
        return {k: float(np.mean([r[k] for r in self.per_image])) for k in keys}

    def rows(self) -> list[dict]:
        return self.per_image + [{"image": "mean", **self.aggregate()}]

    def to_text(self) -> str:
        header = "".join(f"# {k}: {v}\n" for k, v in self.meta.items())
        return header + format_table(self.rows())

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), self.meta)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    cells = [[_fmt(r.get(c, "-")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    # first column (labels) left-aligned, values right-aligned
    def line(values):
        return "  ".join(v.ljust(w) if i == 0 else v.rjust(w)
                         for i, (v, w) in enumerate(zip(values, widths))).rstrip()

    lines = [line(cols), line(["-" * w for w in widths])] + [line(row) for row in cells]
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: list[dict], meta: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    if rows:
        cols = list(rows[0])
        for r in rows[1:]:
            cols += [k for k in r if k not in cols]
        writer = csv.DictWriter(buf, fieldnames=cols, restval="", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def evaluate_pairs(denoise: Callable[[np.ndarray], np.ndarray], pairs: PairDataset,
                   meta: dict | None = None) -> EvalReport:
    report = EvalReport(meta=dict(meta or {}))
    for i, (y, x) in enumerate(zip(pairs.noisy, pairs.clean)):
        out = np.clip(denoise(y[None])[0], 0, 1)
        report.add(f"img{i:03d}", psnr=psnr(out, x), ssim=ssim(out, x))
    return report


# ---------------------------------------------------------------------------
# Few-shot transfer
# ---------------------------------------------------------------------------

FEWSHOT_MODES = ("scratch_rn", "retrain_all", "transfer")


def fewshot_transfer_experiment(source: Checkpoint, target_train: PairDataset,
                                target_test: PairDataset, ks: Sequence[int],
                                modes: Sequence[str] = FEWSHOT_MODES,
                                train_cfg: TrainConfig | None = None) -> list[dict]:
    """PSNR on ``target_test`` after fine-tuning on the first k target pairs.

    One row per (mode, k).  k = 0 evaluates the source model unchanged for
    the modes that start from it; scratch at k = 0 is reported as None.
    """
    base = train_cfg or TrainConfig()
    if max(ks) > len(target_train):
        raise ValueError(f"k={max(ks)} exceeds the {len(target_train)} available target pairs")
    rows = []
    for mode in modes:
        for k in ks:
            if k == 0:
                if mode == "scratch_rn":
                    rows.append({"mode": mode, "k": 0, "psnr": None})
                    continue
                ckpt = source
            else:
                cfg = TrainConfig(**{**base.to_dict(), "mode": mode})
                ckpt = train(target_train.subset(k), cfg, source.model_config, init=source)
            net = AINDNet(ckpt.model_config, ckpt.store)
            rep = evaluate_pairs(net.denoise, target_test)
            rows.append({"mode": mode, "k": k, "psnr": rep.aggregate()["psnr"]})
    return rows


def fewshot_table(rows: list[dict]) -> str:
    """Pivot (mode, k, psnr) rows into a mode x k table."""
    ks = sorted({r["k"] for r in rows})
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    table = []
    for m in modes:
        row = {"mode": m}
        for r in rows:
            if r["mode"] == m:
                row[str(r["k"])] = "-" if r["psnr"] is None else r["psnr"]
        table.append(row)
    return format_table([{"mode": t["mode"], **{str(k): t.get(str(k), "-") for k in ks}}
                         for t in table])
