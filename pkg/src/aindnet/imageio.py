"""Image files and raw tensor datasets on disk.

A synthesized dataset directory looks like::

    manifest.json
    0000_noisy.f32  0000_clean.f32  0000_sigma1.f32  0000_sigma4.f32
    0000_noisy.png  0000_clean.png
    ...

``.f32`` files are raw little-endian float32 (H, W, C) arrays; their shapes
and the noise parameters live in the manifest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import cv2
import numpy as np

from .data import PairDataset

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


def read_image(path) -> np.ndarray:
    """Float32 (H, W, C) RGB or (H, W, 1) gray in [0, 1] from 8/16-bit PNG/PPM."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float32) / 65535.0
    else:
        raise OSError(f"unsupported pixel type {raw.dtype} in {path}")
    if img.ndim == 2:
        return img[:, :, None]
    if img.shape[2] == 4:
        img = img[:, :, :3]
    return np.ascontiguousarray(img[:, :, ::-1])


def quantize(img: np.ndarray, bits: int = 8) -> np.ndarray:
    """Round half away from zero onto the integer grid after clipping to [0, 1]."""
    peak = 2 ** bits - 1
    x = np.clip(np.asarray(img, dtype=np.float64), 0, 1) * peak
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def write_image(path, img: np.ndarray, bits: int = 8) -> None:
    q = quantize(img, bits)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    elif q.ndim == 3:
        q = np.ascontiguousarray(q[:, :, ::-1])
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write image {path}")


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def write_tensor(path, arr: np.ndarray) -> str:
    blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_tensor(path, shape) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float32)


def write_dataset(directory, items: list[dict], meta: dict) -> dict:
    """Write ``items`` (dicts with noisy/clean/sigma1/sigma4 arrays + params)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, it in enumerate(items):
        entry = {"id": f"{i:04d}", "source": it.get("source", ""), "params": it.get("params", {}),
                 "files": {}}
        for key in ("noisy", "clean", "sigma1", "sigma4"):
            arr = it[key]
            fname = f"{i:04d}_{key}.f32"
            entry["files"][key] = {"file": fname, "shape": list(arr.shape), "dtype": "<f4",
                                   "sha256": write_tensor(d / fname, arr)}
        write_image(d / f"{i:04d}_noisy.png", it["noisy"])
        write_image(d / f"{i:04d}_clean.png", it["clean"])
        entries.append(entry)
    manifest = {"format": "aindnet-dataset", "version": 1, "count": len(entries),
                "meta": meta, "items": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


def load_dataset(directory, require_clean: bool = True) -> PairDataset:
    d = Path(directory)
    manifest = read_manifest(d)
    noisy, clean, s1 = [], [], []
    for e in manifest["items"]:
        f = e["files"]
        if require_clean and "clean" not in f:
            raise ValueError(f"dataset item {e['id']} has no clean reference")
        noisy.append(read_tensor(d / f["noisy"]["file"], f["noisy"]["shape"]))
        clean.append(read_tensor(d / f["clean"]["file"], f["clean"]["shape"]))
        if "sigma1" in f:
            s1.append(read_tensor(d / f["sigma1"]["file"], f["sigma1"]["shape"]))
    return PairDataset(noisy, clean, s1 if len(s1) == len(noisy) else None)
