import hashlib
import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from aindnet.checkpoint import MAGIC, Checkpoint, CheckpointError
from aindnet.cli import main
from aindnet.config import config_from_dict, load_config
from aindnet.imageio import load_dataset, quantize, read_image, read_manifest, write_image
from aindnet.model import ModelConfig, init_params
from aindnet.params import ParamStore
from aindnet.tensor import ConfigurationError

TINY = {"base_channels": 4, "num_scales": 2, "blocks_per_scale": 1, "estimator_channels": 4,
        "ain_hidden": 4}


# ---------------------------------------------------------------- checkpoint

names = st.text("abcdefghij", min_size=1, max_size=6)
shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3)
dtypes = st.sampled_from([np.float32, np.float64])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(names, shapes, dtypes, st.sampled_from(["ain", "estimator", "backbone"])),
                min_size=1, max_size=6, unique_by=lambda e: e[0]),
       st.integers(0, 2 ** 16))
def test_checkpoint_round_trip_is_bit_exact(entries, seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, dt, tag in entries:
        store.add(name, rng.normal(size=shape).astype(dt), tag)
    ck = Checkpoint(ModelConfig(**TINY), store, meta={"step": seed})
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert list(back.store) == list(store)
    for name in store:
        a, b = store[name].data, back.store[name].data
        assert a.dtype == b.dtype and a.shape == b.shape
        assert a.tobytes() == b.tobytes()
        assert back.store.tag(name) == store.tag(name)
    assert back.model_config == ck.model_config
    assert back.meta == {"step": seed}
    assert back.to_bytes() == ck.to_bytes()


def test_checkpoint_optimizer_state_round_trip():
    cfg = ModelConfig(**TINY)
    store = init_params(cfg, seed=0)
    name = next(iter(store))
    opt = {"hyper": {"lr": 1e-4}, "steps": 3, "m": {name: np.ones(store[name].shape, np.float32)},
           "v": {name: np.full(store[name].shape, 2.0, np.float32)}}
    back = Checkpoint.from_bytes(Checkpoint(cfg, store, opt).to_bytes())
    assert back.optimizer["steps"] == 3 and back.optimizer["hyper"] == {"lr": 1e-4}
    np.testing.assert_array_equal(back.optimizer["v"][name], 2.0)


def test_checkpoint_trailer_is_sha256_of_body(tmp_path):
    ck = Checkpoint(ModelConfig(**TINY), init_params(ModelConfig(**TINY), seed=1))
    digest = ck.save(tmp_path / "a.ckpt")
    blob = (tmp_path / "a.ckpt").read_bytes()
    assert blob.startswith(MAGIC)
    assert blob[-32:] == hashlib.sha256(blob[:-32]).digest()
    assert digest == hashlib.sha256(blob).hexdigest() == ck.checksum()


def test_checkpoint_rejects_bad_magic_and_tampering():
    ck = Checkpoint(ModelConfig(**TINY), init_params(ModelConfig(**TINY), seed=1))
    blob = bytearray(ck.to_bytes())
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(blob[8:]))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        Checkpoint.from_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"")


def test_checkpoint_architecture_mismatch_is_an_error():
    cfg = ModelConfig(**TINY)
    blob = Checkpoint(cfg, init_params(cfg, seed=0)).to_bytes()
    assert Checkpoint.from_bytes(blob, expected_config=cfg).model_config == cfg
    with pytest.raises(CheckpointError, match="architecture"):
        Checkpoint.from_bytes(blob, expected_config=ModelConfig(**{**TINY, "base_channels": 8}))


def test_checkpoint_payload_is_little_endian():
    store = ParamStore()
    store.add("w", np.array([1.0], dtype=">f4"), "backbone")
    blob = Checkpoint(ModelConfig(**TINY), store).to_bytes()
    assert np.array([1.0], "<f4").tobytes() in blob
    back = Checkpoint.from_bytes(blob)
    assert back.store["w"].data[0] == 1.0


# ---------------------------------------------------------------- config

def test_config_defaults_round_trip_through_yaml():
    cfg = load_config(None)
    again = config_from_dict(yaml.safe_load(cfg.dump()))
    assert again.resolved() == cfg.resolved()


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"model": {"channels": 3}},
    {"train": {"learning_rate": 1e-3}},
    {"noise": {"sigma": 0.1}},
    {"train": {"seed": 3}},
])
def test_config_rejects_unknown_keys(raw):
    with pytest.raises(ConfigurationError, match="unknown"):
        config_from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"noise": {"sigma_s": [0.2, 0.1]}},
    {"noise": {"kind": "poisson"}},
    {"train": {"mode": "finetune"}},
    {"seed": "zero"},
])
def test_config_validation_errors(raw):
    with pytest.raises(ConfigurationError):
        config_from_dict(raw)


def test_config_scalar_range_is_promoted():
    cfg = config_from_dict({"noise": {"crf_gamma": 2.2}})
    assert cfg.noise.crf_gamma == (2.2, 2.2)


# ---------------------------------------------------------------- image io

@pytest.mark.parametrize("bits", [8, 16])
@pytest.mark.parametrize("channels", [1, 3])
def test_image_round_trip(tmp_path, bits, channels):
    img = np.random.default_rng(0).random((7, 9, channels))
    path = tmp_path / "x.png"
    write_image(path, img, bits=bits)
    back = read_image(path)
    assert back.shape == img.shape
    peak = 2 ** bits - 1
    np.testing.assert_array_equal(np.round(back.astype(np.float64) * peak), quantize(img, bits))


def test_image_channel_order_is_rgb(tmp_path):
    img = np.zeros((2, 2, 3))
    img[..., 0] = 1.0
    write_image(tmp_path / "r.png", img)
    back = read_image(tmp_path / "r.png")
    assert back[0, 0].tolist() == [1.0, 0.0, 0.0]


def test_quantize_rounds_half_away_from_zero():
    q = quantize(np.array([0.5 / 255, 1.5 / 255, 2.5 / 255, -0.1, 1.2]))
    assert q.tolist() == [1, 2, 3, 0, 255]


def test_read_image_missing(tmp_path):
    with pytest.raises(OSError):
        read_image(tmp_path / "nope.png")


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {"seed": 3, "model": TINY,
           "train": {"batch_size": 2, "patch_size": 16, "steps": 3, "log_every": 1},
           "data": {"synthetic_count": 4, "synthetic_size": 24},
           "fewshot": {"ks": [0, 1], "train_pairs": 2, "test_pairs": 2, "image_size": 24}}
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["synthesize", "--config", str(path), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(path), "--out", str(root / "sn")]) == 0
    return root, path


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_synthesize_writes_manifest(workspace):
    root, _ = workspace
    manifest = read_manifest(root / "data")
    assert manifest["count"] == 4
    ds = load_dataset(root / "data")
    assert len(ds.noisy) == 4 and ds.sigma1 is not None
    assert ds.noisy[0].shape == (24, 24, 3)
    assert (root / "data" / "resolved_config.yaml").is_file()


def test_synthesize_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    a = read_manifest(root / "data")["items"]
    b = read_manifest(tmp_path)["items"]
    assert [e["files"] for e in a] == [e["files"] for e in b]


def test_synthesize_zero_noise_matches_clean(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"noise": {"sigma_s": 0, "sigma_c": 0},
                                   "data": {"synthetic_count": 2, "synthetic_size": 16}}))
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    for i in range(2):
        noisy = (tmp_path / "d" / f"000{i}_noisy.png").read_bytes()
        assert noisy == (tmp_path / "d" / f"000{i}_clean.png").read_bytes()


def test_resolved_config_prints_every_default(workspace):
    root, _ = workspace
    resolved = yaml.safe_load((root / "sn" / "resolved_config.yaml").read_text())
    assert resolved["model"]["lambda_ms"] == 0.8
    assert resolved["train"]["alpha"] == 0.25
    assert resolved["model"]["base_channels"] == 4
    assert set(resolved) == {"seed", "model", "train", "noise", "target_noise", "data", "fewshot"}


def test_train_writes_checkpoint_and_log(workspace):
    root, _ = workspace
    ck = Checkpoint.load(root / "sn" / "checkpoint.ckpt")
    assert ck.model_config == ModelConfig(**TINY)
    lines = (root / "sn" / "metrics.log").read_text().splitlines()
    assert lines[0].startswith("step=0 mode=scratch_sn")


@pytest.mark.parametrize("ablation,expected", [
    ([], "ain,estimator,last_conv"),
    (["--freeze-ablation", "ain"], "estimator,last_conv"),
    (["--freeze-ablation", "estimator"], "ain,last_conv"),
])
def test_transfer_logs_trainable_tags(workspace, tmp_path, capsys, ablation, expected):
    root, cfg = workspace
    code, out = _run(capsys, ["transfer", "--config", cfg, "--init", root / "sn" / "checkpoint.ckpt",
                              "--steps", 1, "--out", tmp_path, *ablation])
    assert code == 0
    first = (tmp_path / "metrics.log").read_text().splitlines()[0]
    assert first == f"step=0 mode=transfer trainable={expected}"
    assert f"trainable={expected} " in out.out


def test_transfer_zero_steps_reproduces_init(workspace, tmp_path):
    root, cfg = workspace
    init = root / "sn" / "checkpoint.ckpt"
    assert main(["transfer", "--config", str(cfg), "--init", str(init), "--steps", "0",
                 "--out", str(tmp_path)]) == 0
    a = Checkpoint.load(init)
    b = Checkpoint.load(tmp_path / "checkpoint.ckpt")
    assert a.store.digest() == b.store.digest()


def test_transfer_on_synthesized_dataset(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 3, "model": TINY,
                                   "train": {"batch_size": 2, "patch_size": 16, "steps": 2},
                                   "data": {"dataset_dir": str(root / "data")}}))
    assert main(["transfer", "--config", str(cfg), "--init", str(root / "sn" / "checkpoint.ckpt"),
                 "--out", str(tmp_path / "o")]) == 0


def test_denoise_keeps_dimensions_and_is_deterministic(workspace, tmp_path):
    root, _ = workspace
    img = np.random.default_rng(0).random((20, 28, 3))
    write_image(tmp_path / "in.png", img)
    ckpt = str(root / "sn" / "checkpoint.ckpt")
    outs = []
    for k, extra in enumerate([[], [], ["--ensemble"]]):
        d = tmp_path / f"o{k}"
        assert main(["denoise", "--init", ckpt, "--out", str(d), *extra, str(tmp_path / "in.png")]) == 0
        outs.append((d / "in_denoised.png").read_bytes())
        assert read_image(d / "in_denoised.png").shape == img.shape
    assert outs[0] == outs[1]


def test_eval_report_carries_hash(workspace, tmp_path, capsys):
    root, cfg = workspace
    init = root / "sn" / "checkpoint.ckpt"
    code, out = _run(capsys, ["eval", "--config", cfg, "--init", init, "--out", tmp_path, root / "data"])
    assert code == 0
    csv = (tmp_path / "report.csv").read_text()
    ck = Checkpoint.load(init)
    assert f"# config_hash={ck.config_hash()}" in csv
    assert f"# checkpoint_sha256={ck.checksum()}" in csv
    assert "# seed=3" in csv
    header = [l for l in csv.splitlines() if not l.startswith("#")][0]
    assert header == "image,psnr,ssim,mae,err_std"
    assert "config_hash" in (tmp_path / "report.txt").read_text()


def test_eval_clean_vs_clean(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"noise": {"sigma_s": 0, "sigma_c": 0},
                                   "data": {"synthetic_count": 2, "synthetic_size": 16}}))
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "r"), str(tmp_path / "d")]) == 0
    rows = [l.split(",") for l in (tmp_path / "r" / "report.csv").read_text().splitlines()
            if l.startswith("img")]
    assert rows and all(r[1] == "inf" and float(r[2]) == pytest.approx(1.0) for r in rows)


def test_fewshot_table_rows(workspace, tmp_path):
    root, cfg = workspace
    assert main(["fewshot", "--config", str(cfg), "--init", str(root / "sn" / "checkpoint.ckpt"),
                 "--steps", "1", "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "fewshot.json").read_text())
    assert sorted((r["mode"], r["k"]) for r in rows) == sorted(
        (m, k) for m in ("scratch_rn", "retrain_all", "transfer") for k in (0, 1))
    transfer0 = [r for r in rows if r["mode"] == "transfer" and r["k"] == 0][0]
    assert math.isfinite(transfer0["psnr"])
    assert (tmp_path / "fewshot.txt").read_text().startswith("# seed: 3")


def _assert_error(capsys, argv, category):
    code, out = _run(capsys, argv)
    assert code == 2
    lines = out.err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"aindnet-error[{category}]: ")


def test_error_missing_init(workspace, tmp_path, capsys):
    _, cfg = workspace
    _assert_error(capsys, ["transfer", "--config", cfg, "--out", tmp_path], "usage")


def test_error_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  widht: 3\n")
    _assert_error(capsys, ["train", "--config", cfg, "--out", tmp_path], "config")


def test_error_missing_config_file(tmp_path, capsys):
    _assert_error(capsys, ["train", "--config", tmp_path / "none.yaml", "--out", tmp_path], "io")


def test_error_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 20)
    _assert_error(capsys, ["denoise", "--init", bad, "--out", tmp_path, bad], "checkpoint")


def test_error_channel_mismatch(workspace, tmp_path, capsys):
    root, _ = workspace
    write_image(tmp_path / "g.png", np.zeros((8, 8, 1)))
    _assert_error(capsys, ["denoise", "--init", root / "sn" / "checkpoint.ckpt", "--out", tmp_path,
                           tmp_path / "g.png"], "architecture")


def test_error_train_with_transfer_mode(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  mode: transfer\n")
    _assert_error(capsys, ["train", "--config", cfg, "--out", tmp_path], "config")


def test_error_fewshot_k_too_large(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"fewshot": {"ks": [8], "train_pairs": 2}}))
    _assert_error(capsys, ["fewshot", "--config", cfg, "--init", root / "sn" / "checkpoint.ckpt",
                           "--out", tmp_path], "config")


def test_error_bad_arguments(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["transfer", "--freeze-ablation", "backbone"])
    assert exc.value.code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("aindnet-error[usage]: ")
