import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image

from conftest import NATURAL, natural_image
from ssiu.cli import main
from ssiu.config import ConfigError, RunConfig, SSIUConfig, default_config_path, dump_yaml, load_run_config
from ssiu.data import save_image
from ssiu.model import build_model, save_checkpoint, zero_parameters


def toy_config(tmp_path, **train):
    data_root = tmp_path / "data"
    for n in NATURAL[:3]:
        save_image(natural_image(n, (48, 48)), data_root / "train" / "HR" / f"{n}.png")
    cfg = {
        "model": {
            "scale": 2,
            "channels": 8,
            "num_stages": 3,
            "moe_taps": [1, 2, 3],
            "esam": {"num_heads": 2, "pool_kernel": 2, "pool_stride": 2, "block_size": 4, "overlap": 2},
        },
        "train": {"batch_size": 2, "patch_lr": 12, "total_iters": 3, "checkpoint_every": 3, **train},
        "data": {"train_root": str(data_root)},
        "output_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "toy.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


# -------------------------------------------------------------------- train


def test_train_toy_config(tmp_path, capsys):
    cfg = toy_config(tmp_path)
    assert main(["train", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "checkpoints" / "latest.ckpt").is_file()
    assert (run / "logs" / "metrics.jsonl").is_file()
    assert (run / "reports").is_dir()
    saved = yaml.safe_load((run / "config.yaml").read_text())
    # every default is written out, not just the keys present in the input file
    assert saved["train"]["lambda_f"] == 0.01
    assert saved["model"]["msgm"]["hidden_ratio"] == 0.5
    assert saved["train"]["adam_betas"] == [0.9, 0.999]


def test_train_override_is_materialised(tmp_path):
    cfg = toy_config(tmp_path)
    assert main(["train", str(cfg), "--set", "train.lambda_f=0", "--output-dir", str(tmp_path / "o")]) == 0
    saved = yaml.safe_load((tmp_path / "o" / "config.yaml").read_text())
    assert saved["train"]["lambda_f"] == 0


def test_train_missing_dataset_names_field(tmp_path, capsys):
    cfg = toy_config(tmp_path)
    code = main(["train", str(cfg), "--set", f"data.train_root={tmp_path / 'absent'}"])
    assert code != 0
    assert "data.train_root" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize(
    "override,field",
    [("model.moe_taps=[1,3,2]", "model.moe_taps"), ("train.batch_size=0", "train.batch_size"), ("model.bogus=1", "model.bogus")],
)
def test_train_invalid_config_field_messages(tmp_path, capsys, override, field):
    cfg = toy_config(tmp_path)
    assert main(["train", str(cfg), "--set", override]) == 2
    assert field in capsys.readouterr().err


def test_rerun_from_materialised_config_is_bit_exact(tmp_path):
    cfg = toy_config(tmp_path)
    env = {**os.environ, "PYTHONHASHSEED": "0"}
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        source = cfg if name == "a" else tmp_path / "a" / "config.yaml"
        subprocess.run(
            [sys.executable, "-m", "ssiu.cli", "train", str(source), "--deterministic", "--output-dir", str(out)],
            check=True,
            env=env,
            capture_output=True,
        )
        outs.append((out / "checkpoints" / "latest.ckpt").read_bytes())
    assert outs[0] == outs[1]


# --------------------------------------------------------------------- eval


@pytest.fixture
def zero_ckpt(tmp_path):
    path = tmp_path / "zero_x2.ckpt"
    save_checkpoint(zero_parameters(build_model(SSIUConfig(scale=2, channels=8, num_stages=3, moe_taps=(1, 2, 3)))), path)
    return path


@pytest.fixture
def one_image_set(tmp_path):
    root = tmp_path / "bench"
    save_image(natural_image("astronaut", (64, 64)), root / "test" / "HR" / "astronaut.png")
    return root


def test_eval_zero_checkpoint(zero_ckpt, one_image_set, tmp_path, capsys):
    report = tmp_path / "r.jsonl"
    assert main(["eval", str(zero_ckpt), str(one_image_set), "--scale", "2", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert "astronaut" in out and "mean" in out
    summary = json.loads(report.read_text().splitlines()[-1])
    assert summary["type"] == "summary" and np.isfinite(summary["mean_psnr"])
    assert summary["params"] > 0 and summary["flops_1280x720"] > 0


def test_eval_scale_mismatch(zero_ckpt, one_image_set, capsys):
    assert main(["eval", str(zero_ckpt), str(one_image_set), "--scale", "4"]) != 0
    assert "x2" in capsys.readouterr().err


def test_eval_corrupted_checkpoint(zero_ckpt, one_image_set, capsys):
    data = bytearray(zero_ckpt.read_bytes())
    data[len(data) // 3] ^= 0x55
    zero_ckpt.write_bytes(bytes(data))
    assert main(["eval", str(zero_ckpt), str(one_image_set), "--scale", "2"]) != 0
    assert "integrity" in capsys.readouterr().err


def test_eval_missing_dataset(zero_ckpt, tmp_path):
    assert main(["eval", str(zero_ckpt), str(tmp_path / "nothing"), "--scale", "2"]) != 0


# -------------------------------------------------------------------- infer


@pytest.fixture
def x4_ckpt(tmp_path):
    path = tmp_path / "x4.ckpt"
    save_checkpoint(build_model(SSIUConfig(scale=4, channels=8, num_stages=3, moe_taps=(1, 2, 3)), seed=1), path)
    return path


def test_infer_writes_upscaled_png(x4_ckpt, tmp_path):
    src = tmp_path / "in.png"
    save_image(natural_image("chelsea", (24, 24)), src)
    assert main(["infer", str(x4_ckpt), str(src), str(tmp_path / "out.png")]) == 0
    with Image.open(tmp_path / "out.png") as im:
        assert im.size == (96, 96) and im.mode == "RGB"


def test_infer_is_repeatable(x4_ckpt, tmp_path):
    src = tmp_path / "in.png"
    save_image(natural_image("coffee", (20, 28)), src)
    main(["infer", str(x4_ckpt), str(src), str(tmp_path / "a.png")])
    main(["infer", str(x4_ckpt), str(src), str(tmp_path / "b.png")])
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_infer_grayscale_warns(x4_ckpt, tmp_path, capsys):
    src = tmp_path / "gray.png"
    Image.fromarray(np.full((16, 16), 90, dtype=np.uint8), mode="L").save(src)
    with pytest.warns(UserWarning, match="single-channel"):
        assert main(["infer", str(x4_ckpt), str(src), str(tmp_path / "o.png")]) == 0
    assert "grayscale" in capsys.readouterr().err
    with Image.open(tmp_path / "o.png") as im:
        assert im.mode == "RGB" and im.size == (64, 64)


def test_infer_unreadable_input(x4_ckpt, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"definitely not a png")
    assert main(["infer", str(x4_ckpt), str(bad), str(tmp_path / "o.png")]) != 0
    assert main(["infer", str(x4_ckpt), str(tmp_path / "missing.png"), str(tmp_path / "o.png")]) != 0


# ------------------------------------------------------------- oracle-check


def test_oracle_check_default_passes(capsys):
    assert main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 20 and "20/20" in out


def test_oracle_check_empty(capsys):
    assert main(["oracle-check", "--n-instances", "0"]) == 0
    assert "0/0" in capsys.readouterr().out


def test_oracle_check_tampered_tolerance_fails(capsys):
    assert main(["oracle-check", "--n-instances", "5", "--atol", "1e-12"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "failed seeds" in out


# -------------------------------------------------------------------- flops


def _parse_flops(out):
    params = int(re.search(r"parameters: (\d+)", out).group(1))
    flops = int(re.search(r"output: (\d+)", out).group(1))
    return params, flops


def test_flops_default_x4(capsys):
    assert main(["flops", "--config", str(default_config_path(4)), "720", "1280"]) == 0
    out = capsys.readouterr().out
    params, flops = _parse_flops(out)
    assert abs(params - 794_000) <= 79_400
    assert abs(flops - 49e9) <= 0.15 * 49e9
    assert "FLOP accounting" in out


def test_flops_x2(capsys):
    assert main(["flops", "--config", str(default_config_path(2))]) == 0
    params, _ = _parse_flops(capsys.readouterr().out)
    assert abs(params - 778_000) <= 77_800


def test_flops_zero_stage_head_only(capsys):
    assert main(["flops", "--set", "model.num_stages=0", "--set", "model.use_moe_fs=false"]) == 0
    params, _ = _parse_flops(capsys.readouterr().out)
    C, s = 64, 4
    assert params == (3 * 9 * C + C) + (C * C * s * s + C * s * s) + (C * 9 * 3 + 3)


def test_flops_invalid_config(capsys):
    assert main(["flops", "--set", "model.scale=5"]) == 2


# ------------------------------------------------------------------- config


def test_shipped_configs_are_materialised():
    for s in (2, 3, 4):
        path = default_config_path(s)
        cfg = load_run_config(path)
        assert cfg.model.scale == s
        cfg.model.validate()
        # the file already holds every field, so re-dumping changes nothing but comments
        body = "\n".join(l for l in path.read_text().splitlines() if not l.startswith("#")) + "\n"
        assert dump_yaml(cfg) == body


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  lerning_rate: 0.1\n")
    with pytest.raises(ConfigError) as err:
        load_run_config(path)
    assert err.value.field == "train.lerning_rate"


def test_override_parsing():
    cfg = load_run_config(None, ["model.esam.num_heads=8", "train.grad_clip=0.5", "data.max_images=null"])
    assert cfg.model.esam.num_heads == 8 and cfg.train.grad_clip == 0.5 and cfg.data.max_images is None
    with pytest.raises(ConfigError):
        load_run_config(None, ["model.scale"])


def test_yaml_round_trip(tmp_path):
    assert load_run_config(None, []).model == SSIUConfig()
    cfg = RunConfig()
    cfg.model.moe_taps = (2, 5, 9)
    (tmp_path / "c.yaml").write_text(dump_yaml(cfg))
    assert load_run_config(tmp_path / "c.yaml") == cfg
