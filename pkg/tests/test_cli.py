import re
import subprocess
import sys

import pytest

from shuffleseg import cli
from shuffleseg.data import read_pnm, write_ppm
from shuffleseg.train import GradCheckReport

COMMANDS = ("describe", "train", "eval", "infer", "gradcheck", "synth")


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line.split("=")[0])


def test_describe_table(capsys):
    code, out, _ = run(capsys, "describe", "--arch", "skipnet", "--input-size", "512x1024")
    assert code == 0
    assert out.splitlines()[0] == "config.variant=skipnet"
    g = float(re.search(r"= ([\d.]+) GFLOPs", out).group(1))
    assert abs(g - 4.52) <= 0.25 * 4.52
    assert "HxW=512x1024, WxH=1024x512" in out


def test_describe_kv_ordering(capsys):
    _, sk, _ = run(capsys, "describe", "--arch", "skipnet", "--report", "kv")
    _, un, _ = run(capsys, "describe", "--arch", "unet", "--report", "kv")
    assert int(kv(un)["total.flops"]) > int(kv(sk)["total.flops"])


def test_describe_pads_and_echoes(capsys):
    code, out, _ = run(capsys, "describe", "--input-size", "360x640", "--report", "kv")
    v = kv(out)
    assert code == 0 and v["input_height"] == "384" and v["requested_height"] == "360"
    assert v["config.requested_size"] == "360x640 (HxW; 640x360 as WxH)"


@pytest.mark.parametrize("size", ["512x", "x1024", "0x64", "512*1024", "abc"])
def test_malformed_size_is_usage_error(capsys, size):
    code, out, err = run(capsys, "describe", "--input-size", size)
    assert code == 1 and "usage:" in err and out == ""


def test_usage_errors(capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "describe", "--bogus")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "train")[0] == 1


@pytest.mark.parametrize("command", COMMANDS)
def test_help(capsys, command):
    code, out, _ = run(capsys, command, "--help")
    assert code == 0 and "usage:" in out and "--" in out


def test_top_level_help_and_module(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and all(c in out for c in COMMANDS)
    proc = subprocess.run([sys.executable, "-m", "shuffleseg", "describe", "--input-size", "64x64", "--report", "kv"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "total.flops=" in proc.stdout


def test_identical_invocations_identical_stdout(capsys, tmp_path):
    a = run(capsys, "describe", "--arch", "dilation4s")[1]
    b = run(capsys, "describe", "--arch", "dilation4s")[1]
    assert a == b
    s1 = run(capsys, "synth", "--out", str(tmp_path), "--count", "2", "--size", "16x32", "--classes", "3")[1]
    s2 = run(capsys, "synth", "--out", str(tmp_path), "--count", "2", "--size", "16x32", "--classes", "3")[1]
    assert s1 == s2 and "config.size=16x32" in s1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--seed", "0", "--count", "8", "--size", "32x64",
                     "--classes", "4"]) == 0
    assert cli.main(["synth", "--out", str(root / "data"), "--seed", "1", "--count", "4", "--size", "32x64",
                     "--classes", "4", "--split", "val"]) == 0
    cfg = root / "train.cfg"
    cfg.write_text(
        "variant = skipnet\nn_classes = 4\nwidth_multiplier = 0.25\ninput_height = 32\ninput_width = 64\n"
        "train_manifest = data/train.txt\nval_manifest = data/val.txt\nclass_table = data/classes.csv\n"
        "max_steps = 4\neval_interval = 2\ncheckpoint_interval = 2\nout_dir = run\n"
    )
    return root, cfg


def test_train_eval_infer(capsys, trained):
    root, cfg = trained
    code, out, _ = run(capsys, "train", "--config", str(cfg))
    assert code == 0 and "config.max_steps=4" in out and "step=4 loss=" in out
    assert (root / "run" / "step000002.sseg").is_file() and (root / "run" / "final.sseg").is_file()
    weights = str(root / "run" / "final.sseg")

    code, out, _ = run(capsys, "eval", "--config", str(cfg), "--weights", weights, "--split", "val")
    assert code == 0 and "config.split=val" in out and "mIoU" in out and "category" in out
    code, out, _ = run(capsys, "eval", "--config", str(cfg), "--weights", weights, "--report", "kv")
    assert 0 <= float(kv(out)["miou"]) <= 1

    for h, w in ((32, 64), (40, 72)):
        img = root / f"img{h}.ppm"
        write_ppm(img, read_pnm(root / "data" / "val_00000.ppm")[:h, :w] if h == 32 else
                  read_pnm(root / "data" / "val_00000.ppm").repeat(2, 0)[:h].repeat(2, 1)[:, :w])
        out_p = root / f"pred{h}.ppm"
        code, out, _ = run(capsys, "infer", "--weights", weights, "--image", str(img), "--out", str(out_p))
        assert code == 0 and read_pnm(out_p).shape == (h, w, 3)
        assert sum(int(v) for k, v in kv(out).items() if k.startswith("pixels.")) == h * w


def test_resume_via_cli(capsys, trained):
    root, cfg = trained
    run(capsys, "train", "--config", str(cfg))
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--resume", str(root / "run" / "step000002.sseg"))
    assert code == 0 and "config.resume=" in out and "step=4 loss=" in out and "step=2 " not in out


def test_data_errors_exit_2(capsys, tmp_path, trained):
    root, cfg = trained
    assert run(capsys, "train", "--config", str(tmp_path / "missing.cfg"))[0] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("variant = skipnet\nlayers = 50\n")
    assert run(capsys, "train", "--config", str(bad))[0] == 2
    junk = tmp_path / "junk.sseg"
    junk.write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "infer", "--weights", str(junk), "--image", "x.ppm", "--out", "y.ppm")
    assert code == 2 and "bad magic" in err
    code, _, err = run(capsys, "eval", "--config", str(cfg), "--weights", str(junk))
    assert code == 2
    code, _, err = run(capsys, "synth", "--out", str(tmp_path), "--size", "8x8")
    assert code == 2


def test_gradcheck_exit_codes(capsys, monkeypatch):
    code, out, _ = run(capsys, "gradcheck", "--arch", "dilation8s", "--seed", "1", "--samples", "4")
    assert code == 0 and "gradcheck=pass" in out and "config.precision=double" in out

    import shuffleseg.train as train_mod

    monkeypatch.setattr(train_mod, "grad_check", lambda *a, **k: GradCheckReport(2e-3, [("w", 0, 1.0, 1.002, 2e-3)]))
    code, out, _ = run(capsys, "gradcheck", "--arch", "skipnet")
    assert code == 3 and "gradcheck=fail" in out
