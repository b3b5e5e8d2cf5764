import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from ulunas import frontend
from ulunas.cli import DEFAULT_SEED, main
from ulunas.network import ArchitectureSpec, assemble, save_checkpoint


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "m.pt"
    save_checkpoint(path, assemble(ArchitectureSpec.prototype("XDWS", channels=8), seed=0).eval())
    return path


@pytest.fixture
def noisy_wav(tmp_path):
    x = np.random.default_rng(0).standard_normal(24000).astype(np.float32) * 0.1
    frontend.write_wav(tmp_path / "in.wav", x)
    return tmp_path / "in.wav"


def test_enhance_batch_and_stream(tmp_path, ckpt, noisy_wav):
    assert main(["enhance", str(noisy_wav), "--checkpoint", str(ckpt), "--out", str(tmp_path / "b.wav")]) == 0
    assert main(["enhance", str(noisy_wav), "--checkpoint", str(ckpt), "--out", str(tmp_path / "s.wav"),
                 "--stream"]) == 0
    b, s = frontend.read_wav(tmp_path / "b.wav"), frontend.read_wav(tmp_path / "s.wav")
    assert b.shape == s.shape == (24000,)
    assert np.abs(b - s).max() < 1e-5


def test_enhance_silence(tmp_path, ckpt):
    frontend.write_wav(tmp_path / "z.wav", np.zeros(16000), pcm16=True)
    assert main(["enhance", str(tmp_path / "z.wav"), "--checkpoint", str(ckpt), "--out", str(tmp_path / "o.wav")]) == 0
    assert np.abs(frontend.read_wav(tmp_path / "o.wav")).max() < 1e-6


def test_enhance_errors(tmp_path, ckpt, noisy_wav):
    out = str(tmp_path / "o.wav")
    assert main(["enhance", str(tmp_path / "missing.wav"), "--checkpoint", str(ckpt), "--out", out]) == 2
    (tmp_path / "junk.wav").write_text("junk")
    assert main(["enhance", str(tmp_path / "junk.wav"), "--checkpoint", str(ckpt), "--out", out]) == 2
    assert main(["enhance", str(noisy_wav), "--checkpoint", str(ckpt), "--out", out, "--config", "ul_unas.cfg"]) == 3
    assert main(["enhance", str(noisy_wav), "--checkpoint", str(tmp_path / "junk.wav"), "--out", out]) == 3


def test_complexity_outputs(capsys):
    assert main(["complexity", "ul_unas.cfg", "--json-style"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert abs(data["params_total"] / 1e3 - 169) <= 0.05 * 169
    assert abs(data["macs_per_second"] / 1e6 - 34) <= 0.05 * 34
    assert main(["complexity", "--config", "dws.cfg"]) == 0
    text = capsys.readouterr().out
    macs = float(text.split("MACS")[1].split()[0])
    assert abs(macs - 23.72) <= 0.05 * 23.72


def test_complexity_errors(tmp_path, capsys):
    (tmp_path / "g.cfg").write_bytes(b"\x00\x01garbage")
    assert main(["complexity", str(tmp_path / "g.cfg")]) == 2
    (tmp_path / "k.cfg").write_text("types = [Conv, Conv, Conv, Conv, Conv]\nstrides = [1, 1, 1, 1]\n")
    assert main(["complexity", str(tmp_path / "k.cfg")]) == 2
    assert "groups: missing" in capsys.readouterr().err
    assert main(["complexity", str(tmp_path / "nothing.cfg")]) == 2


def test_search_and_plot(tmp_path):
    for run in ("a", "b"):
        assert main(["search", "--config", "toy_search.ini", "--out", str(tmp_path / run), "--seed", "5",
                     "--plot"]) == 0
    a = (tmp_path / "a" / "ranked.cfg").read_text()
    assert a == (tmp_path / "b" / "ranked.cfg").read_text()
    assert (tmp_path / "a" / "trend.png").stat().st_size > 0
    ArchitectureSpec.load(tmp_path / "a" / "best.cfg")
    assert main(["plot", str(tmp_path / "a" / "trend.csv"), "--out", str(tmp_path / "t.png")]) == 0


def test_train_and_plot_losses(tmp_path):
    ck, log = tmp_path / "m.pt", tmp_path / "log.jsonl"
    assert main(["train", "--config", "train_smoke.ini", "--out", str(ck), "--log", str(log), "--steps", "3"]) == 0
    assert ck.exists()
    assert main(["plot", str(log), "--out", str(tmp_path / "loss.png")]) == 0
    assert main(["plot", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "x.png")]) == 2


def test_train_config_errors(tmp_path):
    (tmp_path / "bad.ini").write_text("[train]\nsteps = many\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "m.pt")]) == 2


def test_default_seed_documented():
    assert DEFAULT_SEED == 0
    out = subprocess.run([sys.executable, "-m", "ulunas.cli", "complexity", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "default 0" in out.stdout


def test_runtime_failure_exit_code(monkeypatch):
    import ulunas.cli as cli

    def explode(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "report", explode)
    assert cli.main(["complexity"]) == 4
