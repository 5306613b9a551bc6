import csv
import json

import numpy as np
import pytest

from nit.blocks import NiTModel, load_checkpoint, tiny_config, save_checkpoint
from nit.cli import main
from nit.tokenizer import ToyCodec


@pytest.fixture
def checkpoint(tmp_path):
    codec = ToyCodec(downsample_factor=8)
    model = NiTModel(
        tiny_config(in_channels=codec.latent_channels, num_classes=4), seed=0
    )
    path = tmp_path / "model.nitc"
    save_checkpoint(path, model)
    return str(path)


class TestTrain:
    def test_zero_steps_writes_checkpoint_and_empty_log(self, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("images_per_epoch = 4\ndownsample_factor = 4\n")
        rc = main(
            ["train", "--config", str(cfg), "--out", str(out), "--steps", "0", "--seed", "1"]
        )
        assert rc == 0
        assert load_checkpoint(out / "model.nitc") is not None
        with open(out / "loss.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["step", "loss", "waste", "tokens"]]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 1

    def test_short_run_logs_losses(self, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(
            "images_per_epoch = 4\ndownsample_factor = 4\n"
            "tokens_per_step = 256\nnative_max = 48\n"
        )
        rc = main(["train", "--config", str(cfg), "--out", str(out), "--steps", "2"])
        assert rc == 0
        with open(out / "loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert all(float(r["loss"]) > 0 for r in rows)


class TestSample:
    def test_deterministic_output(self, tmp_path, checkpoint):
        args = [
            "sample", "--checkpoint", checkpoint, "--height", "96", "--width", "160",
            "--class", "3", "--seed", "7", "--steps", "4", "--out",
        ]
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        assert main(args + [str(a)]) == 0
        assert main(args + [str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_ppm_output(self, tmp_path, checkpoint):
        out = tmp_path / "x.ppm"
        rc = main(
            ["sample", "--checkpoint", checkpoint, "--height", "32", "--width", "64",
             "--steps", "2", "--out", str(out)]
        )
        assert rc == 0
        assert out.read_bytes().startswith(b"P6\n64 32\n255\n")

    def test_indivisible_size_fails(self, tmp_path, checkpoint):
        rc = main(
            ["sample", "--checkpoint", checkpoint, "--height", "33", "--width", "64",
             "--steps", "1", "--out", str(tmp_path / "x.png")]
        )
        assert rc == 1


class TestPackPlan:
    def test_three_size_example(self, tmp_path, capsys):
        sizes = tmp_path / "sizes.txt"
        # Token counts 1500, 1500, 500 at downsample factor 1.
        sizes.write_text("50x30\n30x50\n25x20\n")
        rc = main(["pack-plan", str(sizes), "--budget", "2048"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "waste\t0.1455" in out
        assert len([l for l in out.splitlines() if l.startswith("pack")]) == 2

    def test_downsample_applied(self, tmp_path, capsys):
        sizes = tmp_path / "sizes.txt"
        sizes.write_text("64x64\n")
        rc = main(["pack-plan", str(sizes), "--budget", "64", "--downsample-factor", "8"])
        assert rc == 0
        assert "64/64" in capsys.readouterr().out

    def test_indivisible_size_fails(self, tmp_path):
        sizes = tmp_path / "sizes.txt"
        sizes.write_text("65x64\n")
        assert main(["pack-plan", str(sizes), "--downsample-factor", "8"]) == 1


class TestVerify:
    def test_clean_run_exits_zero(self, tmp_path):
        rc = main(["verify", "--out", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "verify.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(r["passed"] == "1" for r in rows)
        attn = next(r for r in rows if r["suite"] == "attention_oracle_equivalence")
        assert json.loads(attn["detail"])["max_deviation"] <= 1e-5

    def test_injected_fault_detected(self, tmp_path, capsys):
        rc = main(["verify", "--out", str(tmp_path), "--inject-fault"])
        assert rc == 1
        out = capsys.readouterr().out
        assert "FAIL" in out and "attention_oracle_equivalence" in out


class TestStats:
    def test_plots_loss_curve(self, tmp_path):
        log = tmp_path / "loss.csv"
        with open(log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "waste", "tokens"])
            for i in range(1, 21):
                writer.writerow([i, 1.0 / i, 0.1, 256])
        out = tmp_path / "loss.png"
        assert main(["stats", str(log), "--out", str(out)]) == 0
        assert out.stat().st_size > 0

    def test_empty_log_fails(self, tmp_path):
        log = tmp_path / "loss.csv"
        log.write_text("step,loss,waste,tokens\n")
        assert main(["stats", str(log), "--out", str(tmp_path / "x.png")]) == 1
