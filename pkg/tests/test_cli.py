import json

import pytest

from evroad.cli import main
from evroad.core.utils import MANIFEST_NAME

SMALL = ["--set", "n_blocks=1", "--set", "trunk_ffn=16"]


def synth(tmp_path, name="stream.txt", events=400, scene="edge", n=8, seed=0):
    out = str(tmp_path / name)
    assert main(["synth", "--out", out, "--events", str(events), "--scene", scene,
                 "--n", str(n), "--seed", str(seed)]) == 0
    return out


class TestSynth:
    def test_deterministic(self, tmp_path):
        a = synth(tmp_path, "a.txt", seed=3)
        b = synth(tmp_path, "b.txt", seed=3)
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()
        with open(a + ".labels", "rb") as fa, open(b + ".labels", "rb") as fb:
            assert fa.read() == fb.read()

    def test_zero_events_is_usage_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "s.txt"), "--events", "0"]) == 1

    def test_unknown_option_is_usage_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "s.txt"), "--colour", "red"]) == 1

    def test_manifest_written(self, tmp_path):
        synth(tmp_path, seed=5)
        with open(tmp_path / MANIFEST_NAME, encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 5
        assert "--seed" in manifest["argv"]


class TestSslLabels:
    def test_rows_and_threshold(self, tmp_path, capsys):
        events = synth(tmp_path, events=50 * 1000, n=50)
        out = tmp_path / "ssl.csv"
        assert main(["ssl-labels", "--events", events, "--n", "50", "--out", str(out)]) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "entropy,label"
        assert len(lines) == 1001
        ones = sum(int(row.split(",")[1]) for row in lines[1:])
        assert abs(ones / 1000 - 0.5) <= 0.05
        assert "threshold=" in capsys.readouterr().out

    def test_fixed_threshold(self, tmp_path):
        events = synth(tmp_path, events=400, n=50)
        out = str(tmp_path / "ssl.csv")
        assert main(["ssl-labels", "--events", events, "--n", "50", "--threshold", "0.3", "--out", out]) == 0

    def test_threshold_above_ln2(self, tmp_path):
        events = synth(tmp_path, events=400, n=50)
        out = str(tmp_path / "ssl.csv")
        assert main(["ssl-labels", "--events", events, "--n", "50", "--threshold", "0.999", "--out", out]) == 1

    def test_malformed_stream_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("346 260 signed\n1 2 3\n", encoding="utf-8")
        assert main(["ssl-labels", "--events", str(bad), "--n", "8", "--out", str(tmp_path / "o.csv")]) == 2

    def test_invalid_utf8_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_bytes(b"\xff\xfe 1 1 1\n")
        assert main(["ssl-labels", "--events", str(bad), "--n", "8", "--out", str(tmp_path / "o.csv")]) == 2

    def test_config_file_not_utf8_is_usage_error(self, tmp_path):
        events = synth(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_bytes(b"n=8\n\xff=1\n")
        assert main(["--config", str(cfg), "ssl-labels", "--events", events, "--n", "8",
                     "--out", str(tmp_path / "o.csv")]) == 1

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["ssl-labels", "--events", str(tmp_path / "absent.txt"), "--n", "8",
                     "--out", str(tmp_path / "o.csv")]) == 2


class TestBench:
    def test_single_run_has_zero_std(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--runs", "1", "--warmup", "0", "--n", "8", "--out", str(out)]) == 0
        assert "std=0.0" in capsys.readouterr().out
        assert out.read_text(encoding="utf-8").startswith("params,flops,")


class TestPipeline:
    def test_eval_with_mismatched_config(self, tmp_path):
        events = synth(tmp_path, events=8 * 16, scene="road")
        ckpt = str(tmp_path / "seg.ckpt")
        assert main(["finetune", "--events", events, "--labels", events + ".labels", "--out", ckpt,
                     "--n", "8", "--epochs", "1", "--batch-size", "8", *SMALL]) == 0
        assert main(["eval", "--checkpoint", ckpt, "--events", events, "--labels", events + ".labels",
                     "--set", "n=16"]) == 2

    def test_replay_reruns_synth(self, tmp_path):
        out = synth(tmp_path, seed=2)
        with open(out, "rb") as f:
            original = f.read()
        assert main(["replay", str(tmp_path / MANIFEST_NAME)]) == 0
        with open(out, "rb") as f:
            assert f.read() == original

    @pytest.mark.slow
    def test_end_to_end(self, tmp_path, capsys):
        events = synth(tmp_path, events=8 * 64, scene="road", seed=1)
        labels = events + ".labels"
        ssl = str(tmp_path / "ssl.ckpt")
        seg = str(tmp_path / "seg.ckpt")
        assert main(["pretrain", "--events", events, "--out", ssl, "--n", "8", "--epochs", "2",
                     "--batch-size", "8", *SMALL]) == 0
        assert (tmp_path / "ssl.ckpt.history.csv").exists()
        assert main(["finetune", "--events", events, "--labels", labels, "--checkpoint", ssl,
                     "--out", seg, "--n", "8", "--epochs", "2", "--batch-size", "8", *SMALL]) == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", seg, "--events", events, "--labels", labels,
                     "--out", str(tmp_path / "eval.csv")]) == 0
        assert "accuracy=" in capsys.readouterr().out
        assert main(["bench", "--checkpoint", seg, "--runs", "2", "--warmup", "1"]) == 0
