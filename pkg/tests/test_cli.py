import json

import pytest

from steerdec.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main


def _tiny_config(out_dir):
    return {
        "seed": 0,
        "out_dir": str(out_dir),
        "hardware_tag": "test",
        "verifier": {
            "n_layers": 2, "d_model": 16, "n_heads": 2, "d_mlp": 32,
            "vocab_size": 16, "max_seq_len": 64, "tap_layers": [0, 1, 1],
        },
        "drafter": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_mlp": 16, "vocab_size": 16, "max_seq_len": 64},
        "corpora": {
            "train": {"kind": "markov", "vocab_size": 16, "seed": 3, "n_sequences": 16, "seq_len": 24},
            "held_out": {"kind": "markov", "vocab_size": 16, "seed": 3, "n_sequences": 8, "seq_len": 24},
            "ood": {"kind": "pcfg", "vocab_size": 16, "seed": 5, "n_sequences": 8, "seq_len": 24},
        },
        "pretrain": {"warmup_steps": 1, "epochs": 1, "batch_size": 8, "seq_len": 24, "log_every": 0},
        "align": {"warmup_steps": 1, "epochs": 1, "batch_size": 8, "seq_len": 24, "k": 4, "log_every": 0},
        "synthetic": {"n_sequences": 8, "max_len": 20, "prompt_len": 4},
        "engine": {"k": 4, "max_new_tokens": 8},
        "experiment": {
            "modes": ["pretrained", "sd2"],
            "temperatures": [0.0, 1.0],
            "corpora": ["held_out"],
            "seeds": [0, 1],
            "n_prompts": 2,
            "prompt_len": 4,
            "throughput": False,
        },
    }


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.setenv("SD2_THREADS", "1")
    path = tmp_path / "run.json"
    path.write_text(json.dumps(_tiny_config(tmp_path / "out")))
    return path


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "nope.json"), "-q", "eval"]) == EXIT_CONFIG


def test_invalid_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"engine": {"k": -1}}))
    assert main(["--config", str(path), "-q", "report"]) == EXIT_CONFIG


def test_eval_without_checkpoints(config_file, capsys):
    assert main(["--config", str(config_file), "-q", "eval"]) == EXIT_MISSING
    assert "verifier.sd2c" in capsys.readouterr().err


def test_align_without_pretraining(config_file):
    assert main(["--config", str(config_file), "-q", "align", "--mode", "distill"]) == EXIT_MISSING


def test_full_pipeline(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    args = ["--config", str(config_file), "-q"]
    assert main(args + ["pretrain"]) == EXIT_OK
    assert (out / "checkpoints" / "verifier.sd2c").exists()
    assert (out / "checkpoints" / "drafter_pretrained.sd2c").exists()

    assert main(args + ["align", "--mode", "sd2"]) == EXIT_OK
    assert (out / "checkpoints" / "drafter_sd2.sd2c").exists()
    assert (out / "reports" / "curve_sd2.jsonl").exists()

    assert main(args + ["eval"]) == EXIT_OK
    runs = json.loads((out / "reports" / "runs.json").read_text())
    assert {(r["mode"], r["temperature"]) for r in runs} == {
        ("pretrained", 0.0), ("pretrained", 1.0), ("sd2", 0.0), ("sd2", 1.0)
    }
    assert len(list((out / "traces").glob("*.jsonl"))) == 8
    digest = (out / "reports" / "digest.txt").read_text()

    assert main(args + ["report"]) == EXIT_OK
    assert (out / "reports" / "digest.txt").read_text() == digest

    assert main(args + ["verify-lossless", "--tag", "sd2", "--prompts", "2", "--rounds", "0"]) == EXIT_OK
    assert main(args + ["verify-lossless", "--tag", "self", "--prompts", "2", "--rounds", "5000", "--threshold", "0.1"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
