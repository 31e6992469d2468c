"""End-to-end command-line behaviour."""

import csv
import json

import pytest

from latentdrive.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_INPUT, main

QUICK = ["--set", "train.epochs=1", "--set", "train.steps_per_epoch=60", "--set", "train.ppo_update_passes=1",
         "--set", "train.eval_episodes=1", "--set", "train.checkpoint_every=1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--set", "train.mode=SEPARATED", "--seed", "1", "--out", str(out), *QUICK]) == 0
    return out


class TestTrain:
    def test_run_directory(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"metrics.csv", "ckpt_epoch_1.npz", "ckpt_final.npz", "resolved_config.toml", "plots"} <= names
        assert {p.name for p in (trained / "plots").iterdir()} == {"curves_eval_success_rate.png",
                                                                   "curves_inference_accuracy.png"}
        assert "seed = 1" in (trained / "resolved_config.toml").read_text()

    def test_invalid_mode(self, tmp_path, capsys):
        assert main(["train", "--set", "train.mode=BOTH", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "train.mode" in capsys.readouterr().err

    def test_env_override(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("LATENTDRIVE_TRAIN__MODE", "NOPE")
        assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "train.mode" in capsys.readouterr().err

    def test_plan(self, tmp_path):
        args = ["train", "--plan", "--out", str(tmp_path), "--no-plots",
                "--set", 'experiment.variants=[["LSTM_NET","LSTM_NET","SEPARATED"],["LSTM_NET","LSTM_NET","COUPLED"]]',
                "--set", "experiment.seeds=[0]", "--set", "experiment.epochs=1",
                "--set", "experiment.steps_per_epoch=60", "--set", "experiment.eval_episodes=1",
                "--set", "train.ppo_update_passes=1"]
        assert main(args) == 0
        assert len(list((tmp_path / "curves").glob("*.csv"))) == 2
        assert (tmp_path / "summary.csv").exists() and not (tmp_path / "plots").exists()


class TestEvalSweepDump:
    def test_eval(self, trained, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", str(trained / "ckpt_final.npz"), "--out", str(tmp_path),
                   "--set", "eval.episodes=2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "success_rate=" in out and "inference_accuracy=" in out and "mean_return=" in out
        assert (tmp_path / "eval.csv").exists()

    def test_eval_spec_mismatch(self, trained, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", str(trained / "ckpt_final.npz"), "--out", str(tmp_path),
                   "--set", "inference.kind=STGSAGE"])
        assert rc == EXIT_CHECKPOINT
        assert "checkpoint" in capsys.readouterr().err

    def test_eval_without_checkpoint(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_sweep_five_rows(self, trained, tmp_path):
        rc = main(["sweep", "--checkpoint", str(trained / "ckpt_final.npz"), "--out", str(tmp_path),
                   "--set", "sweep.episodes=1"])
        assert rc == 0
        with open(tmp_path / "latent_distribution_seed0.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["axis_value"]) for r in rows] == [0.1, 0.3, 0.5, 0.7, 0.9]
        assert (tmp_path / "plots" / "latent_distribution.png").exists()

    def test_dump_three_episodes(self, trained, tmp_path):
        rc = main(["dump", "--checkpoint", str(trained / "ckpt_final.npz"), "--out", str(tmp_path)])
        assert rc == 0
        recs = [json.loads(x) for x in (tmp_path / "interpretability.jsonl").read_text().splitlines()]
        assert sorted({r["episode"] for r in recs}) == [0, 1, 2]

    def test_outputs_stay_in_out_dir(self, trained, tmp_path):
        before = {p for p in trained.rglob("*")}
        main(["eval", "--checkpoint", str(trained / "ckpt_final.npz"), "--out", str(tmp_path / "o"),
              "--set", "eval.episodes=1"])
        assert {p for p in trained.rglob("*")} == before
        assert {p.name for p in (tmp_path).iterdir()} == {"o"}


class TestReport:
    def test_report(self, trained, tmp_path, capsys):
        assert main(["report", str(trained / "metrics.csv"), "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("*.png"))) == 2

    def test_report_malformed(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("epoch,eval_success_rate\n1,oops\n")
        assert main(["report", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "p")]) == EXIT_INPUT
        assert "row 2" in capsys.readouterr().err
        assert not (tmp_path / "p").exists()


class TestSelfcheck:
    def test_pristine(self, capsys):
        assert main(["selfcheck"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert all(line.startswith("PASS") for line in lines)

    def test_corrupted_layer(self, capsys, monkeypatch):
        monkeypatch.setenv("LATENTDRIVE_SELFCHECK_CORRUPT", "gat")
        assert main(["selfcheck"]) == 1
        out = capsys.readouterr().out
        assert "FAIL grad_gat" in out and "PASS grad_sage" in out
