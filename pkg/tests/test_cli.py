import csv
import hashlib
import json
import time

import pytest

from dppssl import cli
from dppssl.cli import EXIT_CONFIG, EXIT_IO, EXIT_LOG, EXIT_NUMERIC

SMOKE = """\
# N = 100 corpus, 3 epochs
generator.num_speakers = 10
generator.clips_per_speaker = 10,10
generator.validation_speakers = 6
generator.test_speakers = 6
generator.reference_speakers = 10
generator.heldout_clips_per_speaker = 5
model.hidden_dim = 32
model.speaker_embed_dim = 16
model.face_embed_dim = 16
model.projector_widths = 32,32,16,16
train.epochs = 3
train.M = 16
train.checkpoint_every = 1
reference.epochs = 3
stage2.iterations = 1
stage2.epochs_per_iteration = 2
stage2.M = 16
"""


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "smoke.cfg"
    cfg.write_text(SMOKE)
    corpus = root / "train.corp"
    assert cli.main(["--config", str(cfg), "generate", "--out", str(corpus)]) == 0
    return root, cfg, corpus


def train(smoke, run_dir, mode="mcl-dpp", *extra):
    root, cfg, corpus = smoke
    return cli.main(["--config", str(cfg), "--run-dir", str(run_dir), "train", mode,
                     "--corpus", str(corpus), *extra])


class TestParser:
    def test_help(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--config", "--seed", "--run-dir", "--set"):
            assert flag in out

    def test_train_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["train", "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--corpus", "--stage-one", "--run-stage-one", "--resume", "--reference", "--oracle-labels"):
            assert flag in out

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["generate", "--out", "x", "--bogus"])
        assert e.value.code == EXIT_CONFIG


class TestGenerate:
    def test_default_size(self, tmp_path, capsys):
        assert cli.main(["generate", "--out", str(tmp_path / "c")]) == 0
        assert "N=1000" in capsys.readouterr().out

    def test_same_seed_same_file(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["--seed", "5", "generate", "--out", str(tmp_path / name)]) == 0
        assert digest(tmp_path / "a") == digest(tmp_path / "b")
        cli.main(["--seed", "6", "generate", "--out", str(tmp_path / "c")])
        assert digest(tmp_path / "a") != digest(tmp_path / "c")

    def test_one_speaker_rejected(self, tmp_path):
        assert cli.main(["--set", "generator.num_speakers=1", "generate", "--out", str(tmp_path / "c")]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        assert cli.main(["--set", "generator.nope=1", "generate", "--out", str(tmp_path / "c")]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["--config", str(tmp_path / "none"), "generate", "--out", str(tmp_path / "c")]) == EXIT_IO

    def test_unwritable_output(self, tmp_path):
        assert cli.main(["generate", "--out", str(tmp_path / "no" / "such" / "dir" / "c")]) == EXIT_IO


class TestTrain:
    def test_smoke_under_a_minute(self, smoke, tmp_path):
        t0 = time.perf_counter()
        assert train(smoke, tmp_path / "run") == 0
        assert time.perf_counter() - t0 < 60
        run = tmp_path / "run"
        for name in ("config.txt", "metrics.jsonl", "model.ckpt", "reference.ckpt", "state_epoch0001.ckpt"):
            assert (run / name).exists()
        assert not (run / ".lock").exists()
        assert "train.epochs = 3" in (run / "config.txt").read_text()
        assert len((run / "metrics.jsonl").read_text().splitlines()) == 3

    @pytest.mark.parametrize("mode", ["mcl", "mcl-dpp"])
    def test_repeat_is_identical(self, smoke, tmp_path, mode):
        assert train(smoke, tmp_path / "a", mode) == 0
        assert train(smoke, tmp_path / "b", mode) == 0
        for name in ("metrics.jsonl", "model.ckpt", "config.txt"):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)

    def test_resume_is_identical(self, smoke, tmp_path):
        assert train(smoke, tmp_path / "a") == 0
        assert train(smoke, tmp_path / "b", "mcl-dpp", "--resume",
                     str(tmp_path / "a" / "state_epoch0001.ckpt")) == 0
        assert digest(tmp_path / "a" / "metrics.jsonl") == digest(tmp_path / "b" / "metrics.jsonl")

    def test_two_stage_needs_stage_one(self, smoke, tmp_path):
        assert train(smoke, tmp_path / "r", "mcl-dpp-c") == EXIT_CONFIG

    def test_two_stage(self, smoke, tmp_path):
        assert train(smoke, tmp_path / "one") == 0
        assert train(smoke, tmp_path / "two", "mcl-dpp-c", "--stage-one", str(tmp_path / "one" / "model.ckpt"),
                     "--reference", str(tmp_path / "one" / "reference.ckpt")) == 0
        recs = [json.loads(x) for x in (tmp_path / "two" / "metrics.jsonl").read_text().splitlines()]
        assert {r["stage"] for r in recs} == {"mcl-dpp-c"} and len(recs) == 2

    def test_missing_corpus(self, smoke, tmp_path):
        root, cfg, _ = smoke
        assert cli.main(["--config", str(cfg), "--run-dir", str(tmp_path / "r"), "train", "mcl",
                         "--corpus", str(tmp_path / "missing")]) == EXIT_IO

    def test_run_dir_required(self, smoke):
        root, cfg, corpus = smoke
        assert cli.main(["--config", str(cfg), "train", "mcl", "--corpus", str(corpus)]) == EXIT_CONFIG

    def test_locked_run_dir(self, smoke, tmp_path):
        (tmp_path / "r").mkdir()
        (tmp_path / "r" / ".lock").write_text("1")
        assert train(smoke, tmp_path / "r") == EXIT_IO

    def test_divergence_exit_code(self, smoke, tmp_path, capsys):
        with pytest.warns(RuntimeWarning):
            code = train(smoke, tmp_path / "r", "mcl", "--set", "train.lr=1e305")
        assert code == EXIT_NUMERIC
        assert "epoch" in capsys.readouterr().err


class TestEvaluate:
    def test_report(self, smoke, tmp_path):
        root, cfg, corpus = smoke
        assert train(smoke, tmp_path / "r") == 0
        trials = tmp_path / "trials.csv"
        trials.write_text("clip_a,clip_b,is_target\n0,1,1\n0,15,0\n2,3,1\n4,40,0\n")
        out = tmp_path / "eval"
        args = ["--config", str(cfg), "--run-dir", str(out), "evaluate", "--checkpoint",
                str(tmp_path / "r" / "model.ckpt"), "--corpus", str(corpus), "--trials", str(trials),
                "--reference", str(tmp_path / "r" / "reference.ckpt")]
        assert cli.main(args) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report) == {"eer_s", "eer_f", "eer_sf", "D", "n_plus", "pair_accuracy", "purity"}
        for k in ("eer_s", "eer_f", "eer_sf"):
            assert 0.0 <= report[k] <= 1.0
        rows = list(csv.reader((out / "scores.csv").open()))
        assert rows[0] == ["clip_a", "clip_b", "score"] and len(rows) == 5
        first = (out / "scores.csv").read_bytes()
        assert cli.main(args) == 0
        assert (out / "scores.csv").read_bytes() == first

    def test_missing_checkpoint(self, smoke, tmp_path):
        root, cfg, corpus = smoke
        assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none"), "--corpus", str(corpus)]) == EXIT_IO


class TestAnalyze:
    def write_log(self, run_dir, recs):
        run_dir.mkdir(exist_ok=True)
        (run_dir / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))

    def rec(self, epoch, C, D, acc=1.0, stage="mcl-dpp"):
        return {"stage": stage, "epoch": epoch, "C": C, "train_loss": 1.0, "val_eer_s": 0.1,
                "val_eer_f": 0.2, "val_eer_sf": 0.05, "D": D, "pair_accuracy": acc}

    def test_ppp_log_zero_diversity(self, tmp_path):
        self.write_log(tmp_path, [self.rec(e, 100, 0.0, stage="mcl") for e in range(3)])
        assert cli.main(["--run-dir", str(tmp_path), "analyze"]) == 0
        rows = list(csv.reader((tmp_path / "d_vs_c.csv").open()))
        assert rows[0] == ["C", "epochs", "D"]
        assert [float(r[2]) for r in rows[1:]] == [0.0]

    def test_outputs_and_idempotence(self, tmp_path):
        self.write_log(tmp_path, [self.rec(0, 8, 0.0), self.rec(1, 8, 0.0), self.rec(2, 4, 0.3, 0.9),
                                  self.rec(3, 4, 0.5, 0.7), self.rec(4, 2, 0.8, 0.5)])
        assert cli.main(["--run-dir", str(tmp_path), "analyze"]) == 0
        names = ("d_vs_c.csv", "accuracy_vs_c.csv", "eer_vs_epoch.csv", "c_trajectory.csv")
        first = {n: (tmp_path / n).read_bytes() for n in names}
        assert cli.main(["--run-dir", str(tmp_path), "analyze"]) == 0
        assert {n: (tmp_path / n).read_bytes() for n in names} == first
        d = list(csv.reader((tmp_path / "d_vs_c.csv").open()))[1:]
        assert [(int(c), int(n), float(v)) for c, n, v in d] == [(8, 2, 0.0), (4, 2, 0.4), (2, 1, 0.8)]
        traj = list(csv.reader((tmp_path / "c_trajectory.csv").open()))
        assert traj[0] == ["epoch", "C"] and [r[1] for r in traj[1:]] == ["8", "8", "4", "4", "2"]

    def test_real_dpp_log_d_non_decreasing(self, smoke, tmp_path):
        assert train(smoke, tmp_path / "r", "mcl-dpp", "--set", "train.epochs=12",
                     "--set", "train.stall_window=1", "--set", "train.initial_C=40") == 0
        assert cli.main(["--run-dir", str(tmp_path / "r"), "analyze"]) == 0
        d = [float(r[2]) for r in list(csv.reader((tmp_path / "r" / "d_vs_c.csv").open()))[1:]]
        assert len(d) >= 2
        assert all(b >= a for a, b in zip(d, d[1:]))

    @pytest.mark.parametrize("text", ["{not json\n", '{"epoch": 1}\n', ""])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "metrics.jsonl").write_text(text)
        assert cli.main(["--run-dir", str(tmp_path), "analyze"]) == EXIT_LOG

    def test_missing_log(self, tmp_path):
        assert cli.main(["--run-dir", str(tmp_path), "analyze"]) == EXIT_IO
