"""End-to-end command-line tests (in-process, tiny datasets)."""

import pytest

from detectbert.cli import TRAIN_DEFAULTS, build_parser, main, resolve_settings
from detectbert.model import load_checkpoint


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def dataset(tmp_path):
    out = tmp_path / "data"
    assert run(["gen-synth", "--out", out, "--bags", "40", "--dim", "8",
                "--bag-size-min", "2", "--bag-size-max", "6", "--seed", "11"]) == 0
    return out


FAST = ["--epochs", "1", "--heads", "2", "--landmarks", "4", "--seed", "5"]


class TestGenSynth:
    def test_creates_bags_and_manifest(self, dataset):
        assert (dataset / "manifest.csv").exists()
        assert len(list((dataset / "bags").iterdir())) == 40
        assert (dataset / "resolved_config.txt").exists()

    def test_missing_out_dir_is_created(self, tmp_path):
        nested = tmp_path / "a" / "b" / "c"
        assert run(["gen-synth", "--out", nested, "--bags", "3", "--dim", "4",
                    "--bag-size-min", "1", "--bag-size-max", "2"]) == 0
        assert (nested / "manifest.csv").exists()

    def test_invalid_witness_rate_fails(self, tmp_path, capsys):
        code = run(["gen-synth", "--out", tmp_path / "x", "--bags", "3",
                    "--witness-rate", "0"])
        assert code == 1
        assert "witness_rate" in capsys.readouterr().err

    def test_byte_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run(["gen-synth", "--out", out, "--bags", "6", "--dim", "4",
                 "--bag-size-min", "1", "--bag-size-max", "3", "--seed", "2"])
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        for f in (a / "bags").iterdir():
            assert f.read_bytes() == (b / "bags" / f.name).read_bytes()


class TestDefaults:
    def test_training_defaults_match_published_recipe(self):
        args = build_parser().parse_args(
            ["train", "--manifest", "m.csv", "--out", "o"]
        )
        settings = resolve_settings(TRAIN_DEFAULTS, args)
        assert settings["epochs"] == 20
        assert settings["learning_rate"] == 1e-4
        assert settings["lookahead_k"] == 5
        assert settings["lookahead_alpha"] == 0.5
        assert settings["blocks"] == 2
        assert settings["batch_size"] == 1
        assert settings["threshold"] == 0.5

    def test_shuffled_protocol_defaults_to_ten_repetitions(self):
        from detectbert.cli import resolve_settings as rs

        args = build_parser().parse_args(
            ["protocol-shuffled", "--manifest", "m.csv", "--out", "o"]
        )
        settings = rs({**TRAIN_DEFAULTS, "repetitions": 10}, args)
        assert settings["repetitions"] == 10

    def test_config_file_overridden_by_flags(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs=7\nlearning_rate=0.01\n")
        args = build_parser().parse_args(
            ["train", "--manifest", "m.csv", "--out", "o",
             "--config", str(cfg), "--epochs", "3"]
        )
        settings = resolve_settings(TRAIN_DEFAULTS, args)
        assert settings["epochs"] == 3  # flag wins
        assert settings["learning_rate"] == 0.01  # file beats default

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("warp_speed=9\n")
        args = build_parser().parse_args(
            ["train", "--manifest", "m.csv", "--out", "o", "--config", str(cfg)]
        )
        with pytest.raises(ValueError, match="warp_speed"):
            resolve_settings(TRAIN_DEFAULTS, args)


class TestTrainEvaluate:
    def test_train_writes_outputs(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert run(["train", "--manifest", dataset / "manifest.csv", "--out", out] + FAST) == 0
        for name in ("checkpoint.dbck", "history.csv", "split.csv", "resolved_config.txt"):
            assert (out / name).exists(), name

    def test_baseline_average_flag(self, dataset, tmp_path):
        out = tmp_path / "run"
        assert run(["train", "--manifest", dataset / "manifest.csv", "--out", out,
                    "--model", "baseline-average"] + FAST) == 0
        params = load_checkpoint(out / "checkpoint.dbck")
        assert params.kind == "elementwise_average"

    def test_same_flags_same_seed_identical_outputs(self, dataset, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            run(["train", "--manifest", dataset / "manifest.csv", "--out", out] + FAST)
            outs.append(out)
        for f in ("checkpoint.dbck", "history.csv", "split.csv", "resolved_config.txt"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f

    def test_evaluate_writes_scores_and_metrics(self, dataset, tmp_path):
        run_dir = tmp_path / "run"
        run(["train", "--manifest", dataset / "manifest.csv", "--out", run_dir] + FAST)
        eval_dir = tmp_path / "eval"
        assert run(["evaluate", "--manifest", dataset / "manifest.csv",
                    "--checkpoint", run_dir / "checkpoint.dbck", "--out", eval_dir,
                    "--split-file", run_dir / "split.csv", "--subset", "test"]) == 0
        scores = (eval_dir / "scores.csv").read_text().splitlines()
        assert scores[0] == "app_id,score,label,prediction"
        assert len(scores) == 1 + 4  # 40 apps -> floor(40/10) test records
        metrics = (eval_dir / "metrics.txt").read_text()
        # two-decimal metric lines plus raw counts
        assert any(line.startswith("f1=") and len(line.split("=")[1].split(".")[1]) == 2
                   for line in metrics.splitlines())
        assert "tp=" in metrics

    def test_missing_checkpoint_fails(self, dataset, tmp_path, capsys):
        code = run(["evaluate", "--manifest", dataset / "manifest.csv",
                    "--checkpoint", tmp_path / "nope.dbck", "--out", tmp_path / "e"])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestProtocols:
    def test_shuffled_reports_means(self, dataset, tmp_path, capsys):
        out = tmp_path / "shuf"
        assert run(["protocol-shuffled", "--manifest", dataset / "manifest.csv",
                    "--out", out, "--repetitions", "2",
                    "--model", "baseline-average"] + FAST) == 0
        report = (out / "report.txt").read_text()
        assert "[repetition 0]" in report and "[repetition 1]" in report
        assert "[mean over repetitions]" in report
        assert (out / "rep0_scores.csv").exists()
        assert (out / "rep1_scores.csv").exists()

    def test_temporal_reports_proportions(self, dataset, tmp_path):
        out = tmp_path / "temp"
        assert run(["protocol-temporal", "--manifest", dataset / "manifest.csv",
                    "--out", out, "--model", "baseline-average"] + FAST) == 0
        report = (out / "report.txt").read_text()
        assert "train_fraction=0.50" in report
        assert "test_fraction=0.50" in report

    def test_temporal_refuses_single_year_manifest(self, tmp_path, capsys):
        data = tmp_path / "data"
        run(["gen-synth", "--out", data, "--bags", "9", "--dim", "4",
             "--bag-size-min", "1", "--bag-size-max", "2", "--seed", "3"])
        manifest = data / "manifest.csv"
        lines = manifest.read_text().splitlines()
        fixed = [lines[0]] + [
            ",".join(
                c if i != 2 else c.replace("2020-", "2019-")
                for i, c in enumerate(line.split(","))
            )
            for line in lines[1:]
        ]
        manifest.write_text("\n".join(fixed) + "\n")
        code = run(["protocol-temporal", "--manifest", manifest,
                    "--out", tmp_path / "t", "--model", "baseline-average"] + FAST)
        assert code == 1
        assert "2020" in capsys.readouterr().err


class TestCompareBaselines:
    def test_comparison_table(self, dataset, tmp_path):
        out = tmp_path / "cmp"
        assert run(["compare-baselines", "--manifest", dataset / "manifest.csv",
                    "--out", out] + FAST) == 0
        rows = (out / "comparison.csv").read_text().splitlines()
        assert rows[0] == "model,accuracy,precision,recall,f1"
        models = [r.split(",")[0] for r in rows[1:]]
        assert models == ["baseline-random", "baseline-addition",
                          "baseline-average", "detectbert"]


class TestVerify:
    def test_entropy_suite_passes(self, capsys):
        assert run(["verify", "--entropy"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_attention_suite_with_custom_landmarks(self, capsys):
        assert run(["verify", "--attn", "--m", "8", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "m=8" in out
