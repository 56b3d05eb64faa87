import json

import numpy as np
import pytest

from tinychirp import audio_io, cli, dsp

from conftest import write_silence_wav, write_tone_wav


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestPreprocess:
    def test_nine_second_48k_wav(self, tmp_path, capsys):
        src = tmp_path / "in"
        out = tmp_path / "out"
        src.mkdir()
        write_tone_wav(src / "long.wav", 1000.0, 0.5, seconds=9.0, rate=48000)
        code, _, _ = run_cli(
            capsys, "preprocess", str(src), str(out), "--mel"
        )
        assert code == 0
        wavs = sorted(out.glob("*.wav"))
        mels = sorted(out.glob("*.mel.tcsp"))
        assert len(wavs) == 3
        assert len(mels) == 3
        for p in wavs:
            sig = audio_io.read_wav(p)
            assert sig.sample_rate == 16000
            assert sig.n_samples == 48000
        for p in mels:
            assert dsp.load_spectrogram_raw(p).shape == (184, 80)

    def test_empty_dir_warns_but_succeeds(self, tmp_path, capsys):
        src = tmp_path / "in"
        src.mkdir()
        code, _, err = run_cli(capsys, "preprocess", str(src), str(tmp_path / "out"))
        assert code == 0
        assert "no .wav" in err

    def test_unreadable_file_among_good_ones(self, tmp_path, capsys):
        src = tmp_path / "in"
        out = tmp_path / "out"
        src.mkdir()
        for i in range(4):
            write_silence_wav(src / f"ok_{i}.wav")
        (src / "bad.wav").write_bytes(b"garbage")
        code, out_text, err = run_cli(capsys, "preprocess", str(src), str(out))
        assert code == 1
        assert "bad.wav" in err
        assert len(list(out.glob("*.wav"))) == 4


class TestScreen:
    def test_defaults_echo_into_report(self, tmp_path, capsys):
        src = tmp_path / "in"
        src.mkdir()
        write_silence_wav(src / "s.wav")
        report_path = tmp_path / "report.json"
        code, _, _ = run_cli(
            capsys, "screen", str(src), "--variant", "baseline_only",
            "--report", str(report_path),
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["config"]["t_low"] == 1.00e-7
        assert report["config"]["t_high"] == 1.29e-5

    def test_baseline_on_silent_corpus(self, tmp_path, capsys):
        src = tmp_path / "in"
        src.mkdir()
        for i in range(3):
            write_silence_wav(src / f"s{i}.wav")
        code, out_text, _ = run_cli(
            capsys, "screen", str(src), "--variant", "baseline_only"
        )
        assert code == 0
        report = json.loads(out_text)
        assert report["counts"]["discarded_idle"] == 3

    def test_conflicting_thresholds_is_usage_error(self, tmp_path, capsys):
        src = tmp_path / "in"
        src.mkdir()
        code, _, err = run_cli(
            capsys, "screen", str(src), "--variant", "baseline_only",
            "--t-low", "1e-3", "--t-high", "1e-5",
        )
        assert code == 2
        assert "t_low" in err

    def test_unknown_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["screen", str(tmp_path), "--no-such-flag"])
        assert exc.value.code == 2

    def test_flag_beats_config_beats_env(self, tmp_path, capsys, monkeypatch):
        src = tmp_path / "in"
        src.mkdir()
        write_silence_wav(src / "s.wav")
        cfg = tmp_path / "cfg.toml"
        cfg.write_text('t_low = 2e-7\nvariant = "baseline_only"\n')
        monkeypatch.setenv("TINYCHIRP_T_LOW", "3e-7")
        monkeypatch.setenv("TINYCHIRP_T_HIGH", "5e-4")

        code, out_text, _ = run_cli(capsys, "screen", str(src), "--config", str(cfg))
        report = json.loads(out_text)
        assert report["config"]["t_low"] == 2e-7  # config wins over env
        assert report["config"]["t_high"] == 5e-4  # env fills the gap

        code, out_text, _ = run_cli(
            capsys, "screen", str(src), "--config", str(cfg), "--t-low", "4e-7"
        )
        report = json.loads(out_text)
        assert report["config"]["t_low"] == 4e-7  # flag wins over config


class TestEval:
    def test_scores_csv(self, tmp_path, capsys):
        scores = tmp_path / "scores.csv"
        rng = np.random.default_rng(3)
        rows = ["score,label"]
        for _ in range(50):
            label = "target" if rng.uniform() < 0.5 else "non_target"
            center = 0.7 if label == "target" else 0.3
            rows.append(f"{np.clip(rng.normal(center, 0.2), 0, 1):.6f},{label}")
        scores.write_text("\n".join(rows) + "\n")
        code, out_text, _ = run_cli(capsys, "eval", "--scores", str(scores))
        assert code == 0
        result = json.loads(out_text)
        assert 0.0 <= result["auc"] <= 1.0
        assert 0.0 <= result["t_star"] <= 1.0
        assert result["n"] == 50

    def test_single_class_scores_is_data_error(self, tmp_path, capsys):
        scores = tmp_path / "scores.csv"
        scores.write_text("score,label\n0.5,target\n0.6,target\n")
        code, _, err = run_cli(capsys, "eval", "--scores", str(scores))
        assert code == 1

    def test_requires_exactly_one_source(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "eval")
        assert code == 2

    def test_roc_csv_export(self, tmp_path, capsys):
        scores = tmp_path / "scores.csv"
        scores.write_text(
            "score,label\n0.9,target\n0.8,target\n0.2,non_target\n0.1,non_target\n"
        )
        roc_path = tmp_path / "roc.csv"
        code, _, _ = run_cli(
            capsys, "eval", "--scores", str(scores), "--roc-csv", str(roc_path)
        )
        assert code == 0
        lines = roc_path.read_text().strip().splitlines()
        assert lines[0] == "fpr,tpr,threshold"
        assert len(lines) >= 4

    def test_model_plus_manifest_source(self, tmp_path, capsys):
        src = tmp_path / "corpus"
        src.mkdir()
        rows = []
        for i, (name, label) in enumerate(
            [("a", "target"), ("b", "target"), ("c", "non_target"), ("d", "non_target")]
        ):
            p = src / f"{name}.wav"
            write_tone_wav(p, 4000.0 + 900 * i, 0.5)
            rows.append(f"{p},{label},test")
        manifest = tmp_path / "m.csv"
        manifest.write_text("path,label,split\n" + "\n".join(rows) + "\n")
        code, out_text, _ = run_cli(
            capsys, "eval", "--model", "cnn_time", "--manifest", str(manifest),
            "--seed", "5",
        )
        assert code == 0
        result = json.loads(out_text)
        assert result["n"] == 4
        assert 0.0 <= result["auc"] <= 1.0


class TestVerify:
    def test_200_trials_all_within_tolerance(self, capsys):
        code, out_text, _ = run_cli(capsys, "verify", "--trials", "200", "--seed", "7")
        assert code == 0
        lines = out_text.strip().splitlines()
        assert len(lines) == 200
        for line in lines:
            record = json.loads(line)
            assert record["pass"] is True
            assert record["max_rel_err"] <= 1e-5 or record["max_abs_err"] <= 1e-7

    def test_deterministic_for_a_fixed_seed(self, capsys):
        _, first, _ = run_cli(capsys, "verify", "--trials", "5", "--seed", "11")
        _, second, _ = run_cli(capsys, "verify", "--trials", "5", "--seed", "11")
        assert first == second


class TestQuantizeAndScreen:
    def test_end_to_end_int8(self, tmp_path, capsys):
        corpus = tmp_path / "calib"
        corpus.mkdir()
        for i in range(3):
            write_tone_wav(corpus / f"t{i}.wav", 5000.0 + 800 * i, 0.5)
        container = tmp_path / "model.i8.tchw"
        code, out_text, _ = run_cli(
            capsys, "quantize", "cnn_time", str(corpus), str(container),
            "--seed", "42",
        )
        assert code == 0
        summary = json.loads(out_text.strip().splitlines()[-1])
        assert summary["dtype"] == "i8"
        assert container.exists()

        report_path = tmp_path / "report.json"
        code, _, _ = run_cli(
            capsys, "screen", str(corpus), "--variant", "full",
            "--model", "cnn_time", "--weights", str(container), "--quantized",
            "--report", str(report_path),
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["config"]["weights_dtype"] == "i8"
        assert sum(report["counts"].values()) == 3


class TestBudget:
    def test_json_output(self, capsys):
        code, out_text, _ = run_cli(
            capsys, "budget", "--battery-mwh", "40000", "--sd-gb", "128",
            "--record-rate", "105820", "--store-fraction", "0.1",
        )
        assert code == 0
        result = json.loads(out_text)
        assert result["limiting_factor"] in ("storage", "battery")
        assert result["storage_days"] > 0

    def test_table_output(self, capsys):
        code, out_text, _ = run_cli(capsys, "budget", "--table")
        assert code == 0
        assert "limiting factor" in out_text

    def test_bad_fraction_is_usage_error(self, capsys):
        code, _, _ = run_cli(capsys, "budget", "--store-fraction", "1.5")
        assert code == 2


@pytest.mark.parametrize(
    "command", ["preprocess", "screen", "eval", "verify", "quantize", "budget"]
)
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    assert command in capsys.readouterr().out
