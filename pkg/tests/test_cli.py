import wave as wavlib

import numpy as np
import pytest

from convrnn.cli import main
from convrnn.features import read_features
from convrnn.network import build, parse_arch, InputSpec


def write_wav(path, samples, rate=16000):
    data = np.clip(samples, -1.0, 1.0)
    pcm = (data * 32767).astype("<i2")
    with wavlib.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


@pytest.fixture
def wav_dir(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "wavs"
    d.mkdir()
    for i in range(3):
        write_wav(d / ("utt%d.wav" % i), rng.normal(scale=0.1, size=4800))
    return d


class TestCountParams:
    def test_lstm750_formatting(self, capsys):
        assert main(["count-params", "--arch", "Lstm750"]) == 0
        out = capsys.readouterr().out
        assert "6,704,529 (6.7M)" in out

    def test_relu_context_default(self, capsys):
        assert main(["count-params", "--arch", "4×ReLU2000"]) == 0
        assert "25,249,529 (25.2M)" in capsys.readouterr().out

    def test_parse_error_exit_2(self, capsys):
        assert main(["count-params", "--arch", "Lstm750 + @"]) == 2
        assert "position" in capsys.readouterr().err

    def test_semantic_error_exit_2(self, capsys):
        assert main(["count-params", "--arch", "Pooling"]) == 2

    def test_missing_arch_exit_2(self):
        assert main(["count-params"]) == 2

    def test_unknown_flag_exit_2(self):
        assert main(["count-params", "--arch", "Lstm750", "--bogus"]) == 2

    def test_spec_json(self, tmp_path, capsys):
        doc = tmp_path / "spec.json"
        doc.write_text('{"input": {"num_bands": 33, "num_channels": 3, '
                       '"context": 0}, "num_classes": 5529, '
                       '"layers": [{"kind": "Lstm", "size": 750}]}')
        assert main(["count-params", "--spec-json", str(doc)]) == 0
        assert "6,704,529" in capsys.readouterr().out


class TestFeaturize:
    def test_three_wavs(self, wav_dir, tmp_path, capsys):
        out = tmp_path / "feats"
        assert main(["featurize", "--audio", str(wav_dir),
                     "--out", str(out)]) == 0
        assert "featurized 3 utterances (F=33 C=3 D=99)" in capsys.readouterr().out
        files = sorted(out.glob("*.feat"))
        assert len(files) == 3
        seq = read_features(files[0])
        assert seq.num_bands == 33 and seq.num_channels == 3

    def test_empty_dir_exit_2(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["featurize", "--audio", str(empty),
                     "--out", str(tmp_path / "o")]) == 2
        assert "no input utterances" in capsys.readouterr().err

    def test_rerun_bit_identical(self, wav_dir, tmp_path):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        main(["featurize", "--audio", str(wav_dir), "--out", str(out1)])
        main(["featurize", "--audio", str(wav_dir), "--out", str(out2)])
        for f1, f2 in zip(sorted(out1.glob("*.feat")), sorted(out2.glob("*.feat"))):
            assert f1.read_bytes() == f2.read_bytes()

    def test_unsupported_rate_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad"
        bad.mkdir()
        write_wav(bad / "u.wav", np.zeros(4000), rate=44100)
        assert main(["featurize", "--audio", str(bad),
                     "--out", str(tmp_path / "o")]) == 2
        assert "sample rate" in capsys.readouterr().err


class TestSynth:
    def test_writes_train_and_test(self, tmp_path, capsys):
        out = tmp_path / "corpus"
        assert main(["synth", "--out", str(out), "--utterances", "6",
                     "--frames", "30", "--classes", "4", "--shift", "2",
                     "--disjoint-shifts", "--test-utterances", "3",
                     "--seed", "5"]) == 0
        assert len(list((out / "train").glob("*.feat"))) == 6
        assert len(list((out / "test").glob("*.feat"))) == 3
        assert (out / "train.ali").exists() and (out / "test.ali").exists()

    def test_deterministic(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            main(["synth", "--out", str(out), "--utterances", "4",
                  "--frames", "20", "--classes", "3", "--seed", "9"])
        for f1, f2 in zip(sorted((a / "train").glob("*.feat")),
                          sorted((b / "train").glob("*.feat"))):
            assert f1.read_bytes() == f2.read_bytes()
        assert (a / "train.ali").read_bytes() == (b / "train.ali").read_bytes()


@pytest.fixture
def small_corpus(tmp_path):
    out = tmp_path / "corpus"
    main(["synth", "--out", str(out), "--utterances", "6", "--frames", "40",
          "--classes", "4", "--seed", "3"])
    return out


class TestTrainEval:
    def test_lr_zero_checkpoint_equals_init(self, small_corpus, tmp_path):
        run = tmp_path / "run"
        code = main(["train", "--arch", "Lstm8",
                     "--features", str(small_corpus / "train"),
                     "--alignments", str(small_corpus / "train.ali"),
                     "--out", str(run), "--classes", "4", "--epochs", "1",
                     "--lr-init", "0", "--seed", "11", "--label-delay", "0"])
        assert code == 0
        from convrnn.network import load_checkpoint

        net = load_checkpoint(run / "model.crnp")
        spec = parse_arch("Lstm8", input_spec=InputSpec(33, 3, 0), num_classes=4)
        init = build(spec, seed=11)
        assert net.flat_params().tobytes() == init.flat_params().tobytes()

    def test_train_then_eval(self, small_corpus, tmp_path, capsys):
        run = tmp_path / "run"
        code = main(["train", "--arch", "CLstm4 + Pooling + ReLU8",
                     "--features", str(small_corpus / "train"),
                     "--alignments", str(small_corpus / "train.ali"),
                     "--out", str(run), "--classes", "4", "--epochs", "2",
                     "--lr-init", "0.05", "--lr-final", "0.01",
                     "--label-delay", "0", "--seed", "1"])
        assert code == 0
        assert (run / "metrics.log").exists()
        lines = (run / "metrics.log").read_text().strip().splitlines()
        assert len(lines) == 2
        assert len(lines[0].split()) == 5

        code = main(["eval", "--checkpoint", str(run / "model.crnp"),
                     "--features", str(small_corpus / "train"),
                     "--alignments", str(small_corpus / "train.ali")])
        assert code == 0
        out = capsys.readouterr().out
        assert "frame_accuracy=" in out and "mean_ce=" in out

    def test_train_determinism(self, small_corpus, tmp_path):
        runs = []
        for name in ("r1", "r2"):
            run = tmp_path / name
            main(["train", "--arch", "Lstm6",
                  "--features", str(small_corpus / "train"),
                  "--alignments", str(small_corpus / "train.ali"),
                  "--out", str(run), "--classes", "4", "--epochs", "2",
                  "--lr-init", "0.05", "--lr-final", "0.01", "--seed", "7"])
            runs.append(run)
        assert ((runs[0] / "model.crnp").read_bytes()
                == (runs[1] / "model.crnp").read_bytes())
        assert ((runs[0] / "metrics.log").read_bytes()
                == (runs[1] / "metrics.log").read_bytes())

    def test_eval_missing_checkpoint_exit_2(self, small_corpus, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.crnp"),
                     "--features", str(small_corpus / "train"),
                     "--alignments", str(small_corpus / "train.ali")]) == 2

    def test_val_fraction_split(self, small_corpus, tmp_path):
        run = tmp_path / "run"
        code = main(["train", "--arch", "Lstm4",
                     "--features", str(small_corpus / "train"),
                     "--alignments", str(small_corpus / "train.ali"),
                     "--out", str(run), "--classes", "4", "--epochs", "1",
                     "--lr-init", "0.02", "--lr-final", "0.01",
                     "--val-fraction", "0.3", "--seed", "2"])
        assert code == 0


class TestGradcheckCommand:
    def test_toy_clstm_passes(self, capsys):
        code = main(["gradcheck", "--arch", "CLstm16 + Pooling + ReLU32",
                     "--bands", "12", "--channels", "2", "--classes", "5",
                     "--patch-size", "4", "--patch-stride", "2",
                     "--pool", "2", "--samples", "40", "--seed", "0"])
        out = capsys.readouterr().out
        assert code == 0
        assert "PASS" in out
        assert "overall max relative error" in out

    def test_divergent_tolerance_fails(self, capsys):
        code = main(["gradcheck", "--arch", "ReLU8", "--bands", "4",
                     "--channels", "1", "--classes", "3",
                     "--samples", "10", "--tolerance", "1e-18"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out
