import numpy as np
import pytest

from conftest import TINY
from chestsep import bench as bench_mod
from chestsep import datagen
from chestsep.cli import main
from chestsep.dsp import Waveform
from chestsep.model import SeparatorConfig, SeparatorModel
from chestsep.wavio import wav_read, wav_write


@pytest.fixture
def tiny_checkpoint(tmp_path):
    path = tmp_path / "tiny.ckpt"
    SeparatorModel(SeparatorConfig(**TINY), seed=0).save(path)
    return path


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 1

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["datagen", "--manifest", "m.txt", "--frobnicate"]) == 1

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        assert main(["separate", "--model", str(tmp_path / "nope.ckpt"),
                     "--in", "x.wav", "--out-heart", "h.wav", "--out-lung", "l.wav"]) == 2

    def test_bad_checkpoint_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNKJUNK")
        wav = tmp_path / "x.wav"
        wav_write(wav, Waveform(np.zeros(1000) + 0.1))
        assert main(["separate", "--model", str(bad), "--in", str(wav),
                     "--out-heart", str(tmp_path / "h.wav"),
                     "--out-lung", str(tmp_path / "l.wav")]) == 2


class TestDatagen:
    def test_manifest_deterministic_across_runs(self, tmp_path, capsys):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        assert main(["datagen", "--manifest", str(a), "--partition", "test", "--seed", "7"]) == 0
        assert main(["datagen", "--manifest", str(b), "--partition", "test", "--seed", "7"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_noise_filter(self, tmp_path, capsys):
        path = tmp_path / "resp.txt"
        assert main(["datagen", "--manifest", str(path), "--partition", "test",
                     "--noise", "resp", "--seed", "1"]) == 0
        manifest = datagen.DatasetManifest.load(path)
        assert all(r.noise_kind in datagen.RESP_NOISE_KINDS for r in manifest.rows)

    def test_train_manifest_with_count(self, tmp_path, capsys):
        path = tmp_path / "train.txt"
        assert main(["datagen", "--manifest", str(path), "--partition", "train",
                     "--count", "5", "--seed", "2"]) == 0
        assert len(datagen.DatasetManifest.load(path)) == 5

    def test_wav_export(self, tmp_path, capsys):
        manifest = tmp_path / "m.txt"
        out = tmp_path / "wavs"
        assert main(["datagen", "--manifest", str(manifest), "--partition", "train",
                     "--count", "2", "--seed", "3", "--out", str(out)]) == 0
        written = sorted(p.name for p in out.iterdir())
        assert len(written) == 8  # 2 samples x (mixture, heart, lung, noise)
        wave = wav_read(out / "sample00000_mixture.wav")
        assert len(wave) == 40000


class TestSeparate:
    def test_end_to_end(self, tmp_path, tiny_checkpoint, capsys, rng):
        wav = tmp_path / "mix.wav"
        wav_write(wav, Waveform(rng.uniform(-0.5, 0.5, 4321)))
        heart, lung = tmp_path / "h.wav", tmp_path / "l.wav"
        code = main(["separate", "--model", str(tiny_checkpoint), "--in", str(wav),
                     "--out-heart", str(heart), "--out-lung", str(lung)])
        assert code == 0
        assert len(wav_read(heart)) == 4321
        assert len(wav_read(lung)) == 4321


class TestEval:
    def test_report_csv(self, tmp_path, tiny_checkpoint, capsys):
        manifest_path = tmp_path / "m.txt"
        rows = datagen.build_test_manifest(datagen.DatasetParams(seed=4)).rows[:3]
        for i, row in enumerate(rows):
            row.sample_index = i
        datagen.DatasetManifest(rows).save(manifest_path)
        out = tmp_path / "report.csv"
        code = main(["eval", "--model", str(tiny_checkpoint), "--manifest", str(manifest_path),
                     "--out", str(out), "--threads", "2"])
        assert code == 0
        lines = out.read_text().splitlines()
        assert len([l for l in lines if l and l[0].isdigit()]) == 3


class TestVitals:
    def test_rates_csv(self, tmp_path, capsys):
        wav = tmp_path / "heart.wav"
        heart = datagen.synth_source(datagen.SourceSpec("heart", 1, 5, duration_s=16.0, heart_bpm=150.0))
        wav_write(wav, Waveform(heart.samples / np.max(np.abs(heart.samples))))
        ref = tmp_path / "ref.csv"
        ref.write_text("second_index,hr_bpm,br_bpm\n" +
                       "\n".join(f"{s},150,50" for s in range(16)) + "\n")
        out = tmp_path / "rates.csv"
        assert main(["vitals", "--in", str(wav), "--ref", str(ref), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "second,hr_bpm,br_bpm"
        assert len(lines) == 17
        captured = capsys.readouterr()
        assert "heart rate" in captured.out


class TestBench:
    def test_protocol_structure(self, tiny_checkpoint, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = main(["bench", "--model", str(tiny_checkpoint), "--scenario", "both",
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "scenario,run,seconds,batch_size,amortized_seconds"
        assert len([l for l in lines if l.startswith("single,")]) == 10
        assert len([l for l in lines if l.startswith("batch16,")]) == 10

    def test_bench_function_amortization(self, tiny_checkpoint):
        model = SeparatorModel.load(tiny_checkpoint)
        report = bench_mod.bench(model, "batch16", seed=1)
        assert len(report.run_seconds) == 10
        assert report.batch_size == 16
        assert report.amortized_seconds == report.mean_seconds / 16
        assert report.warmup_runs == 2


class TestTrainCli:
    def test_train_writes_checkpoints_and_log(self, tmp_path, capsys):
        model_path = tmp_path / "m.ckpt"
        code = main([
            "train", "--model", str(model_path), "--seed", "0",
            "--epochs", "1", "--steps", "1", "--batch-size", "1",
            "--kernel-size", "512", "--stride", "256", "--feature-size", "32",
            "--mask-feature-size", "16", "--conv-layers", "1",
            "--transformer-depth", "1", "--num-heads", "2",
        ])
        assert code == 0
        assert model_path.exists()
        assert (tmp_path / "m.ckpt.best").exists()
        assert (tmp_path / "m.ckpt.last").exists()
        log = (tmp_path / "m.ckpt.log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,val_loss,lr,seconds"
        assert len(log) == 2
        reloaded = SeparatorModel.load(model_path)
        assert reloaded.config.kernel_size == 512

    def test_resume_from_last(self, tmp_path, capsys):
        model_path = tmp_path / "m.ckpt"
        args = [
            "--seed", "0", "--epochs", "1", "--steps", "1", "--batch-size", "1",
            "--kernel-size", "512", "--stride", "256", "--feature-size", "32",
            "--mask-feature-size", "16", "--conv-layers", "1",
            "--transformer-depth", "1", "--num-heads", "2",
        ]
        assert main(["train", "--model", str(model_path), *args]) == 0
        resumed = tmp_path / "m2.ckpt"
        code = main(["train", "--model", str(resumed),
                     "--resume", str(tmp_path / "m.ckpt.last"),
                     *args, "--epochs", "2"])
        assert code == 0
        assert resumed.exists()


class TestAblateCli:
    def test_ablate_runs_and_reports(self, tmp_path, capsys):
        manifest_path = tmp_path / "m.txt"
        rows = datagen.build_test_manifest(datagen.DatasetParams(seed=2)).rows[:3]
        for i, row in enumerate(rows):
            row.sample_index = i
        datagen.DatasetManifest(rows).save(manifest_path)
        out = tmp_path / "report.csv"
        code = main([
            "ablate", "--name", "kernel256", "--model", str(tmp_path / "a.ckpt"),
            "--manifest", str(manifest_path), "--out", str(out), "--seed", "0",
            "--epochs", "1", "--steps", "1", "--batch-size", "1",
            "--kernel-size", "512", "--stride", "256", "--feature-size", "32",
            "--mask-feature-size", "16", "--conv-layers", "1",
            "--transformer-depth", "1", "--num-heads", "2",
        ])
        assert code == 0
        assert out.exists()
        captured = capsys.readouterr()
        assert "ablation kernel256" in captured.out

    def test_unknown_ablation_is_usage_error(self, capsys):
        assert main(["ablate", "--name", "banana", "--model", "x.ckpt"]) == 1


class TestConfigFile:
    def test_config_supplies_defaults_flags_override(self, tmp_path, capsys):
        config = tmp_path / "cfg.txt"
        config.write_text("# defaults\ncount = 4\nseed = 9\n")
        out_a = tmp_path / "a.txt"
        assert main(["datagen", "--config", str(config), "--manifest", str(out_a),
                     "--partition", "train"]) == 0
        assert len(datagen.DatasetManifest.load(out_a)) == 4
        out_b = tmp_path / "b.txt"
        assert main(["datagen", "--config", str(config), "--manifest", str(out_b),
                     "--partition", "train", "--count", "2"]) == 0
        assert len(datagen.DatasetManifest.load(out_b)) == 2

    def test_unknown_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "cfg.txt"
        config.write_text("frobnicate = yes\n")
        assert main(["datagen", "--config", str(config), "--manifest", "x.txt"]) == 1

    def test_malformed_line_rejected(self, tmp_path, capsys):
        config = tmp_path / "cfg.txt"
        config.write_text("just some words\n")
        assert main(["datagen", "--config", str(config), "--manifest", "x.txt"]) == 1
