"""Command-line surface: datagen, train, separate, eval, vitals, bench, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness flows
from --seed. A --config file (UTF-8 `key = value` lines, # comments) supplies
defaults; explicit flags override it, and unknown keys are rejected.
"""

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import datagen, metrics, training, vitals
from .dsp import Waveform
from .errors import ChestSepError, ConfigError
from .model import SeparatorConfig, SeparatorModel
from .wavio import wav_read, wav_write


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_model_shape_flags(p):
    p.add_argument("--kernel-size", type=int, default=512)
    p.add_argument("--stride", type=int, default=0, help="0 means kernel/2")
    p.add_argument("--feature-size", type=int, default=512)
    p.add_argument("--mask-feature-size", type=int, default=256)
    p.add_argument("--conv-layers", type=int, default=6)
    p.add_argument("--transformer-depth", type=int, default=4)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--encoder", choices=("learned_conv", "stft_baseline"), default="learned_conv")


def _model_config_from_args(args) -> SeparatorConfig:
    return SeparatorConfig(
        encoder_kind=args.encoder,
        kernel_size=args.kernel_size,
        stride=args.stride,
        feature_size=args.feature_size,
        mask_feature_size=args.mask_feature_size,
        conv_layers=args.conv_layers,
        transformer_depth=args.transformer_depth,
        num_heads=args.num_heads,
    )


def build_parser():
    parser = _Parser(prog="chestsep", description="Neonatal chest-sound separation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    subparsers = {}

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="global RNG seed (u64)")
        p.add_argument("--config", default=None, help="key = value defaults file")
        subparsers[name] = p
        return p

    p = command("datagen", "write a dataset manifest (and optionally WAVs)")
    p.add_argument("--manifest", required=True, help="manifest file to write")
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--noise", choices=("none", "general", "resp"), default=None,
                   help="restrict the test grid to one noise partition")
    p.add_argument("--count", type=int, default=0, help="rows for train/val manifests (0 = default)")
    p.add_argument("--out", default=None, help="directory for WAV export of every sample")
    p.add_argument("--threads", type=int, default=1)

    p = command("train", "run the two-phase training protocol on the synthetic stream")
    p.add_argument("--model", required=True, help="checkpoint path (suffixed .best / .last)")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--steps", type=int, default=250, help="fresh batches per epoch")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--finetune-epoch", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--resume", default=None, help="resume from a .last checkpoint")
    p.add_argument("--log", default=None, help="training log CSV (default <model>.log.csv)")
    p.add_argument("--threads", type=int, default=1)
    _add_model_shape_flags(p)

    p = command("separate", "separate a WAV into heart and lung tracks")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="input mixture WAV")
    p.add_argument("--out-heart", required=True)
    p.add_argument("--out-lung", required=True)

    p = command("eval", "evaluate a model over a test manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report CSV (medians appended)")
    p.add_argument("--threads", type=int, default=1)

    p = command("vitals", "estimate heart/breathing rates before and after separation")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", default=None, help="optional checkpoint; adds after-separation estimates")
    p.add_argument("--ref", default=None, help="reference CSV: second_index, hr_bpm, br_bpm")
    p.add_argument("--out", required=True, help="per-second rate CSV")

    p = command("bench", "time inference per the 10-run protocol")
    p.add_argument("--model", default=None, help="checkpoint; default-config random weights if omitted")
    p.add_argument("--scenario", choices=("single", "batch16", "both"), default="both")
    p.add_argument("--out", default=None, help="per-run samples CSV")
    p.add_argument("--threads", type=int, default=0, help="informational; 0 = library default")

    p = command("ablate", "train and evaluate one ablation configuration")
    p.add_argument("--name", required=True, choices=sorted(training.ABLATIONS))
    p.add_argument("--model", required=True, help="checkpoint path for the ablated model")
    p.add_argument("--manifest", default=None, help="test manifest to evaluate (default: full built-in grid)")
    p.add_argument("--out", default=None, help="metrics report CSV")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--threads", type=int, default=1)
    _add_model_shape_flags(p)

    return parser, subparsers


def _load_config_file(path, subparser):
    values = {}
    actions = {a.option_strings[-1].lstrip("-"): a for a in subparser._actions if a.option_strings}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = (part.strip() for part in line.partition("="))
            if not eq:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
            if key not in actions:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            action = actions[key]
            values[action.dest] = action.type(value) if action.type else value
    return values


def _apply_config_defaults(argv, parser, subparsers):
    """If --config is given, install its values as subcommand defaults so that
    explicit flags still win."""
    if not argv or argv[0] not in subparsers:
        return
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            subparsers[argv[0]].set_defaults(**_load_config_file(argv[i + 1], subparsers[argv[0]]))
            return
        if token.startswith("--config="):
            path = token.split("=", 1)[1]
            subparsers[argv[0]].set_defaults(**_load_config_file(path, subparsers[argv[0]]))
            return


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_datagen(args) -> int:
    params = datagen.DatasetParams(seed=args.seed)
    if args.partition == "test":
        manifest = datagen.build_test_manifest(params)
        if args.noise is not None:
            tag = {"none": "no_noise", "general": "general_noise", "resp": "resp_support"}[args.noise]
            manifest = datagen.DatasetManifest(
                [r for r in manifest.rows if datagen.noise_partition(r.noise_kind) == tag]
            )
    elif args.partition == "val":
        if args.count:
            params.val_samples = args.count
        manifest = datagen.build_validation_manifest(params)
    else:
        stream = datagen.TrainingStream(seed=args.seed, params=params)
        count = args.count or 100
        manifest = datagen.DatasetManifest(
            [stream.record_for(0, i, 0) for i in range(count)]
        )
        for i, row in enumerate(manifest.rows):
            row.sample_index = i
    manifest.assert_no_leakage()
    manifest.save(args.manifest)
    print(f"wrote {len(manifest)} rows to {args.manifest}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)

        def export(row):
            sample = datagen.render_sample(row)
            stem = os.path.join(args.out, f"sample{row.sample_index:05d}")
            wav_write(f"{stem}_mixture.wav", sample.mixture)
            wav_write(f"{stem}_heart.wav", sample.target_heart)
            wav_write(f"{stem}_lung.wav", sample.target_lung)
            wav_write(f"{stem}_noise.wav", sample.noise)

        if args.threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                list(pool.map(export, manifest.rows))
        else:
            for row in manifest.rows:
                export(row)
        print(f"exported WAVs for {len(manifest)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = training.TrainConfig(
        epochs=args.epochs, steps_per_epoch=args.steps, batch_size=args.batch_size,
        learning_rate=args.lr, finetune_start_epoch=args.finetune_epoch, seed=args.seed,
    )
    if args.resume:
        model, optimizer, scheduler, start_epoch = training.load_resume_state(args.resume, cfg)
        print(f"resuming at epoch {start_epoch} from {args.resume}")
        model, log = training.train(
            model, cfg, checkpoint_path=args.model, start_epoch=start_epoch,
            optimizer=optimizer, scheduler=scheduler,
        )
    else:
        model = SeparatorModel(_model_config_from_args(args), seed=args.seed)
        print(f"training {model.parameter_count():,} parameters for {cfg.epochs} epochs")
        model, log = training.train(model, cfg, checkpoint_path=args.model)
    model.save(args.model)
    log.to_csv(args.log or f"{args.model}.log.csv")
    print(f"best validation loss {log.best_val_loss:.3f} at epoch {log.best_epoch}; saved {args.model}")
    return 0


def _cmd_separate(args) -> int:
    model = SeparatorModel.load(args.model)
    mixture = wav_read(args.input)
    samples = mixture.samples
    peak = float(np.max(np.abs(samples)))
    est = model.separate((samples / peak if peak > 0 else samples).astype(np.float32))
    rate = mixture.sample_rate_hz
    wav_write(args.out_heart, Waveform(est[0].astype(np.float64), rate))
    wav_write(args.out_lung, Waveform(est[1].astype(np.float64), rate))
    print(f"wrote {args.out_heart} and {args.out_lung} ({est.shape[1]} samples @ {rate} Hz)")
    return 0


def _cmd_eval(args) -> int:
    model = SeparatorModel.load(args.model)
    manifest = datagen.DatasetManifest.load(args.manifest)
    report = metrics.evaluate_testset(model, manifest, threads=args.threads)
    report.to_csv(args.out)
    print(f"evaluated {len(report.rows)} samples ({report.n_skipped} skipped) -> {args.out}")
    for (partition, source, metric), value in sorted(report.summary().items()):
        if metric in ("sdri", "si_sdri"):
            print(f"  {partition:15s} {source:5s} median {metric}: {value:+.2f} dB")
    return 0


def _cmd_vitals(args) -> int:
    wave = wav_read(args.input)
    hr_before = vitals.estimate_heart_rate(wave)
    br_before = vitals.estimate_breathing_rate(wave)
    hr_after = br_after = None
    if args.model:
        model = SeparatorModel.load(args.model)
        samples = wave.samples
        peak = float(np.max(np.abs(samples)))
        est = model.separate((samples / peak if peak > 0 else samples).astype(np.float32))
        hr_after = vitals.estimate_heart_rate(Waveform(est[0].astype(np.float64), wave.sample_rate_hz))
        br_after = vitals.estimate_breathing_rate(Waveform(est[1].astype(np.float64), wave.sample_rate_hz))
    with open(args.out, "w", encoding="utf-8") as fh:
        header = "second,hr_bpm,br_bpm"
        if hr_after is not None:
            header += ",hr_bpm_separated,br_bpm_separated"
        fh.write(header + "\n")
        for sec in range(len(hr_before)):
            def cell(series):
                return f"{series.values[sec]:.2f}" if sec < len(series) and series.valid[sec] else ""
            row = f"{sec},{cell(hr_before)},{cell(br_before)}"
            if hr_after is not None:
                row += f",{cell(hr_after)},{cell(br_after)}"
            fh.write(row + "\n")
    print(f"wrote per-second rates to {args.out}")
    if args.ref:
        hr_ref, br_ref = vitals.load_reference_rates(args.ref)
        for label, before, after, ref in (
            ("heart rate", hr_before, hr_after, hr_ref),
            ("breathing rate", br_before, br_after, br_ref),
        ):
            if after is None:
                err = vitals.recording_error(before, ref)
                print(f"  {label}: mean abs error {err:.2f} (no model given)")
            else:
                stats = vitals.rate_improvement(before, after, ref)
                print(f"  {label} improvement: mean {stats.mean:.2f} median {stats.median:.2f} std {stats.std:.2f}")
    return 0


def _cmd_bench(args) -> int:
    if args.model:
        model = SeparatorModel.load(args.model)
    else:
        model = SeparatorModel(SeparatorConfig(), seed=args.seed)
    scenarios = ("single", "batch16") if args.scenario == "both" else (args.scenario,)
    threads = "default" if args.threads == 0 else str(args.threads)
    reports = [bench_mod.bench(model, s, seed=args.seed, threads=threads) for s in scenarios]
    for report in reports:
        print(report.describe())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("scenario,run,seconds,batch_size,amortized_seconds\n")
            for report in reports:
                for i, t in enumerate(report.run_seconds):
                    fh.write(f"{report.scenario},{i},{t:.6f},{report.batch_size},{report.amortized_seconds:.6f}\n")
        print(f"wrote per-run samples to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    base_model = _model_config_from_args(args)
    base_train = training.TrainConfig(
        epochs=args.epochs, steps_per_epoch=args.steps, batch_size=args.batch_size, seed=args.seed,
    )
    manifest = datagen.DatasetManifest.load(args.manifest) if args.manifest else None
    model, log, report = training.ablation_run(
        args.name, base_model, base_train, test_manifest=manifest,
        checkpoint_path=args.model, eval_threads=args.threads,
    )
    model.save(args.model, extra_config={"ablation": args.name})
    log.to_csv(f"{args.model}.log.csv")
    if args.out:
        report.to_csv(args.out)
    print(f"ablation {args.name}: {model.parameter_count():,} params, "
          f"best val loss {log.best_val_loss:.3f}")
    for (partition, source, metric), value in sorted(report.summary().items()):
        if metric == "si_sdri":
            print(f"  {partition:15s} {source:5s} median SI-SDRi: {value:+.2f} dB")
    return 0


_COMMANDS = {
    "datagen": _cmd_datagen,
    "train": _cmd_train,
    "separate": _cmd_separate,
    "eval": _cmd_eval,
    "vitals": _cmd_vitals,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_config_defaults(argv, parser, subparsers)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
    except (UsageError, ConfigError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ChestSepError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
