"""Command-line front end.

Subcommands: featurize, count-params, synth, train, eval, gradcheck.
Exit codes: 0 success, 2 usage/configuration error, 3 numerical divergence.
Every command is deterministic given its inputs and --seed; gradcheck exits
1 when the worst relative error exceeds --tolerance.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import features as F
from . import network as N
from . import synth as S
from . import training as T

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    """User-facing configuration problem; maps to exit code 2."""


def _add_geometry_flags(parser):
    parser.add_argument("--pool", type=int, default=3,
                        help="pooling group size (default 3)")
    parser.add_argument("--patch-size", type=int, default=10,
                        help="frequency patch size in bands (default 10)")
    parser.add_argument("--patch-stride", type=int, default=1,
                        help="patch stride in bands (default 1)")


def _add_input_flags(parser):
    parser.add_argument("--bands", type=int, default=33,
                        help="static coefficients per frame (default 33)")
    parser.add_argument("--channels", type=int, default=3,
                        help="feature channels: static/Δ/ΔΔ (default 3)")
    parser.add_argument("--context", type=int, default=None,
                        help="context frames each side; default 5 for "
                             "ReLU/Maxout-first networks, else 0")
    parser.add_argument("--classes", type=int, default=5529,
                        help="output classes (default 5529)")


def _add_train_flags(parser):
    parser.add_argument("--epochs", type=int, default=1)
    parser.add_argument("--batch-size", type=int, default=20)
    parser.add_argument("--subseq-len", type=int, default=15)
    parser.add_argument("--overlap", type=int, default=5)
    parser.add_argument("--label-delay", type=int, default=5)
    parser.add_argument("--lr-init", type=float, default=0.04)
    parser.add_argument("--lr-final", type=float, default=0.0004)
    parser.add_argument("--clip", type=float, default=1.0)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=True,
                        help="fixed reduction order (default on; the current "
                             "implementation is always deterministic)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convrnn",
        description="Frequency-patch convolutional-recurrent acoustic models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="extract mel log-filterbank features")
    p.add_argument("--audio", nargs="+", required=True,
                   help="wav files and/or directories containing them")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-mel", type=int, default=32)
    p.add_argument("--frame-len", type=float, default=25.0, help="ms")
    p.add_argument("--frame-shift", type=float, default=10.0, help="ms")
    p.add_argument("--no-normalize", action="store_true")

    p = sub.add_parser("count-params", help="count trainable parameters")
    p.add_argument("--arch", help="architecture string")
    p.add_argument("--spec-json", help="NetworkSpec JSON file (alternative to --arch)")
    _add_input_flags(p)
    _add_geometry_flags(p)
    p.add_argument("--per-layer", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--shift", type=int, default=0,
                   help="frequency shift range in bands")
    p.add_argument("--disjoint-shifts", action="store_true",
                   help="train on even shifts, test on odd shifts")
    p.add_argument("--test-utterances", type=int, default=0)
    p.add_argument("--bands", type=int, default=33)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--arch")
    p.add_argument("--spec-json")
    p.add_argument("--features", required=True, help="feature file directory")
    p.add_argument("--alignments", required=True, help="alignment file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="held-out utterance fraction (seeded split)")
    _add_input_flags(p)
    _add_geometry_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--alignments", required=True)
    p.add_argument("--subseq-len", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--label-delay", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--arch")
    p.add_argument("--spec-json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=200,
                   help="sampled parameters per block")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--subseq-len", type=int, default=8)
    p.add_argument("--bands", type=int, default=33)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--classes", type=int, default=10)
    _add_geometry_flags(p)
    return parser


def _geometry(args):
    return N.PatchGeometry(patch_size=args.patch_size,
                           patch_stride=args.patch_stride,
                           pool_size=args.pool)


def _network_spec(args):
    if getattr(args, "spec_json", None):
        if args.arch:
            raise CliError("--arch and --spec-json are mutually exclusive")
        text = Path(args.spec_json).read_text(encoding="utf-8")
        return N.network_spec_from_json(text)
    if not args.arch:
        raise CliError("one of --arch or --spec-json is required")
    specs = N._Parser(args.arch).parse()
    N.validate_layer_order(specs)
    context = args.context
    if context is None:
        context = N.default_context(specs)
    input_spec = N.InputSpec(num_bands=args.bands, num_channels=args.channels,
                             context=context)
    return N.NetworkSpec(input=input_spec, layers=specs,
                         num_classes=args.classes)


def _wav_paths(inputs):
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.wav")))
        elif p.exists():
            paths.append(p)
        else:
            raise CliError("no such file or directory: %s" % item)
    return paths


def _read_wave(path):
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if rate not in (8000, 16000):
        raise CliError("%s: unsupported sample rate %d (need 8 or 16 kHz)"
                       % (path, rate))
    if data.ndim != 1:
        raise CliError("%s: only mono PCM WAV is supported" % path)
    return F.WaveUtterance(samples=data.astype(np.float64), sample_rate=rate,
                           utterance_id=Path(path).stem)


def cmd_featurize(args):
    paths = _wav_paths(args.audio)
    if not paths:
        raise CliError("no input utterances")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = None
    for path in paths:
        wave = _read_wave(path)
        feats = F.extract_features(wave, num_mel=args.num_mel,
                                   frame_len_ms=args.frame_len,
                                   frame_shift_ms=args.frame_shift,
                                   do_normalize=not args.no_normalize)
        F.write_features(out_dir / (wave.utterance_id + ".feat"), feats)
        dims = (feats.num_bands, feats.num_channels, feats.dim)
    print("featurized %d utterances (F=%d C=%d D=%d)" % (len(paths), *dims))
    return EXIT_OK


def cmd_count_params(args):
    spec = _network_spec(args)
    geom = _geometry(args)
    if args.per_layer:
        for name, count in N.count_params(spec, geom, per_layer=True):
            print("%-20s %12s" % (name, format(count, ",")))
    total = N.count_params(spec, geom)
    print("%s (%.1fM)" % (format(total, ","), total / 1e6))
    return EXIT_OK


def _write_corpus(pairs, feat_dir, ali_path):
    feat_dir.mkdir(parents=True, exist_ok=True)
    alignments = []
    for feats, ali in pairs:
        F.write_features(feat_dir / (feats.utterance_id + ".feat"), feats)
        alignments.append(ali)
    F.write_alignments(ali_path, alignments)


def cmd_synth(args):
    config = S.SynthConfig(num_utterances=args.utterances,
                           frames_per_utterance=args.frames,
                           num_classes=args.classes,
                           shift_range=args.shift,
                           disjoint_shifts=args.disjoint_shifts,
                           test_utterances=args.test_utterances,
                           num_bands=args.bands,
                           seed=args.seed)
    train, test = S.generate_corpus(config)
    out = Path(args.out)
    _write_corpus(train, out / "train", out / "train.ali")
    print("wrote %d train utterances to %s" % (len(train), out / "train"))
    if test:
        _write_corpus(test, out / "test", out / "test.ali")
        print("wrote %d test utterances to %s" % (len(test), out / "test"))
    return EXIT_OK


def _load_corpus(feat_dir, ali_path, num_classes):
    feat_dir = Path(feat_dir)
    if not feat_dir.is_dir():
        raise CliError("no such feature directory: %s" % feat_dir)
    feats = {}
    for path in sorted(feat_dir.glob("*.feat")):
        seq = F.read_features(path)
        feats[seq.utterance_id] = seq
    if not feats:
        raise CliError("no feature files in %s" % feat_dir)
    if not Path(ali_path).exists():
        raise CliError("no such alignment file: %s" % ali_path)
    alignments = F.read_alignments(ali_path, num_classes)
    pairs = []
    for ali in alignments:
        if ali.utterance_id not in feats:
            raise CliError("alignment for unknown utterance %r" % ali.utterance_id)
        pairs.append((feats[ali.utterance_id], ali))
    if not pairs:
        raise CliError("alignment file %s is empty" % ali_path)
    return pairs


def _train_config(args):
    return T.TrainConfig(subseq_len=args.subseq_len,
                         overlap=args.overlap,
                         batch_size=args.batch_size,
                         label_delay=args.label_delay,
                         clip_threshold=args.clip,
                         lr_init=args.lr_init,
                         lr_final=args.lr_final,
                         epochs=args.epochs,
                         seed=args.seed,
                         deterministic=args.deterministic)


def cmd_train(args):
    spec = _network_spec(args)
    geom = _geometry(args)
    config = _train_config(args)
    pairs = _load_corpus(args.features, args.alignments, spec.num_classes)
    val_pairs = None
    if args.val_fraction > 0:
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(pairs))
        n_val = max(1, int(round(args.val_fraction * len(pairs))))
        if n_val >= len(pairs):
            raise CliError("--val-fraction leaves no training utterances")
        val_idx = set(order[:n_val].tolist())
        val_pairs = [pairs[i] for i in sorted(val_idx)]
        pairs = [pairs[i] for i in range(len(pairs)) if i not in val_idx]

    network = N.build(spec, seed=args.seed, geometry=geom)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_lines = []

    def log(line):
        log_lines.append(line)
        print(line)

    try:
        T.train(network, pairs, config, val_corpus=val_pairs, log=log)
    except T.DivergenceError as exc:
        print("training diverged: %s" % exc, file=sys.stderr)
        return EXIT_DIVERGED
    (out / "metrics.log").write_text("".join(line + "\n" for line in log_lines),
                                     encoding="utf-8")
    N.save_checkpoint(out / "model.crnp", network)
    sidecar = {
        "arch": N.render_arch(spec.layers),
        "num_classes": spec.num_classes,
        "input": asdict(spec.input),
        "geometry": asdict(geom),
        "train_config": asdict(config),
    }
    (out / "model.json").write_text(json.dumps(sidecar, indent=2),
                                    encoding="utf-8")
    return EXIT_OK


def _eval_config(args, sidecar):
    base = sidecar.get("train_config", {}) if sidecar else {}
    def pick(flag, key, default):
        if flag is not None:
            return flag
        return base.get(key, default)
    return T.TrainConfig(
        subseq_len=pick(args.subseq_len, "subseq_len", 15),
        overlap=pick(args.overlap, "overlap", 5),
        label_delay=pick(args.label_delay, "label_delay", 5),
    )


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError("no such checkpoint: %s" % ckpt)
    sidecar_path = ckpt.with_suffix(".json")
    sidecar = None
    spec = None
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        input_spec = N.InputSpec(**sidecar["input"])
        specs = N._Parser(sidecar["arch"]).parse() if sidecar.get("arch") else []
        spec = N.NetworkSpec(input=input_spec, layers=specs,
                             num_classes=sidecar["num_classes"])
    network = N.load_checkpoint(ckpt, spec=spec)
    config = _eval_config(args, sidecar)
    pairs = _load_corpus(args.features, args.alignments, network.num_classes)
    facc, ce, frames = T.evaluate(network, pairs, config)
    print("frames=%d frame_accuracy=%.6f mean_ce=%.6f" % (frames, facc, ce))
    return EXIT_OK


def cmd_gradcheck(args):
    spec = _network_spec(args)
    geom = _geometry(args)
    network = N.build(spec, seed=args.seed, geometry=geom)
    N.randomize_params(network, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    feats = rng.normal(size=(args.batch_size, args.subseq_len, spec.input.dim))
    targets = rng.integers(0, spec.num_classes,
                           size=(args.batch_size, args.subseq_len))
    mask = np.ones_like(targets, dtype=bool)
    batch = T.SubsequenceBatch(feats, targets, mask,
                               [("synthetic", 0)] * args.batch_size)
    report = T.gradcheck(network, batch, epsilon=args.epsilon,
                         samples_per_block=args.samples, seed=args.seed)
    for line in report.format_lines():
        print(line)
    if not report.passed(args.tolerance):
        print("FAIL: exceeded tolerance %g" % args.tolerance)
        return 1
    print("PASS: all blocks within %g" % args.tolerance)
    return EXIT_OK


_COMMANDS = {
    "featurize": cmd_featurize,
    "count-params": cmd_count_params,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (CliError, N.ArchError, N.BuildError, F.FeatureFormatError,
            N.CheckpointFormatError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except T.DivergenceError as exc:
        print("training diverged: %s" % exc, file=sys.stderr)
        return EXIT_DIVERGED


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
