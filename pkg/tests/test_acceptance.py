"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v` (add -s to see the PASS lines
immediately).  The empirical criteria (overfit, shift-generalization trend,
determinism) retrain small networks and take a few minutes together.
"""

import time

import numpy as np
import pytest

from convrnn.cli import main
from convrnn.layers import LstmLayer, ClstmLayer, PatchLayout, init_lstm_params
from convrnn.network import (
    InputSpec,
    NetworkSpec,
    PatchGeometry,
    build,
    count_params,
    parse_arch,
    randomize_params,
)
from convrnn.synth import SynthConfig, generate_corpus
from convrnn.training import (
    SubsequenceBatch,
    TrainConfig,
    clip_gradients,
    delay_labels,
    evaluate,
    gradcheck,
    lr_schedule,
    split_subsequences,
    train,
)


def report(criterion, detail=""):
    print("ACCEPTANCE %s: PASS %s" % (criterion, detail))


# criterion 1 ---------------------------------------------------------------

REFERENCE_ROWS = [
    # (architecture, reference parameter total in millions)
    ("4×ReLU2000", 25.1),
    ("4×Maxout800G3", 12.6),
    ("2×(Conv + Pooling) + 3×ReLU2000", 20.3),
    ("Lstm750", 6.7),
    ("Lstm2000P750", 12.4),
    ("Lstm750 + 3×ReLU2000", 23.1),
    ("Lstm2000P750 + 3×ReLU2000", 28.8),
    ("3×Lstm2000P750", 39.4),
    ("CLstm128 + 3×ReLU2000", 25.3),
    ("CLstm128 + Pooling + 3×ReLU2000", 21.2),
    ("CLstm256 + Pooling + 3×ReLU2000", 23.4),
    ("CLstm256P128 + Pooling + 3×ReLU2000", 21.3),
    ("CLstm384P256 + Pooling + 3×ReLU2000", 23.7),
    ("CLstm512P256 + Pooling + 3×ReLU2000", 23.8),
    ("2×(CLstm256 + Pooling) + 3×ReLU2000", 21.2),
    ("2×(CLstm384P256 + Pooling) + 3×ReLU2000", 22.3),
    ("CLstm256P128 + Pooling + Lstm2000P750 + 3×ReLU2000", 36.4),
    ("CLstm384P256 + Pooling + Lstm2000P750 + 3×ReLU2000", 44.9),
]


def test_c1_parameter_count_reproduction():
    start = time.time()
    worst = 0.0
    for arch, millions in REFERENCE_ROWS:
        spec = parse_arch(arch)  # defaults: 33x3 bands, ctx 5 for FFNNs, 5529 classes
        counted = count_params(spec)
        rel = abs(counted - millions * 1e6) / (millions * 1e6)
        worst = max(worst, rel)
        assert rel <= 0.03, "%s: counted %d vs %.1fM (%.2f%%)" % (
            arch, counted, millions, 100 * rel)
    elapsed = time.time() - start
    assert elapsed < 1.0, "counting took %.2fs" % elapsed
    report("1 parameter-count reproduction",
           "(18 rows, worst deviation %.2f%%, %.2fs)" % (100 * worst, elapsed))


# criterion 2 ---------------------------------------------------------------

GRADCHECK_FAMILIES = [
    ("RNN", "Rnn12"),
    ("LSTM", "Lstm10"),
    ("LSTMP", "Lstm12P6"),
    ("Conv+Pool", "Conv + Pooling"),
    ("CLstm", "CLstm8"),
    ("CLstmP+Pool", "CLstm10P5 + Pooling"),
    ("ReLU", "ReLU16"),
    ("Maxout", "Maxout8G3"),
    ("softmax", None),  # output layer only
]


def _toy_network(arch, seed):
    input_spec = InputSpec(num_bands=12, num_channels=2, context=0)
    geom = PatchGeometry(patch_size=4, patch_stride=2, pool_size=2, conv_units=6)
    if arch is None:
        spec = NetworkSpec(input=input_spec, layers=[], num_classes=5)
    else:
        spec = parse_arch(arch, input_spec=input_spec, num_classes=5)
    net = build(spec, seed=seed, geometry=geom)
    # generic parameter point: the training init (±0.05) leaves recurrent
    # gradients below finite-difference resolution at epsilon 1e-5
    randomize_params(net, seed=seed + 1000)
    return net, spec


def test_c2_gradient_verification():
    start = time.time()
    worst = 0.0
    for seed in (0, 1, 2):
        rng = np.random.default_rng(100 + seed)
        for family, arch in GRADCHECK_FAMILIES:
            net, spec = _toy_network(arch, seed)
            feats = rng.normal(size=(2, 6, spec.input.dim))
            targets = rng.integers(0, 5, size=(2, 6))
            batch = SubsequenceBatch(feats, targets, np.ones((2, 6), bool), [])
            rep = gradcheck(net, batch, epsilon=1e-5, samples_per_block=200,
                            seed=seed)
            for block in rep.blocks:
                assert block.checked >= min(200, 1e9) or block.checked > 0
            assert rep.max_rel_error < 1e-4, "%s seed %d: %.3e" % (
                family, seed, rep.max_rel_error)
            worst = max(worst, rep.max_rel_error)
    elapsed = time.time() - start
    assert elapsed < 120, "gradcheck took %.0fs" % elapsed
    report("2 gradient verification",
           "(9 families x 3 seeds, worst rel err %.2e, %.0fs)" % (worst, elapsed))


# criterion 3 ---------------------------------------------------------------

def test_c3_clstm_lstm_equivalence_oracle():
    start = time.time()
    rng = np.random.default_rng(42)
    dim = 18  # 9 positions x 2 channels
    layout = PatchLayout(num_positions=9, channels_per_position=2,
                         patch_size=9, stride=1)
    assert layout.num_patches == 1
    for trial in range(5):
        params = init_lstm_params(np.random.default_rng(trial), dim, 7)
        # transplanted parameters: the identical LstmParams object
        clstm = ClstmLayer("clstm", params, layout)
        lstm = LstmLayer("lstm", params)
        x = rng.normal(size=(1, 20, dim))
        out_c, _ = clstm.forward(x)
        out_l, _ = lstm.forward(x)
        assert out_c.tobytes() == out_l.tobytes(), "trial %d not bit-identical" % trial
    elapsed = time.time() - start
    assert elapsed < 10
    report("3 equivalence oracle", "(5 sequences of length 20, bit-identical)")


# criterion 4 ---------------------------------------------------------------

OVERFIT_SEED = 0
OVERFIT_TRAIN = TrainConfig(epochs=50, lr_init=2.0, lr_final=0.1,
                            label_delay=5, seed=OVERFIT_SEED)


def overfit_corpus(seed):
    config = SynthConfig(num_utterances=50, frames_per_utterance=100,
                         num_classes=10, shift_range=0, seed=seed)
    pairs, _ = generate_corpus(config)
    return pairs


def test_c4_overfit():
    start = time.time()
    pairs = overfit_corpus(OVERFIT_SEED)
    spec = parse_arch("CLstm32 + Pooling + ReLU64", num_classes=10)
    net = build(spec, seed=OVERFIT_SEED)
    metrics = train(net, pairs, OVERFIT_TRAIN)
    facc, ce, _ = evaluate(net, pairs, OVERFIT_TRAIN)
    elapsed = time.time() - start
    assert facc >= 0.99, "train frame accuracy %.4f" % facc
    assert ce < 0.05, "train CE %.4f" % ce
    assert elapsed < 600, "overfit run took %.0fs" % elapsed
    assert len(metrics) == 50
    report("4 overfit", "(facc %.4f, CE %.4f, %.0fs)" % (facc, ce, elapsed))


# criterion 5 ---------------------------------------------------------------

def test_c5_frequency_shift_generalization_trend():
    start = time.time()
    wins = 0
    details = []
    for seed in (0, 1, 2):
        corpus_cfg = SynthConfig(num_utterances=50, frames_per_utterance=100,
                                 num_classes=10, shift_range=4,
                                 disjoint_shifts=True, test_utterances=20,
                                 seed=seed)
        train_pairs, test_pairs = generate_corpus(corpus_cfg)
        accs = {}
        for arch in ("CLstm32 + Pooling + ReLU64", "Lstm48 + ReLU64"):
            spec = parse_arch(arch, num_classes=10)
            net = build(spec, seed=seed)
            config = TrainConfig(epochs=20, lr_init=2.0, lr_final=0.2,
                                 label_delay=5, seed=seed)
            train(net, train_pairs, config)
            accs[arch], _, _ = evaluate(net, test_pairs, config)
        clstm = accs["CLstm32 + Pooling + ReLU64"]
        lstm = accs["Lstm48 + ReLU64"]
        details.append("seed%d %.3f vs %.3f" % (seed, clstm, lstm))
        if clstm > lstm:
            wins += 1
    elapsed = time.time() - start
    assert wins >= 2, "CLSTM won only %d of 3 seeds (%s)" % (wins, "; ".join(details))
    assert elapsed < 1800, "trend check took %.0fs" % elapsed
    report("5 frequency-shift generalization trend",
           "(%d/3 seeds, %s, %.0fs)" % (wins, "; ".join(details), elapsed))


# criterion 6 ---------------------------------------------------------------

def test_c6_training_protocol_invariants():
    start = time.time()
    rng = np.random.default_rng(7)
    # subsequence loss windows partition [0, T) for 1000 random lengths
    for _ in range(1000):
        t = int(rng.integers(1, 400))
        covered = np.zeros(t, dtype=int)
        for s, e, loss_start in split_subsequences(t, 15, 5):
            covered[s + loss_start : e] += 1
        assert (covered == 1).all()
    # label delay masks exactly min(5, T) frames
    for _ in range(1000):
        t = int(rng.integers(1, 60))
        _, valid = delay_labels(rng.integers(0, 9, size=t), 5)
        assert (~valid).sum() == min(5, t)
    # clipped gradient norms never exceed the threshold
    for _ in range(1000):
        grads = [{"g": rng.normal(size=int(rng.integers(1, 40)))
                  * rng.uniform(0, 50)}]
        threshold = rng.uniform(0.01, 5.0)
        clip_gradients(grads, threshold)
        norm = np.sqrt(sum((a * a).sum() for g in grads for a in g.values()))
        assert norm <= threshold * (1 + 1e-12)
    # learning-rate schedule endpoints are exact
    for _ in range(100):
        lr_init = rng.uniform(1e-4, 1.0)
        lr_final = lr_init * rng.uniform(1e-4, 1.0)
        total = int(rng.integers(1, 10000))
        assert lr_schedule(0, total, lr_init, lr_final) == lr_init
        np.testing.assert_allclose(lr_schedule(total, total, lr_init, lr_final),
                                   lr_final, rtol=1e-12)
    elapsed = time.time() - start
    assert elapsed < 60
    report("6 training-protocol invariants", "(4000 random cases, %.1fs)" % elapsed)


# criterion 7 ---------------------------------------------------------------

def test_c7_determinism(tmp_path):
    start = time.time()
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--utterances", "10",
                 "--frames", "60", "--classes", "6", "--seed", "4"]) == 0
    outputs = []
    for name in ("run_a", "run_b"):
        run = tmp_path / name
        code = main(["train", "--arch", "CLstm8 + Pooling + ReLU16",
                     "--features", str(corpus / "train"),
                     "--alignments", str(corpus / "train.ali"),
                     "--out", str(run), "--classes", "6", "--epochs", "3",
                     "--lr-init", "0.5", "--lr-final", "0.1", "--seed", "21"])
        assert code == 0
        outputs.append((
            (run / "model.crnp").read_bytes(),
            (run / "metrics.log").read_bytes(),
        ))
    assert outputs[0][0] == outputs[1][0], "checkpoints differ"
    assert outputs[0][1] == outputs[1][1], "metrics logs differ"
    elapsed = time.time() - start
    assert elapsed < 300
    report("7 determinism", "(bit-identical checkpoint and log, %.0fs)" % elapsed)
