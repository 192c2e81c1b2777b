"""Synthetic spectro-temporal classification corpus.

Each class is a band-limited pattern defined by shift-invariant properties:
bump width, the offset of an optional second bump, and a temporal amplitude
modulation rate.  Every utterance applies one random whole-utterance
frequency shift to all of its patterns, so a model that shares weights along
frequency can recognize a class at band positions it never saw in training.
Train and test shift sets can be made disjoint (train = even shifts, test =
odd) to probe exactly that.
"""

from dataclasses import dataclass

import numpy as np

from .features import FeatureSequence, AlignmentSequence, append_deltas, normalize


@dataclass
class SynthConfig:
    num_utterances: int = 50
    frames_per_utterance: int = 100
    num_classes: int = 10
    shift_range: int = 0           # utterance shifts drawn from [-S, S]
    disjoint_shifts: bool = False  # train: even shifts, test: odd shifts
    test_utterances: int = 0
    num_bands: int = 33
    segment_min: int = 8
    segment_max: int = 20
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.num_utterances < 1:
            raise ValueError("need at least one class and one utterance")
        if self.disjoint_shifts and self.shift_range < 1:
            raise ValueError("disjoint shifts need shift_range >= 1")
        if not (1 <= self.segment_min <= self.segment_max):
            raise ValueError("bad segment length range")


# property grids; a class is one (width, chord offset, modulation rate) triple
_WIDTHS = (1, 2)
_CHORDS = (0, 3, 5)
_RATES = (0.08, 0.2, 0.33)


def class_patterns(num_classes, num_bands, shift_range=0):
    """Deterministic class table: (base band, width, chord offset, rate).

    Base positions keep every shifted pattern inside [1, num_bands), leaving
    band 0 (the energy coefficient's slot) as background.
    """
    combos = [(w, d, r) for w in _WIDTHS for d in _CHORDS for r in _RATES]
    if num_classes > len(combos):
        raise ValueError("at most %d distinguishable classes" % len(combos))
    extent = max(_CHORDS) + max(_WIDTHS)
    lo = shift_range + 1
    hi = num_bands - extent - shift_range
    if hi - lo < num_classes:
        raise ValueError("too few bands for %d classes with shifts ±%d"
                         % (num_classes, shift_range))
    table = []
    for k in range(num_classes):
        width, chord, rate = combos[k]
        base = lo + (k * (hi - lo)) // num_classes
        table.append((base, width, chord, rate))
    return table


def _shift_sets(config):
    shifts = np.arange(-config.shift_range, config.shift_range + 1)
    if not config.disjoint_shifts:
        return shifts, shifts
    train = shifts[shifts % 2 == 0]
    test = shifts[shifts % 2 != 0]
    return train, test


def _render_utterance(rng, config, patterns, shifts, uid):
    t_total = config.frames_per_utterance
    f = config.num_bands
    static = rng.normal(0.0, config.noise_level, size=(t_total, f))
    labels = np.empty(t_total, dtype=np.int64)
    shift = int(rng.choice(shifts))

    deck = []
    t = 0
    while t < t_total:
        if not deck:
            deck = list(rng.permutation(config.num_classes))
        k = int(deck.pop())
        seg_len = int(rng.integers(config.segment_min, config.segment_max + 1))
        seg_len = min(seg_len, t_total - t)
        base, width, chord, rate = patterns[k]
        pos = base + shift
        times = np.arange(seg_len)
        amp = 1.0 + 0.8 * np.sin(2.0 * np.pi * rate * times)
        static[t : t + seg_len, pos : pos + width] += amp[:, None]
        if chord:
            static[t : t + seg_len, pos + chord : pos + chord + width] += amp[:, None]
        labels[t : t + seg_len] = k
        t += seg_len

    feats = FeatureSequence(
        utterance_id=uid,
        frames=append_deltas(static),
        num_bands=f,
        num_channels=3,
    )
    feats = normalize(feats)
    ali = AlignmentSequence(uid, labels, config.num_classes)
    return feats, ali, shift


def generate_corpus(config):
    """Build (train pairs, test pairs) of (FeatureSequence, AlignmentSequence).

    All randomness flows from config.seed; identical configs produce
    bit-identical corpora.
    """
    rng = np.random.default_rng(config.seed)
    patterns = class_patterns(config.num_classes, config.num_bands,
                              config.shift_range)
    train_shifts, test_shifts = _shift_sets(config)
    train = []
    for i in range(config.num_utterances):
        feats, ali, _ = _render_utterance(rng, config, patterns, train_shifts,
                                          "train_%04d" % i)
        train.append((feats, ali))
    test = []
    for i in range(config.test_utterances):
        feats, ali, _ = _render_utterance(rng, config, patterns, test_shifts,
                                          "test_%04d" % i)
        test.append((feats, ali))
    return train, test
