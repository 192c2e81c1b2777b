"""Mel log-filterbank front end.

Turns raw mono speech into per-utterance feature matrices: 25 ms Hamming
frames, a log total-energy coefficient plus triangular mel-filter log
energies, first/second temporal derivatives, per-utterance normalization,
and optional frame context windows.  Static coefficients are laid out with
the energy value as band 0 and the mel bands above it; the derivative
channels follow the static block column-wise (static | delta | delta-delta).
"""

import struct
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8
DELTA_WINDOW = 2

FEATURE_MAGIC = b"CRNF"
FEATURE_VERSION = 1


class FeatureFormatError(Exception):
    """Raised for malformed feature files (bad magic, truncation, bad dims)."""


@dataclass
class WaveUtterance:
    """A mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int
    utterance_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass
class FeatureSequence:
    """T x D feature matrix with D = num_bands * num_channels.

    `layout` records the column ordering: "channel-major" means the D columns
    are the static block, then the delta block, then the delta-delta block,
    with band index ascending inside each block (band b, channel c sits at
    column c * num_bands + b).
    """

    utterance_id: str
    frames: np.ndarray
    num_bands: int
    num_channels: int
    layout: str = "channel-major"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")
        if self.frames.shape[1] != self.num_bands * self.num_channels:
            raise ValueError(
                "feature dim %d != num_bands %d * num_channels %d"
                % (self.frames.shape[1], self.num_bands, self.num_channels)
            )
        if not np.isfinite(self.frames).all():
            raise ValueError("features contain non-finite values")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class AlignmentSequence:
    """Per-frame integer class labels for one utterance."""

    utterance_id: str
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be a 1-D sequence")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("labels out of range [0, %d)" % self.num_classes)


def frame_signal(wave, frame_len_ms=25.0, frame_shift_ms=10.0):
    """Slice a waveform into Hamming-windowed frames.

    Returns a T x frame_len array with T = (N - frame_len) // frame_shift + 1.
    Raises ValueError when the utterance is shorter than one frame.
    """
    if frame_shift_ms <= 0 or frame_len_ms < frame_shift_ms:
        raise ValueError("need frame_len_ms >= frame_shift_ms > 0")
    frame_len = int(round(wave.sample_rate * frame_len_ms / 1000.0))
    frame_shift = int(round(wave.sample_rate * frame_shift_ms / 1000.0))
    n = wave.samples.shape[0]
    if n < frame_len:
        raise ValueError(
            "utterance %r has %d samples, shorter than one %d-sample frame"
            % (wave.utterance_id, n, frame_len)
        )
    num_frames = (n - frame_len) // frame_shift + 1
    window = np.hamming(frame_len)
    frames = np.empty((num_frames, frame_len), dtype=np.float64)
    for t in range(num_frames):
        start = t * frame_shift
        frames[t] = wave.samples[start : start + frame_len] * window
    return frames


def power_spectrum(frames):
    """Magnitude-squared DFT of each frame, zero-padded to the next power of two."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    nfft = 1
    while nfft < frames.shape[1]:
        nfft *= 2
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    return (spec.real**2 + spec.imag**2) / nfft


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_matrix(num_mel, num_bins, sample_rate):
    """Triangular mel filters (HTK spacing, 0 Hz to Nyquist) on rfft bins.

    Returns a num_mel x num_bins weight matrix; each filter peaks at 1.
    """
    nyquist = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, mel_scale(nyquist), num_mel + 2))
    # num_bins = nfft//2 + 1 rfft bins covering [0, nyquist]
    bin_hz = np.linspace(0.0, nyquist, num_bins)
    weights = np.zeros((num_mel, num_bins), dtype=np.float64)
    for k in range(num_mel):
        lo, mid, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        rising = (bin_hz - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - mid, 1e-12)
        weights[k] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return weights


def mel_filterbank(frame_spectrum, num_mel, sample_rate):
    """Log mel-filter energies plus a log total-energy coefficient.

    Input is a power spectrum (one frame or T frames).  The output has
    num_mel + 1 static coefficients per frame; column 0 is the log frame
    energy, columns 1..num_mel are the log mel energies.  Energies are
    floored at LOG_FLOOR before the log so silent frames stay finite.
    """
    if num_mel < 1:
        raise ValueError("num_mel must be >= 1")
    frame_spectrum = np.asarray(frame_spectrum, dtype=np.float64)
    spec = np.atleast_2d(frame_spectrum)
    filters = mel_filter_matrix(num_mel, spec.shape[1], sample_rate)
    mel_energy = spec @ filters.T
    total_energy = spec.sum(axis=1)
    out = np.empty((spec.shape[0], num_mel + 1), dtype=np.float64)
    out[:, 0] = np.log(np.maximum(total_energy, LOG_FLOOR))
    out[:, 1:] = np.log(np.maximum(mel_energy, LOG_FLOOR))
    if frame_spectrum.ndim == 1:
        return out[0]
    return out


def _delta(static):
    # regression slope over +-DELTA_WINDOW frames, edge replication
    denom = 2.0 * sum(n * n for n in range(1, DELTA_WINDOW + 1))
    padded = np.pad(static, ((DELTA_WINDOW, DELTA_WINDOW), (0, 0)), mode="edge")
    t = static.shape[0]
    acc = np.zeros_like(static, dtype=np.float64)
    for n in range(1, DELTA_WINDOW + 1):
        acc += n * (
            padded[DELTA_WINDOW + n : DELTA_WINDOW + n + t]
            - padded[DELTA_WINDOW - n : DELTA_WINDOW - n + t]
        )
    return acc / denom


def append_deltas(static):
    """Append first and second temporal derivatives: T x F -> T x 3F."""
    static = np.asarray(static, dtype=np.float64)
    if static.ndim != 2 or static.shape[0] < 1:
        raise ValueError("static features must be a non-empty T x F matrix")
    d1 = _delta(static)
    d2 = _delta(d1)
    return np.concatenate([static, d1, d2], axis=1)


def normalize(features):
    """Per-utterance, per-dimension zero mean / unit variance (floored)."""
    frames = features.frames.astype(np.float64)
    mean = frames.mean(axis=0)
    var = frames.var(axis=0)
    std = np.sqrt(np.maximum(var, VAR_FLOOR))
    return FeatureSequence(
        utterance_id=features.utterance_id,
        frames=(frames - mean) / std,
        num_bands=features.num_bands,
        num_channels=features.num_channels,
        layout=features.layout,
    )


def context_window(frames, left, right):
    """Concatenate each frame with its neighbours, edge-replicated.

    T x D -> T x D*(left+right+1); the block order is t-left .. t+right, so
    the middle block of row t is row t of the input.
    """
    if left < 0 or right < 0:
        raise ValueError("context sizes must be >= 0")
    frames = np.asarray(frames)
    if left == 0 and right == 0:
        return frames.copy()
    padded = np.pad(frames, ((left, right), (0, 0)), mode="edge")
    t = frames.shape[0]
    blocks = [padded[off : off + t] for off in range(left + right + 1)]
    return np.concatenate(blocks, axis=1)


def extract_features(wave, num_mel=32, frame_len_ms=25.0, frame_shift_ms=10.0,
                     do_normalize=True):
    """Full front end: wave -> normalized static+delta FeatureSequence."""
    frames = frame_signal(wave, frame_len_ms, frame_shift_ms)
    spec = power_spectrum(frames)
    static = mel_filterbank(spec, num_mel, wave.sample_rate)
    full = append_deltas(static)
    feats = FeatureSequence(
        utterance_id=wave.utterance_id,
        frames=full,
        num_bands=num_mel + 1,
        num_channels=3,
    )
    if do_normalize:
        feats = normalize(feats)
    return feats


def write_features(path, features):
    """Binary feature file, little-endian.

    Layout: magic "CRNF", u32 version, u32 T, u32 D, u32 F, u32 C,
    T*D float32 row-major, u32 id length, UTF-8 utterance id.
    """
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    uid = features.utterance_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(
            struct.pack(
                "<5I",
                FEATURE_VERSION,
                frames.shape[0],
                frames.shape[1],
                features.num_bands,
                features.num_channels,
            )
        )
        fh.write(frames.tobytes())
        fh.write(struct.pack("<I", len(uid)))
        fh.write(uid)


def read_features(path):
    """Read a feature file written by write_features; round-trip is bit-exact."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureFormatError("%s: bad magic %r" % (path, magic))
        header = fh.read(20)
        if len(header) != 20:
            raise FeatureFormatError("%s: truncated header" % path)
        version, t, d, f, c = struct.unpack("<5I", header)
        if version != FEATURE_VERSION:
            raise FeatureFormatError("%s: unsupported version %d" % (path, version))
        if d != f * c:
            raise FeatureFormatError(
                "%s: dim %d inconsistent with %d bands x %d channels" % (path, d, f, c)
            )
        payload = fh.read(t * d * 4)
        if len(payload) != t * d * 4:
            raise FeatureFormatError(
                "%s: truncated payload (%d of %d bytes)" % (path, len(payload), t * d * 4)
            )
        frames = np.frombuffer(payload, dtype="<f4").reshape(t, d)
        id_len_raw = fh.read(4)
        if len(id_len_raw) != 4:
            raise FeatureFormatError("%s: missing utterance id" % path)
        (id_len,) = struct.unpack("<I", id_len_raw)
        uid_raw = fh.read(id_len)
        if len(uid_raw) != id_len:
            raise FeatureFormatError("%s: truncated utterance id" % path)
    return FeatureSequence(
        utterance_id=uid_raw.decode("utf-8"),
        frames=frames,
        num_bands=f,
        num_channels=c,
    )


def write_alignments(path, alignments):
    """Text alignment file: one `utt_id label_0 ... label_{T-1}` line per utterance."""
    with open(path, "w", encoding="utf-8") as fh:
        for ali in alignments:
            fh.write(ali.utterance_id)
            for label in ali.labels:
                fh.write(" %d" % label)
            fh.write("\n")


def read_alignments(path, num_classes):
    """Parse an alignment file into AlignmentSequence objects."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                labels = [int(p) for p in parts[1:]]
            except ValueError:
                raise FeatureFormatError(
                    "%s:%d: non-integer label" % (path, lineno)
                ) from None
            out.append(AlignmentSequence(parts[0], np.array(labels), num_classes))
    return out
