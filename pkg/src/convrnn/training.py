"""Truncated-BPTT training protocol, gradient checking, and evaluation.

Utterances are cut into fixed-length subsequences whose leading overlap
frames only warm up the recurrent state (loss-masked), so every frame of an
utterance contributes to the loss exactly once.  Targets are the frame
labels delayed by a few frames, batches mix subsequences from distinct
utterances, gradients are globally norm-scaled, and the learning rate decays
exponentially from lr_init to lr_final over the planned step budget.
"""

from dataclasses import dataclass, field

import numpy as np

from .features import context_window

POSTERIOR_FLOOR = 1e-10


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = "%s (step %d)" % (message, step)
        super().__init__(message)


@dataclass
class TrainConfig:
    subseq_len: int = 15
    overlap: int = 5
    batch_size: int = 20
    label_delay: int = 5
    clip_threshold: float = 1.0
    lr_init: float = 0.04
    lr_final: float = 0.0004
    epochs: int = 1
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if not (0 <= self.overlap < self.subseq_len):
            raise ValueError("need 0 <= overlap < subseq_len")
        if self.label_delay < 0:
            raise ValueError("label_delay must be >= 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.lr_init == 0:
            # lr 0 freezes the parameters (useful for dry runs)
            self.lr_final = 0.0
        elif self.lr_init < 0 or self.lr_final <= 0 or self.lr_final > self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init (or lr_init == 0)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class OptimizerState:
    step: int = 0
    total_steps: int = 0
    learning_rate: float = 0.0


@dataclass
class SubsequenceBatch:
    features: np.ndarray   # (B, L, D) float64, zero-padded past short rows
    targets: np.ndarray    # (B, L) int64, delayed labels
    loss_mask: np.ndarray  # (B, L) bool
    provenance: list       # (utterance_id, start_frame) per row


def split_subsequences(total_frames, subseq_len, overlap):
    """Slice [0, T) into training windows.

    Returns (start, end, loss_start) triples: the subsequence covers
    [start, end) and its frames before start+loss_start are state warm-up
    only.  The final subsequence is right-aligned (never padded), and the
    loss windows partition [0, T) exactly.
    """
    if not (0 <= overlap < subseq_len):
        raise ValueError("need 0 <= overlap < subseq_len")
    if total_frames < 1:
        raise ValueError("empty utterance")
    if total_frames <= subseq_len:
        return [(0, total_frames, 0)]
    stride = subseq_len - overlap
    starts = []
    s = 0
    while s + subseq_len < total_frames:
        starts.append(s)
        s += stride
    starts.append(total_frames - subseq_len)
    slices = []
    covered = 0
    for s in starts:
        slices.append((s, s + subseq_len, covered - s))
        covered = s + subseq_len
    return slices


def delay_labels(labels, delay):
    """Shift targets so frame t is labelled with label[t - delay].

    Returns (targets, valid_mask); the first min(delay, T) frames are masked.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if delay < 0:
        raise ValueError("delay must be >= 0")
    t = labels.shape[0]
    targets = np.zeros(t, dtype=np.int64)
    valid = np.zeros(t, dtype=bool)
    if delay < t:
        targets[delay:] = labels[: t - delay]
        valid[delay:] = True
    return targets, valid


def cross_entropy(posteriors, targets, mask):
    """Mean negative log posterior of the target over unmasked frames.

    Returns (loss, frame count).  Raises ValueError when nothing is unmasked.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no unmasked frames in batch")
    picked = np.take_along_axis(
        np.asarray(posteriors), np.asarray(targets)[..., None], axis=-1
    )[..., 0]
    logs = np.log(np.maximum(picked, POSTERIOR_FLOOR))
    return float(-(logs * mask).sum() / count), count


def cross_entropy_grad(posteriors, targets, mask):
    """Gradient of the mean cross-entropy w.r.t. the pre-softmax logits."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no unmasked frames in batch")
    dlogits = np.array(posteriors, dtype=np.float64)
    np.subtract.at(dlogits, (*np.nonzero(mask), targets[mask]), 1.0)
    dlogits *= mask[..., None] / count
    return dlogits


def grad_global_norm(grads):
    total = 0.0
    for g in grads:
        for arr in g.values():
            total += float((arr * arr).sum())
    return np.sqrt(total)


def clip_gradients(grads, threshold, step=None):
    """Scale all gradients by threshold/norm when the global L2 norm exceeds it.

    Operates in place on the per-layer grad dicts; returns the pre-scaling
    norm.  Non-finite gradients raise DivergenceError.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = grad_global_norm(grads)
    if not np.isfinite(norm):
        raise DivergenceError("non-finite gradient norm", step=step)
    if norm > threshold:
        scale = threshold / norm
        for g in grads:
            for arr in g.values():
                arr *= scale
    return norm


def lr_schedule(step, total_steps, lr_init, lr_final):
    """Exponential decay from lr_init (step 0) to lr_final (step total_steps)."""
    if lr_init == 0:
        return 0.0
    if total_steps <= 0:
        return lr_init
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_init * (lr_final / lr_init) ** frac


def sgd_step(network, grads, lr):
    network.apply_sgd(grads, lr)


# ---------------------------------------------------------------------------
# corpus handling


@dataclass
class Utterance:
    """One training example: features (already context-windowed if needed),
    delayed targets, and the per-frame validity mask."""

    utterance_id: str
    frames: np.ndarray
    targets: np.ndarray
    valid: np.ndarray


def prepare_corpus(pairs, input_spec, label_delay):
    """Pair up features and alignments for a network's input interface.

    `pairs` holds (FeatureSequence, AlignmentSequence) tuples.  Context
    windows are applied per utterance (edge-replicated at utterance
    boundaries), and labels are delayed here so every consumer sees the
    same targets.
    """
    out = []
    for feats, ali in pairs:
        if feats.num_frames != ali.labels.shape[0]:
            raise ValueError(
                "utterance %r: %d frames but %d labels"
                % (feats.utterance_id, feats.num_frames, ali.labels.shape[0]))
        frames = feats.frames.astype(np.float64)
        if input_spec.context > 0:
            frames = context_window(frames, input_spec.context, input_spec.context)
        if frames.shape[1] != input_spec.dim:
            raise ValueError(
                "utterance %r: feature dim %d != network input dim %d"
                % (feats.utterance_id, frames.shape[1], input_spec.dim))
        targets, valid = delay_labels(ali.labels, label_delay)
        out.append(Utterance(feats.utterance_id, frames, targets, valid))
    return out


def _subsequence_stream(utterances, config, rng=None):
    """Round-robin over utterances, one subsequence at a time.

    With a rng the utterance order is shuffled first.  Rows of a batch come
    from distinct utterances whenever enough utterances still have pending
    subsequences.
    """
    order = list(range(len(utterances)))
    if rng is not None:
        rng.shuffle(order)
    queues = []
    for idx in order:
        utt = utterances[idx]
        slices = split_subsequences(utt.frames.shape[0], config.subseq_len,
                                    config.overlap)
        queues.append((idx, list(slices)))
    stream = []
    while queues:
        remaining = []
        for idx, slices in queues:
            stream.append((idx, slices.pop(0)))
            if slices:
                remaining.append((idx, slices))
        queues = remaining
    return stream


def num_batches(utterances, config):
    total = sum(
        len(split_subsequences(u.frames.shape[0], config.subseq_len, config.overlap))
        for u in utterances)
    return -(-total // config.batch_size)


def make_batches(utterances, config, rng=None):
    """Yield SubsequenceBatch objects covering every subsequence once."""
    stream = _subsequence_stream(utterances, config, rng)
    dim = utterances[0].frames.shape[1]
    length = config.subseq_len
    for lo in range(0, len(stream), config.batch_size):
        chunk = stream[lo : lo + config.batch_size]
        b = len(chunk)
        feats = np.zeros((b, length, dim))
        targets = np.zeros((b, length), dtype=np.int64)
        mask = np.zeros((b, length), dtype=bool)
        provenance = []
        for row, (idx, (start, end, loss_start)) in enumerate(chunk):
            utt = utterances[idx]
            n = end - start
            feats[row, :n] = utt.frames[start:end]
            targets[row, :n] = utt.targets[start:end]
            mask[row, :n] = utt.valid[start:end]
            mask[row, :loss_start] = False  # warm-up frames
            provenance.append((utt.utterance_id, start))
        yield SubsequenceBatch(feats, targets, mask, provenance)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    train_ce: float
    valid_ce: float
    valid_facc: float
    learning_rate: float

    def format_line(self):
        return "%d %.6f %.6f %.6f %.8g" % (
            self.epoch, self.train_ce, self.valid_ce, self.valid_facc,
            self.learning_rate)


def train(network, corpus, config, val_corpus=None, log=None):
    """Minibatch SGD over the corpus; returns the per-epoch metrics list.

    `corpus` and `val_corpus` are lists of (FeatureSequence,
    AlignmentSequence) pairs; validation falls back to the training corpus
    when absent.  The network is updated in place.  `log` is an optional
    callable receiving each formatted metrics line.
    """
    utterances = prepare_corpus(corpus, network.spec.input, config.label_delay)
    if not utterances:
        raise ValueError("empty training corpus")
    val_utts = (prepare_corpus(val_corpus, network.spec.input, config.label_delay)
                if val_corpus else utterances)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = num_batches(utterances, config)
    state = OptimizerState(step=0, total_steps=config.epochs * steps_per_epoch,
                           learning_rate=config.lr_init)
    metrics = []
    for epoch in range(config.epochs):
        total_loss = 0.0
        total_frames = 0
        for batch in make_batches(utterances, config, rng):
            posteriors, tapes = network.forward(batch.features)
            loss, count = cross_entropy(posteriors, batch.targets, batch.loss_mask)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite training loss", step=state.step)
            dlogits = cross_entropy_grad(posteriors, batch.targets, batch.loss_mask)
            grads = network.backward(tapes, dlogits)
            clip_gradients(grads, config.clip_threshold, step=state.step)
            state.learning_rate = lr_schedule(state.step, state.total_steps,
                                              config.lr_init, config.lr_final)
            sgd_step(network, grads, state.learning_rate)
            state.step += 1
            total_loss += loss * count
            total_frames += count
        valid_facc, valid_ce, _ = evaluate_prepared(network, val_utts, config)
        entry = EpochMetrics(epoch=epoch,
                             train_ce=total_loss / max(total_frames, 1),
                             valid_ce=valid_ce, valid_facc=valid_facc,
                             learning_rate=state.learning_rate)
        metrics.append(entry)
        if log is not None:
            log(entry.format_line())
    return metrics


def evaluate_prepared(network, utterances, config):
    """Frame accuracy and mean CE under the training-time subsequence protocol.

    Ties in the posterior argmax resolve to the lowest class index.  Returns
    (frame accuracy, mean cross-entropy, frames counted).
    """
    if not utterances:
        return 0.0, 0.0, 0
    correct = 0
    total = 0
    loss_sum = 0.0
    for batch in make_batches(utterances, config, rng=None):
        posteriors, _ = network.forward(batch.features)
        mask = batch.loss_mask
        if not mask.any():
            continue
        loss, count = cross_entropy(posteriors, batch.targets, mask)
        loss_sum += loss * count
        total += count
        pred = posteriors.argmax(axis=-1)
        correct += int(((pred == batch.targets) & mask).sum())
    if total == 0:
        return 0.0, 0.0, 0
    return correct / total, loss_sum / total, total


def evaluate(network, corpus, config=None):
    """Evaluate on (FeatureSequence, AlignmentSequence) pairs."""
    config = config or TrainConfig()
    utterances = prepare_corpus(corpus, network.spec.input, config.label_delay)
    return evaluate_prepared(network, utterances, config)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class BlockReport:
    block: str
    checked: int
    max_rel_error: float
    max_abs_analytic: float


@dataclass
class GradcheckReport:
    blocks: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    def passed(self, tolerance):
        return self.max_rel_error < tolerance

    def format_lines(self):
        lines = ["%-40s n=%-5d max_rel_err=%.3e"
                 % (b.block, b.checked, b.max_rel_error) for b in self.blocks]
        lines.append("overall max relative error: %.3e" % self.max_rel_error)
        return lines


def gradcheck(network, batch, epsilon=1e-5, samples_per_block=200, seed=0):
    """Compare analytic gradients against central finite differences.

    For each parameter block, up to samples_per_block entries (all of them
    for small blocks) are perturbed by ±epsilon and the cross-entropy loss
    difference quotient is compared with the backward-pass gradient using
    relative error |ga - gn| / max(|ga|, |gn|, 1e-8).
    """
    blocks = network.param_blocks()
    if not blocks:
        return GradcheckReport()

    def loss_fn():
        posteriors, _ = network.forward(batch.features)
        loss, _ = cross_entropy(posteriors, batch.targets, batch.loss_mask)
        return loss

    posteriors, tapes = network.forward(batch.features)
    dlogits = cross_entropy_grad(posteriors, batch.targets, batch.loss_mask)
    grads = network.backward(tapes, dlogits)
    grad_arrays = network.grad_blocks(grads)
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for (name, arr), ga in zip(blocks, grad_arrays):
        flat = arr.reshape(-1)
        ga_flat = ga.reshape(-1)
        if flat.size <= samples_per_block:
            indices = np.arange(flat.size)
        else:
            indices = rng.choice(flat.size, size=samples_per_block, replace=False)
        worst = 0.0
        for i in indices:
            keep = flat[i]
            flat[i] = keep + epsilon
            up = loss_fn()
            flat[i] = keep - epsilon
            down = loss_fn()
            flat[i] = keep
            numeric = (up - down) / (2.0 * epsilon)
            analytic = ga_flat[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.blocks.append(BlockReport(
            block=name, checked=len(indices), max_rel_error=worst,
            max_abs_analytic=float(np.abs(ga_flat).max(initial=0.0))))
    return report
