"""ADAM, losses and the BPTT training loops for the three experiment types."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import cells
from . import tensor as T
from .errors import DataError, DimensionError, TrainingDiverged
from .tasks import (LOGIC_VOCAB, LabeledSequence, LogicDatasets, LogicFormula, TextCorpus,
                    formula_ids)
from .tensor import Tensor, cross_entropy

# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    """Moment buffers and hyperparameters; ``beta1=0`` disables momentum."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    alpha: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: parameter, gradient and buffer counts differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} for parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.alpha * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def clip_by_global_norm(grads: list[np.ndarray | None], threshold: float) -> list[np.ndarray | None]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if norm <= threshold or norm == 0.0:
        return grads
    factor = threshold / norm
    return [None if g is None else g * factor for g in grads]


def perplexity(total_nll: float, token_count: int) -> float:
    """``exp`` of the mean per-token negative log-likelihood (natural log)."""
    if token_count <= 0:
        raise ValueError("perplexity needs a positive token count")
    return math.exp(total_nll / token_count)


# ---------------------------------------------------------------------------
# configuration, model pieces and metrics


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int | None = None     # mini-batches; None means once per epoch
    clip: float | None = None         # global-norm threshold
    truncation: int = 35              # BPTT window (language modelling only)
    max_steps: int | None = None

    def rngs(self):
        init, shuffle = np.random.SeedSequence(self.seed).spawn(2)
        return np.random.default_rng(init), np.random.default_rng(shuffle)


@dataclass
class ClassifierHead:
    W_c: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, num_classes: int, state_size: int, rng: np.random.Generator) -> "ClassifierHead":
        limit = math.sqrt(6.0 / (num_classes + state_size))
        return cls(T.parameter(rng.uniform(-limit, limit, (num_classes, state_size)), "W_c"),
                   T.parameter(np.zeros(num_classes), "b_c"))

    def __call__(self, h: Tensor) -> Tensor:
        return T.add(T.matmul(h, T.transpose(self.W_c)), self.b_c)

    def named_tensors(self):
        return [("W_c", self.W_c), ("b_c", self.b_c)]


@dataclass
class InputEncoder:
    """Maps a column of token ids to cell inputs: one-hot, or a trainable embedding."""

    vocab_size: int
    table: Tensor | None = None

    @classmethod
    def embedding(cls, vocab_size: int, dim: int, rng: np.random.Generator,
                  scale: float = 0.05) -> "InputEncoder":
        return cls(vocab_size, T.parameter(rng.uniform(-scale, scale, (vocab_size, dim)), "embedding"))

    @property
    def size(self) -> int:
        return self.vocab_size if self.table is None else self.table.shape[1]

    def __call__(self, ids: np.ndarray) -> Tensor:
        if self.table is not None:
            return T.embedding(self.table, ids)
        out = np.zeros((len(ids), self.vocab_size))
        out[np.arange(len(ids)), ids] = 1.0
        return T.constant(out)

    def named_tensors(self):
        return [] if self.table is None else [("embedding", self.table)]


def model_tensors(params, head=None, encoder=None) -> list[tuple[str, Tensor]]:
    named = list(params.named_tensors())
    if head is not None:
        named += head.named_tensors()
    if encoder is not None:
        named += encoder.named_tensors()
    return named


class MetricsLog:
    """Evaluation events, written as ``step,epoch,split,loss,metric`` CSV."""

    columns = ("step", "epoch", "split", "loss", "metric")

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, step: int, epoch: int, split: str, loss: float, metric: float) -> None:
        self.rows.append((step, epoch, split, float(loss), float(metric)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for step, epoch, split, loss, metric in self.rows:
            writer.writerow((step, epoch, split, repr(loss), repr(metric)))
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _gradients(named: list[tuple[str, Tensor]], clip: float | None):
    grads = [t.grad for _, t in named]
    if clip is not None:
        grads = clip_by_global_norm(grads, clip)
    return grads


def _snapshot(named):
    return [t.data.copy() for _, t in named]


def _restore(named, snapshot):
    for (_, t), saved in zip(named, snapshot):
        t.data[...] = saved


# ---------------------------------------------------------------------------
# sequence classification


def _as_pairs(data) -> list[tuple[np.ndarray, int]]:
    pairs = []
    for item in data:
        if isinstance(item, LabeledSequence):
            pairs.append((np.asarray(item.ids, dtype=np.int64), int(item.label)))
        elif isinstance(item, LogicFormula):
            pairs.append((formula_ids(item), int(item.label)))
        else:
            ids, label = item
            pairs.append((np.asarray(ids, dtype=np.int64), int(label)))
    for ids, _ in pairs:
        if len(ids) == 0:
            raise DataError("empty token sequence")
    return pairs


def make_batches(lengths: Sequence[int], batch_size: int,
                 rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Index batches of similar length; shuffled within lengths and in order when ``rng`` is given."""
    lengths = np.asarray(lengths)
    order = np.arange(len(lengths)) if rng is None else rng.permutation(len(lengths))
    order = order[np.argsort(lengths[order], kind="stable")]
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _pad(pairs, idx):
    lengths = np.array([len(pairs[i][0]) for i in idx])
    ids = np.zeros((len(idx), lengths.max()), dtype=np.int64)
    for row, i in enumerate(idx):
        ids[row, :lengths[row]] = pairs[i][0]
    labels = np.array([pairs[i][1] for i in idx], dtype=np.int64)
    return ids, lengths, labels


def final_states(params, encoder: InputEncoder, ids: np.ndarray, lengths: np.ndarray,
                 record_weights: bool = False) -> cells.Unrolled:
    """Unroll a padded batch; the last state of each row is its true final state."""
    xs = [encoder(ids[:, t]) for t in range(ids.shape[1])]
    masks = [(t < lengths)[:, None] for t in range(ids.shape[1])]
    return cells.unroll(params, xs, masks=masks, record_weights=record_weights)


def _batch_loss(params, head, encoder, ids, lengths, labels):
    h = final_states(params, encoder, ids, lengths).states[-1]
    logits = head(h)
    return cross_entropy(logits, labels), logits.data


def evaluate_classifier(params, head, encoder, data, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy, reduced in a fixed order."""
    pairs = _as_pairs(data)
    if not pairs:
        raise ValueError("cannot evaluate on an empty dataset")
    nll, correct = 0.0, 0
    with T.no_grad():
        for idx in make_batches([len(p[0]) for p in pairs], batch_size):
            ids, lengths, labels = _pad(pairs, idx)
            loss, logits = _batch_loss(params, head, encoder, ids, lengths, labels)
            nll += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return nll / len(pairs), correct / len(pairs)


@dataclass
class ClassifierResult:
    history: list[tuple[int, float, float]]
    best_dev_accuracy: float
    best_step: int
    steps: int
    log: MetricsLog


def train_classifier(params, head: ClassifierHead, train, dev, cfg: TrainConfig,
                     encoder: InputEncoder, extra_eval: dict | None = None,
                     log: MetricsLog | None = None) -> ClassifierResult:
    """Mini-batch ADAM on final-state cross-entropy with best-dev model selection.

    Dev accuracy is measured every ``cfg.eval_every`` mini-batches (and after the
    last one); on return the parameters hold the best-dev snapshot, with ties
    in accuracy resolved by the lower dev loss.
    ``extra_eval`` maps split names to datasets that are scored at the same events.
    """
    pairs = _as_pairs(train)
    dev_pairs = _as_pairs(dev)
    if not pairs or not dev_pairs:
        raise ValueError("train_classifier needs non-empty train and dev sets")
    log = log if log is not None else MetricsLog()
    named = model_tensors(params, head, encoder)
    tensors = [t for _, t in named]
    state = AdamState.for_params(tensors, alpha=cfg.learning_rate)
    _, shuffle_rng = cfg.rngs()
    lengths = [len(p[0]) for p in pairs]
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    eval_every = cfg.eval_every or per_epoch

    history: list[tuple[int, float, float]] = []
    best_acc, best_loss, best_step, best = -1.0, math.inf, 0, _snapshot(named)
    step, run_loss, run_correct, run_count, run_batches = 0, 0.0, 0, 0, 0

    def evaluate(epoch):
        nonlocal best_acc, best_loss, best_step, best, run_loss, run_correct, run_count, run_batches
        dev_loss, dev_acc = evaluate_classifier(params, head, encoder, dev_pairs)
        train_loss = run_loss / max(run_batches, 1)
        log.add(step, epoch, "train", train_loss, run_correct / max(run_count, 1))
        log.add(step, epoch, "dev", dev_loss, dev_acc)
        for split, data in (extra_eval or {}).items():
            log.add(step, epoch, split, *evaluate_classifier(params, head, encoder, data))
        history.append((step, train_loss, dev_acc))
        # ties on accuracy go to the lower dev loss
        if dev_acc > best_acc or (dev_acc == best_acc and dev_loss < best_loss):
            best_acc, best_loss, best_step, best = dev_acc, dev_loss, step, _snapshot(named)
        run_loss, run_correct, run_count, run_batches = 0.0, 0, 0, 0

    done = False
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in make_batches(lengths, cfg.batch_size, shuffle_rng):
            ids, lens, labels = _pad(pairs, idx)
            for t in tensors:
                t.grad = None
            loss, logits = _batch_loss(params, head, encoder, ids, lens, labels)
            value = float(loss.data)
            step += 1
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            T.backward(loss)
            adam_step(state, tensors, _gradients(named, cfg.clip))
            run_loss += value
            run_batches += 1
            run_correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            run_count += len(idx)
            if step % eval_every == 0:
                evaluate(epoch)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    if not history or history[-1][0] != step:
        evaluate(epoch)
    _restore(named, best)
    return ClassifierResult(history, best_acc, best_step, step, log)


# ---------------------------------------------------------------------------
# propositional logic


def _logic_pairs(formulae, vocab):
    return [(formula_ids(f, vocab), int(f.label)) for f in formulae]


def op_weight_profile(params: cells.MuFuRUParams, formulae: Sequence[LogicFormula],
                      vocab: Sequence = LOGIC_VOCAB, batch_size: int = 256) -> np.ndarray:
    """Average operation weights grouped by the input token at each step.

    Returns ``[len(vocab), l]``; each row averages over occurrences and state
    dimensions, so it sums to 1 (rows of unseen tokens are NaN).
    """
    if not isinstance(params, cells.MuFuRUParams):
        raise ValueError("operation weights exist only for MuFuRU cells")
    pairs = _logic_pairs(formulae, vocab)
    vocab_size = len(vocab)
    encoder = InputEncoder(vocab_size)
    sums = np.zeros((vocab_size, len(params.ops)))
    counts = np.zeros(vocab_size)
    with T.no_grad():
        for idx in make_batches([len(p[0]) for p in pairs], batch_size):
            ids, lengths, _ = _pad(pairs, idx)
            run = final_states(params, encoder, ids, lengths, record_weights=True)
            for t, w in enumerate(run.op_weights):
                valid = t < lengths
                per_op = w.mean(axis=-1)[valid]          # [B_valid, l]
                np.add.at(sums, ids[valid, t], per_op)
                np.add.at(counts, ids[valid, t], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None]


@dataclass
class LogicResult:
    train_accuracy: float
    dev_accuracy: float
    test_accuracy: float
    history: list[tuple[int, float, float]]
    profile: np.ndarray | None
    log: MetricsLog


def train_logic(params, head: ClassifierHead, data: LogicDatasets, cfg: TrainConfig,
                log: MetricsLog | None = None) -> LogicResult:
    """Truth-value classification from the final state; tested on longer formulae."""
    vocab = data.vocab
    encoder = InputEncoder(len(vocab))
    if params.shape.input_size != encoder.size:
        raise DimensionError(f"logic inputs are {encoder.size}-dimensional one-hot vectors")
    train, dev, test = (_logic_pairs(split, vocab) for split in (data.train, data.dev, data.test))
    result = train_classifier(params, head, train, dev, cfg, encoder,
                              extra_eval={"test": test}, log=log)
    _, train_acc = evaluate_classifier(params, head, encoder, train)
    _, test_acc = evaluate_classifier(params, head, encoder, test)
    profile = None
    if isinstance(params, cells.MuFuRUParams):
        profile = op_weight_profile(params, list(data.train) + list(data.dev) + list(data.test),
                                    vocab)
    return LogicResult(train_acc, result.best_dev_accuracy, test_acc, result.history, profile,
                       result.log)


# ---------------------------------------------------------------------------
# language modelling


@dataclass
class LMHead:
    """Untied projection from the state to vocabulary logits; starts at zero (uniform predictions)."""

    W_o: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, vocab_size: int, state_size: int) -> "LMHead":
        return cls(T.parameter(np.zeros((vocab_size, state_size)), "W_o"),
                   T.parameter(np.zeros(vocab_size), "b_o"))

    def __call__(self, h: Tensor) -> Tensor:
        return T.add(T.matmul(h, T.transpose(self.W_o)), self.b_o)

    def named_tensors(self):
        return [("W_o", self.W_o), ("b_o", self.b_o)]


def batchify(ids: np.ndarray, streams: int) -> np.ndarray:
    """Cut a token stream into ``streams`` contiguous rows (the tail is dropped)."""
    streams = max(1, min(streams, len(ids) - 1))
    width = len(ids) // streams
    return np.asarray(ids[: streams * width]).reshape(streams, width)


def _window_nll(params, head, encoder, rows, start, stop, s):
    """Sum of next-token NLL over columns ``start..stop-1``; returns (loss, new state, count)."""
    xs = [encoder(rows[:, t]) for t in range(start, stop)]
    run = cells.unroll(params, xs, s0=s)
    losses = [cross_entropy(head(h), rows[:, t + 1], reduction="sum")
              for h, t in zip(run.outputs, range(start, stop))]
    loss = losses[0] if len(losses) == 1 else T.total(T.stack(losses))
    return loss, run.states[-1], rows.shape[0] * (stop - start)


def evaluate_lm(params, head, encoder, ids: np.ndarray, streams: int = 10,
                window: int = 100) -> tuple[float, int]:
    """Total NLL and predicted-token count, state carried across the whole split."""
    rows = batchify(ids, streams)
    if rows.shape[1] < 2:
        raise DataError("split too short to evaluate")
    total, count = 0.0, 0
    s = T.constant(np.zeros((rows.shape[0], params.shape.state_size)))
    with T.no_grad():
        for start in range(0, rows.shape[1] - 1, window):
            stop = min(start + window, rows.shape[1] - 1)
            loss, s, n = _window_nll(params, head, encoder, rows, start, stop, s)
            total += float(loss.data)
            count += n
    return total, count


@dataclass
class LMResult:
    history: list[tuple[int, float, float]]
    valid_perplexity: float
    test_perplexity: float
    steps: int
    log: MetricsLog


def train_lm(params, corpus: TextCorpus, cfg: TrainConfig, encoder: InputEncoder,
             head: LMHead | None = None, log: MetricsLog | None = None) -> tuple[LMResult, LMHead]:
    """Truncated BPTT next-token training; the state carries over window boundaries.

    Parameters are left at the snapshot with the best validation perplexity.
    """
    corpus.check()
    if encoder.vocab_size != corpus.vocab_size:
        raise DataError("encoder vocabulary differs from the corpus vocabulary")
    if len(corpus.train) <= cfg.truncation:
        raise DataError("training split is not longer than the truncation length")
    head = head or LMHead.init(corpus.vocab_size, params.shape.state_size)
    log = log if log is not None else MetricsLog()
    named = model_tensors(params, head, encoder)
    tensors = [t for _, t in named]
    state = AdamState.for_params(tensors, alpha=cfg.learning_rate)
    rows = batchify(corpus.train, cfg.batch_size)
    m = params.shape.state_size

    history = []
    best_ppl, best = math.inf, _snapshot(named)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        s = T.constant(np.zeros((rows.shape[0], m)))
        nll, count = 0.0, 0
        for start in range(0, rows.shape[1] - 1, cfg.truncation):
            stop = min(start + cfg.truncation, rows.shape[1] - 1)
            for t in tensors:
                t.grad = None
            loss, s, n = _window_nll(params, head, encoder, rows, start, stop, s)
            value = float(loss.data)
            step += 1
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            mean_loss = T.scale(loss, 1.0 / n)
            T.backward(mean_loss)
            adam_step(state, tensors, _gradients(named, cfg.clip))
            s = T.constant(s.data.copy())
            nll += value
            count += n
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        train_ppl = perplexity(nll, count)
        v_nll, v_count = evaluate_lm(params, head, encoder, corpus.valid)
        valid_ppl = perplexity(v_nll, v_count)
        log.add(step, epoch, "train", nll / count, train_ppl)
        log.add(step, epoch, "valid", v_nll / v_count, valid_ppl)
        history.append((epoch, train_ppl, valid_ppl))
        if valid_ppl < best_ppl:
            best_ppl, best = valid_ppl, _snapshot(named)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    _restore(named, best)
    t_nll, t_count = evaluate_lm(params, head, encoder, corpus.test)
    test_ppl = perplexity(t_nll, t_count)
    log.add(step, len(history), "test", t_nll / t_count, test_ppl)
    return LMResult(history, best_ppl, test_ppl, step, log), head
