"""Datasets: propositional-logic formulae, text corpora and labelled sequences."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormulaParseError

UNK = "<unk>"


class LogicToken(enum.IntEnum):
    FALSE = 0
    TRUE = 1
    AND = 2
    OR = 3
    XOR = 4
    IMPLIES = 5
    # optional extra gates (see EXTENDED_GATES)
    NAND = 6
    NOR = 7
    XNOR = 8
    CONVERSE = 9
    NIMPLY = 10
    CONVERSE_NIMPLY = 11

    @property
    def symbol(self) -> str:
        return SYMBOLS[self]

    @property
    def is_value(self) -> bool:
        return self in (LogicToken.FALSE, LogicToken.TRUE)


VALUES = (LogicToken.FALSE, LogicToken.TRUE)
GATES = (LogicToken.AND, LogicToken.OR, LogicToken.XOR, LogicToken.IMPLIES)
# all ten binary gates that depend on both inputs
EXTENDED_GATES = GATES + (LogicToken.NAND, LogicToken.NOR, LogicToken.XNOR,
                          LogicToken.CONVERSE, LogicToken.NIMPLY, LogicToken.CONVERSE_NIMPLY)
LOGIC_VOCAB = VALUES + GATES
GATE_SETS = {"basic": GATES, "extended": EXTENDED_GATES}


def logic_vocab(gates: Sequence[LogicToken] = GATES) -> tuple[LogicToken, ...]:
    """Input vocabulary for a gate set; one-hot index is the position in this tuple."""
    return VALUES + tuple(gates)


SYMBOLS = {
    LogicToken.FALSE: "0",
    LogicToken.TRUE: "1",
    LogicToken.AND: "&",
    LogicToken.OR: "|",
    LogicToken.XOR: "^",
    LogicToken.IMPLIES: ">",
    LogicToken.NAND: "!&",
    LogicToken.NOR: "!|",
    LogicToken.XNOR: "!^",
    LogicToken.CONVERSE: "<",
    LogicToken.NIMPLY: "!>",
    LogicToken.CONVERSE_NIMPLY: "!<",
}
FROM_SYMBOL = {sym: tok for tok, sym in SYMBOLS.items()}

GATE_FUNCTIONS = {
    LogicToken.AND: lambda a, b: a and b,
    LogicToken.OR: lambda a, b: a or b,
    LogicToken.XOR: lambda a, b: a != b,
    LogicToken.IMPLIES: lambda a, b: (not a) or b,
    LogicToken.NAND: lambda a, b: not (a and b),
    LogicToken.NOR: lambda a, b: not (a or b),
    LogicToken.XNOR: lambda a, b: a == b,
    LogicToken.CONVERSE: lambda a, b: a or not b,
    LogicToken.NIMPLY: lambda a, b: a and not b,
    LogicToken.CONVERSE_NIMPLY: lambda a, b: (not a) and b,
}


@dataclass(frozen=True)
class LogicFormula:
    tokens: tuple[LogicToken, ...]
    label: bool

    @property
    def num_gates(self) -> int:
        return (len(self.tokens) - 1) // 2

    def to_line(self) -> str:
        return " ".join(t.symbol for t in self.tokens) + "\t" + str(int(self.label))


def _check_pattern(tokens: Sequence[LogicToken]) -> None:
    if len(tokens) < 3 or len(tokens) % 2 == 0:
        raise FormulaParseError(f"formula of length {len(tokens)} is not v v g (v g)*",
                                len(tokens))
    for i, tok in enumerate(tokens):
        want_value = i < 2 or i % 2 == 1
        tok = LogicToken(tok)
        if want_value != tok.is_value:
            kind = "truth value" if want_value else "gate"
            raise FormulaParseError(f"expected a {kind}, got {tok.name}", i)


def eval_formula(tokens: Sequence[LogicToken]) -> bool:
    """Evaluate ``v1 v2 g1 v3 g2 ...`` as ``((v1 g1 v2) g2 v3) ...``."""
    _check_pattern(tokens)
    acc = bool(tokens[0])
    for i in range(1, len(tokens), 2):
        value, gate = bool(tokens[i]), LogicToken(tokens[i + 1])
        acc = GATE_FUNCTIONS[gate](acc, value)
    return bool(acc)


def sample_formula(num_gates: int, rng: np.random.Generator,
                   gates: Sequence[LogicToken] = GATES) -> LogicFormula:
    if num_gates < 1:
        raise ValueError("a formula needs at least one gate")
    values = rng.integers(0, 2, size=num_gates + 1)
    picks = rng.integers(0, len(gates), size=num_gates)
    tokens = [LogicToken(int(values[0]))]
    for i in range(num_gates):
        tokens.append(LogicToken(int(values[i + 1])))
        tokens.append(gates[int(picks[i])])
    tokens = tuple(tokens)
    return LogicFormula(tokens, eval_formula(tokens))


def formula_ids(formula: LogicFormula, vocab: Sequence[LogicToken] = LOGIC_VOCAB) -> np.ndarray:
    index = {tok: i for i, tok in enumerate(vocab)}
    try:
        return np.array([index[t] for t in formula.tokens], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"token {LogicToken(exc.args[0]).name} is outside the gate set") from exc


@dataclass
class LogicDatasets:
    train: list[LogicFormula]
    dev: list[LogicFormula]
    test: list[LogicFormula]
    gates: tuple[LogicToken, ...] = GATES

    @property
    def vocab(self) -> tuple[LogicToken, ...]:
        return logic_vocab(self.gates)


def generate_logic_datasets(rng: np.random.Generator, train_size: int = 1000, test_size: int = 1000,
                            train_gates: tuple[int, int] = (5, 10),
                            test_gates: tuple[int, int] = (11, 20),
                            dev_fraction: float = 0.1,
                            gates: Sequence[LogicToken] = GATES) -> LogicDatasets:
    """Train/dev formulae with ``train_gates`` gates, test formulae with ``test_gates``.

    Gate counts are inclusive ranges sampled uniformly. Test sequences never
    coincide exactly with a training sequence; collisions are resampled.
    """
    train = [sample_formula(int(rng.integers(train_gates[0], train_gates[1] + 1)), rng, gates)
             for _ in range(train_size)]
    seen = {f.tokens for f in train}
    test = []
    while len(test) < test_size:
        f = sample_formula(int(rng.integers(test_gates[0], test_gates[1] + 1)), rng, gates)
        if f.tokens not in seen:
            test.append(f)
    order = rng.permutation(train_size)
    n_dev = int(round(dev_fraction * train_size))
    dev_idx = set(order[:n_dev].tolist())
    return LogicDatasets(
        train=[f for i, f in enumerate(train) if i not in dev_idx],
        dev=[f for i, f in enumerate(train) if i in dev_idx],
        test=test,
        gates=tuple(gates),
    )


def parse_formula_line(line: str, lineno: int = 0) -> LogicFormula:
    try:
        body, label = line.rstrip("\n").split("\t")
        tokens = tuple(FROM_SYMBOL[sym] for sym in body.split())
        if label not in ("0", "1"):
            raise ValueError(label)
    except (KeyError, ValueError) as exc:
        raise DataError(f"line {lineno}: malformed formula record {line!r}") from exc
    formula = LogicFormula(tokens, label == "1")
    if eval_formula(tokens) != formula.label:
        raise DataError(f"line {lineno}: label disagrees with the formula's value")
    return formula


def write_formulae(path, formulae: Iterable[LogicFormula]) -> None:
    text = "".join(f.to_line() + "\n" for f in formulae)
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def read_formulae(path) -> list[LogicFormula]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_formula_line(line, i + 1) for i, line in enumerate(lines) if line.strip()]


# ---------------------------------------------------------------------------
# one-hot encoding


def encode_onehot(tokens: Sequence, vocab: Sequence, unk: object | None = None) -> list[np.ndarray]:
    """One indicator vector per token.

    Unknown tokens raise :class:`DataError` unless ``unk`` names a vocabulary
    entry to substitute.
    """
    index = {tok: i for i, tok in enumerate(vocab)}
    out = []
    for pos, tok in enumerate(tokens):
        i = index.get(tok)
        if i is None:
            if unk is None:
                raise DataError(f"token {tok!r} at position {pos} is not in the vocabulary")
            i = index[unk]
        vec = np.zeros(len(vocab))
        vec[i] = 1.0
        out.append(vec)
    return out


def decode_onehot(vectors: Sequence[np.ndarray], vocab: Sequence) -> list:
    return [vocab[int(np.argmax(v))] for v in vectors]


# ---------------------------------------------------------------------------
# text corpora


def tokenize(text: str, level: str = "word") -> list[str]:
    if level == "word":
        return text.split()
    if level == "char":
        return list(text)
    raise ValueError(f"level must be 'word' or 'char', got {level!r}")


def build_vocab(tokens: Iterable[str], max_vocab: int) -> list[str]:
    """UNK followed by the ``max_vocab - 1`` most frequent tokens (ties: lexicographic)."""
    if max_vocab < 1:
        raise ValueError("max_vocab must be positive")
    counts = Counter(tokens)
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [UNK] + [tok for tok, _ in ranked[: max_vocab - 1]]


def numericalize(tokens: Sequence[str], vocab: Sequence[str]) -> np.ndarray:
    index = {tok: i for i, tok in enumerate(vocab)}
    return np.array([index.get(tok, 0) for tok in tokens], dtype=np.int64)


@dataclass
class TextCorpus:
    vocab: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    level: str = "word"

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def check(self) -> None:
        for name in ("train", "valid", "test"):
            ids = getattr(self, name)
            if len(ids) and (ids.min() < 0 or ids.max() >= self.vocab_size):
                raise DataError(f"{name} split has ids outside the vocabulary")


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def load_text_corpus(train, valid, test, max_vocab: int = 10000, level: str = "word") -> TextCorpus:
    """Read three UTF-8 files; the vocabulary comes from the training split only."""
    train_tokens = tokenize(_read_text(train), level)
    if not train_tokens:
        raise DataError(f"{train}: training file is empty")
    vocab = build_vocab(train_tokens, max_vocab)
    return TextCorpus(
        vocab=vocab,
        train=numericalize(train_tokens, vocab),
        valid=numericalize(tokenize(_read_text(valid), level), vocab),
        test=numericalize(tokenize(_read_text(test), level), vocab),
        level=level,
    )


# ---------------------------------------------------------------------------
# labelled sequences


@dataclass
class LabeledSequence:
    ids: np.ndarray
    label: int


@dataclass
class LabeledDataset:
    sequences: list[LabeledSequence]
    vocab: list[str]
    labels: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.sequences)


def _parse_tsv(path) -> list[tuple[str, list[str]]]:
    records = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'label<TAB>tokens'")
        label, body = parts[0].strip(), parts[1].split()
        if not label:
            raise DataError(f"{path}:{lineno}: empty label")
        if not body:
            raise DataError(f"{path}:{lineno}: empty token sequence")
        records.append((label, body))
    return records


def load_labeled_sequences(path, vocab: Sequence[str] | None = None,
                           labels: Sequence[str] | None = None,
                           max_vocab: int = 10000) -> LabeledDataset:
    """Read ``label<TAB>token token ...`` records.

    Pass the ``vocab`` and ``labels`` of a training set to load a dev/test split
    consistently; unseen labels in such a split are a :class:`DataError`.
    """
    records = _parse_tsv(path)
    if vocab is None:
        vocab = build_vocab((tok for _, body in records for tok in body), max_vocab)
    if labels is None:
        labels = list(dict.fromkeys(label for label, _ in records))
        frozen = False
    else:
        labels = list(labels)
        frozen = True
    label_index = {name: i for i, name in enumerate(labels)}
    sequences = []
    for label, body in records:
        if label not in label_index:
            if frozen:
                raise DataError(f"{path}: label {label!r} does not occur in the training split")
            label_index[label] = len(labels)
            labels.append(label)
        sequences.append(LabeledSequence(numericalize(body, vocab), label_index[label]))
    return LabeledDataset(sequences, list(vocab), labels)
