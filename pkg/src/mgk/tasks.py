"""Deterministic synthetic sequence-classification tasks.

Token layout for ``associative_recall`` with ``V = vocab``: key tokens are
``0..V-1``, value tokens ``V..2V-1``, then a separator ``2V`` and a padding
token ``2V+1``.  A sequence holds ``(N - 2) // 2`` key/value pairs drawn
from a per-sequence random key-to-value map, the separator, the query key
(copied from one of the pairs) and, for odd ``N``, one trailing pad.  The
label is the value index bound to the query.

``majority_class`` sequences are ``N`` tokens uniform over ``0..V-1``; the
label is the most frequent token, ties going to the smallest.

Every draw comes from one SplitMix64 stream reduced modulo the range, in a
fixed order, so a (kind, sizes, seed) triple pins the dataset bit for bit.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .rng import SplitMix64

KINDS = ("associative_recall", "majority_class")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "associative_recall"
    vocab: int = 16
    seq_len: int = 64
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        if self.vocab < 2:
            raise ConfigurationError(f"vocab must be at least 2, got {self.vocab}")
        if self.seq_len < 4:
            raise ConfigurationError(f"sequence length must be at least 4, got {self.seq_len}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigurationError("dataset sizes must be non-negative")

    @property
    def n_tokens(self):
        """Embedding table size."""
        return 2 * self.vocab + 2 if self.kind == "associative_recall" else self.vocab

    @property
    def n_classes(self):
        return self.vocab


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label"] + [f"t{i}" for i in range(self.tokens.shape[1])])
        for label, row in zip(self.labels, self.tokens):
            writer.writerow([int(label)] + [int(t) for t in row])
        return buf.getvalue()


def _recall_example(rng, vocab, n):
    n_pairs = (n - 2) // 2
    mapping = [rng.below(vocab) for _ in range(vocab)]
    keys = [rng.below(vocab) for _ in range(n_pairs)]
    query = keys[rng.below(n_pairs)]
    seq = []
    for k in keys:
        seq += [k, vocab + mapping[k]]
    seq += [2 * vocab, query]
    seq += [2 * vocab + 1] * (n - len(seq))
    return seq, mapping[query]


def _majority_example(rng, vocab, n):
    seq = [rng.below(vocab) for _ in range(n)]
    return seq, int(np.argmax(np.bincount(seq, minlength=vocab)))


def generate_task(spec):
    """Train and test datasets for ``spec``, in that order from one stream."""
    rng = SplitMix64(spec.seed)
    make = _recall_example if spec.kind == "associative_recall" else _majority_example

    def draw(count):
        tokens = np.zeros((count, spec.seq_len), dtype=np.int64)
        labels = np.zeros(count, dtype=np.int64)
        for i in range(count):
            seq, label = make(rng, spec.vocab, spec.seq_len)
            tokens[i] = seq
            labels[i] = label
        return Dataset(tokens, labels)

    train = draw(spec.n_train)
    return train, draw(spec.n_test)
