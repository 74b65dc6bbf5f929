"""Word embedders: frozen hashed n-gram sums and trainable BiLSTM subword composition."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import LstmCellParams, Tensor
from .subword import BpeVocab, NgramSpec, char_ngrams, ngram_bucket


@dataclass
class FixedNgramTable:
    """Frozen ``hash_buckets x d_word`` table; a word is the sum of its n-gram rows."""

    spec: NgramSpec
    vectors: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, spec: NgramSpec, d_word: int) -> "FixedNgramTable":
        rng = np.random.default_rng(spec.seed)
        return cls(spec, rng.uniform(-0.1, 0.1, (spec.hash_buckets, d_word)))

    @property
    def d_word(self) -> int:
        return self.vectors.shape[1]

    def word_vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            vec = np.zeros(self.d_word)
            for gram in char_ngrams(word, self.spec):
                vec = vec + self.vectors[ngram_bucket(gram, self.spec)]
            self._cache[word] = vec
        return vec

    def embed_words(self, words: Sequence[str]) -> Tensor:
        if not words:
            return Tensor(np.zeros((0, self.d_word)))
        return Tensor(np.stack([self.word_vector(w) for w in words]))

    def parameters(self) -> list[Tensor]:
        return []


class SubwordComposer:
    """BPE subword table run through a BiLSTM; final states go through one dense layer.

    The output width equals the composer's hidden size.
    """

    def __init__(self, vocab: BpeVocab, table: Tensor, fwd: LstmCellParams, bwd: LstmCellParams,
                 fc_w: Tensor, fc_b: Tensor):
        if fwd.hidden_dim != bwd.hidden_dim or fwd.input_dim != table.shape[1]:
            raise nn.DimensionMismatch("composer LSTM dims do not match the subword table")
        if fc_w.shape != (fwd.hidden_dim, 2 * fwd.hidden_dim) or fc_b.shape != (fwd.hidden_dim,):
            raise nn.DimensionMismatch("composer dense layer must map 2H -> H")
        if table.shape[0] != vocab.size:
            raise nn.DimensionMismatch(f"subword table has {table.shape[0]} rows, vocab has {vocab.size}")
        self.vocab = vocab
        self.table = table
        self.fwd = fwd
        self.bwd = bwd
        self.fc_w = fc_w
        self.fc_b = fc_b

    @classmethod
    def init(cls, vocab: BpeVocab, d_sub: int, hidden: int, rng: np.random.Generator) -> "SubwordComposer":
        k = 1.0 / np.sqrt(hidden)
        table = nn.parameter(rng.uniform(-0.1, 0.1, (vocab.size, d_sub)), "composer.subword_table")
        fwd = LstmCellParams.init(rng, d_sub, hidden, "composer.fwd")
        bwd = LstmCellParams.init(rng, d_sub, hidden, "composer.bwd")
        fc_w = nn.parameter(rng.uniform(-k, k, (hidden, 2 * hidden)), "composer.fc.w")
        fc_b = nn.parameter(np.zeros(hidden), "composer.fc.b")
        return cls(vocab, table, fwd, bwd, fc_w, fc_b)

    @property
    def d_word(self) -> int:
        return self.fwd.hidden_dim

    def parameters(self) -> list[Tensor]:
        return [self.table, *self.fwd.parameters(), *self.bwd.parameters(), self.fc_w, self.fc_b]

    def embed_words(self, words: Sequence[str]) -> Tensor:
        """Word vectors for ``words`` as an ``(n, d_word)`` tensor on the tape."""
        # words that segment identically (e.g. numbers after digit folding) share one row
        index: dict[tuple[int, ...], int] = {}
        rows = np.array([index.setdefault(tuple(self.vocab.segment(w)), len(index)) for w in words])
        seqs = list(index)
        lengths = np.array([len(q) for q in seqs])
        width = int(lengths.max())
        # stream 0 reads left to right, stream 1 reads each word reversed
        ids = np.zeros((2, width, len(seqs)), dtype=np.intp)
        for i, q in enumerate(seqs):
            ids[0, : len(q), i] = q
            ids[1, : len(q), i] = q[::-1]
        final = nn.lstm_final(nn.take_rows(self.table, ids), [self.fwd, self.bwd], lengths)
        H = self.fwd.hidden_dim
        h_fwd = nn.getitem(final, (0, slice(None), slice(0, H)))
        h_bwd = nn.getitem(final, (1, slice(None), slice(0, H)))
        unique = nn.linear(nn.concat([h_fwd, h_bwd], axis=-1), self.fc_w, self.fc_b)
        return unique if len(seqs) == len(words) else nn.take_rows(unique, rows)


Embedder = FixedNgramTable | SubwordComposer


def embed_word_fixed(word: str, table: FixedNgramTable) -> np.ndarray:
    return table.word_vector(word)


def embed_word_composed(word: str, composer: SubwordComposer) -> Tensor:
    return nn.getitem(composer.embed_words([word]), 0)


def embed_sequence(tokens: Sequence[str], embedder: Embedder) -> Tensor:
    """``T x d_word`` matrix, one row per token, each row independent of the others."""
    if not tokens:
        raise ValueError("cannot embed an empty token sequence")
    return embedder.embed_words(list(tokens))
