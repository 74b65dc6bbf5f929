"""BPE merge learning and segmentation, plus character n-gram extraction."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import CorruptFile, VersionError

END_OF_WORD = "</w>"
UNK = "<unk>"
UNK_ID = 0
VOCAB_FORMAT_VERSION = 1


def normalize_digits(word: str) -> str:
    """Replace every decimal digit with '0'."""
    return "".join("0" if ch.isdecimal() else ch for ch in word)


@dataclass(frozen=True)
class BpeVocab:
    """Ordered merge list and symbol table.

    ``symbols[i]`` is the symbol with id ``i``; id 0 is reserved for UNK and
    never appears in ``symbol_ids``.
    """

    merges: tuple[tuple[str, str], ...]
    symbols: tuple[str, ...]
    marker: str = END_OF_WORD
    _ranks: dict = field(init=False, repr=False, compare=False)
    _ids: dict = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.symbols or self.symbols[0] != UNK:
            raise ValueError("symbol 0 must be the UNK placeholder")
        ranks: dict = {}
        for i, pair in enumerate(self.merges):
            ranks.setdefault(pair, i)
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_ids", {s: i for i, s in enumerate(self.symbols) if i != UNK_ID})
        object.__setattr__(self, "_cache", {})

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def symbol_ids(self) -> dict[str, int]:
        return self._ids

    def segment_symbols(self, word: str) -> list[str]:
        """Subword strings for ``word`` after digit normalization; the last one carries the marker."""
        word = normalize_digits(word)
        parts = list(word) + [self.marker]
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            for pair in zip(parts, parts[1:]):
                rank = ranks.get(pair)
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, pair)
            if best is None:
                break
            left, right = best[1]
            merged = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == left and parts[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def segment(self, word: str) -> tuple[int, ...]:
        # keyed by the folded form, so all numbers of one shape share an entry
        key = normalize_digits(word)
        cached = self._cache.get(key)
        if cached is None:
            ids = self._ids
            cached = tuple(ids.get(s, UNK_ID) for s in self.segment_symbols(key))
            self._cache[key] = cached
        return cached

    def detokenize(self, symbols: Iterable[str]) -> str:
        text = "".join(symbols)
        if text.endswith(self.marker):
            text = text[: -len(self.marker)]
        return text

    # -- serialization --------------------------------------------------

    def dumps(self) -> str:
        lines = [f"#bpe-vocab version={VOCAB_FORMAT_VERSION} num_merges={self.num_merges} marker={self.marker}"]
        lines.extend(f"{a} {b}" for a, b in self.merges)
        lines.append(f"#symbols {len(self.symbols) - 1}")
        lines.extend(f"{i}\t{s}" for i, s in enumerate(self.symbols) if i != UNK_ID)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BpeVocab":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith("#bpe-vocab "):
            raise CorruptFile("missing BPE vocab header")
        try:
            header = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
            version = int(header["version"])
        except (ValueError, KeyError):
            raise CorruptFile("malformed BPE vocab header") from None
        if version != VOCAB_FORMAT_VERSION:
            raise VersionError(f"BPE vocab version {version}, expected {VOCAB_FORMAT_VERSION}")
        try:
            n_merges = int(header["num_merges"])
            marker = header["marker"]
            merges = []
            for line in lines[1 : 1 + n_merges]:
                a, b = line.split(" ")
                merges.append((a, b))
            sym_header = lines[1 + n_merges]
            if not sym_header.startswith("#symbols "):
                raise ValueError
            n_symbols = int(sym_header.split()[1])
            body = lines[2 + n_merges :]
            if len(merges) != n_merges or len(body) != n_symbols:
                raise ValueError
            symbols = [UNK]
            for expected, line in enumerate(body, start=1):
                idx, sym = line.split("\t")
                if int(idx) != expected:
                    raise ValueError
                symbols.append(sym)
        except (ValueError, IndexError, KeyError):
            raise CorruptFile("truncated or malformed BPE vocab") from None
        return cls(tuple(merges), tuple(symbols), marker)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | Path) -> "BpeVocab":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _merge_word(symbols: tuple[str, ...], left: str, right: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Iterable[str], num_merges: int, marker: str = END_OF_WORD) -> BpeVocab:
    """Greedily merge the most frequent adjacent symbol pair ``num_merges`` times.

    Words are digit-normalized and end with ``marker``. Ties go to the
    lexicographically smallest pair. Learning stops early once no pair
    occurs at least twice.
    """
    freqs = Counter(normalize_digits(w) for w in corpus)
    if not freqs:
        raise ValueError("cannot learn BPE from an empty corpus")
    words = [tuple(w) + (marker,) for w in freqs]
    counts = [freqs[w] for w in freqs]

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (word, n) in enumerate(zip(words, counts)):
        for pair in zip(word, word[1:]):
            pair_counts[pair] += n
            where[pair].add(idx)

    alphabet = sorted({s for w in words for s in w})
    symbols = [UNK] + alphabet
    seen = set(alphabet)
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        best = None
        for pair, n in pair_counts.items():
            if n > 0 and (best is None or n > best[1] or (n == best[1] and pair < best[0])):
                best = (pair, n)
        if best is None or best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        new_symbol = pair[0] + pair[1]
        if new_symbol not in seen:
            seen.add(new_symbol)
            symbols.append(new_symbol)
        for idx in sorted(where.pop(pair, ())):
            old = words[idx]
            new = _merge_word(old, *pair)
            if new == old:
                continue
            n = counts[idx]
            for p in zip(old, old[1:]):
                pair_counts[p] -= n
            for p in zip(new, new[1:]):
                pair_counts[p] += n
                where[p].add(idx)
            words[idx] = new
        del pair_counts[pair]
    return BpeVocab(tuple(merges), tuple(symbols), marker)


@dataclass(frozen=True)
class NgramSpec:
    n: int = 2
    hash_buckets: int = 2**14
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1 or self.hash_buckets < 1:
            raise ValueError("n and hash_buckets must be >= 1")


def char_ngrams(word: str, spec: NgramSpec = NgramSpec()) -> list[str]:
    """Consecutive length-n substrings of ``word`` with whitespace removed."""
    text = "".join(word.split())
    n = spec.n
    return [text[i : i + n] for i in range(len(text) - n + 1)]


def fnv1a_32(text: str) -> int:
    h = 0x811C9DC5
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def ngram_bucket(gram: str, spec: NgramSpec) -> int:
    return fnv1a_32(gram) % spec.hash_buckets
