"""Accuracy metrics, seed aggregation, z-tests, zero-shot and reordering studies."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .datagen import PATTERNS, reorder_to_pattern
from .domain import NUM_TAGS, CountryProfile, Tag, TaggedAddress
from .errors import LengthMismatch, TooFewRuns

# two-sided critical value at alpha = 0.001
Z_CRITICAL = 3.290527


class Tagger(Protocol):
    def predict(self, token_lists: Sequence[Sequence[str]]) -> list[list[int]]: ...


def sequence_accuracy(pred: Sequence[Tag | int], gold: Sequence[Tag | int]) -> float:
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predicted tags for {len(gold)} gold tags")
    if not gold:
        raise ValueError("empty sequence has no accuracy")
    return sum(_tag_id(p) == _tag_id(g) for p, g in zip(pred, gold)) / len(gold)


def _tag_id(tag: Tag | int) -> int:
    return tag.index if isinstance(tag, Tag) else int(tag)


@dataclass(frozen=True)
class Score:
    n: int
    k: int
    token_accuracy: float
    mean_sequence_accuracy: float


def score_predictions(predictions: Sequence[Sequence[int]], corpus: Sequence[TaggedAddress]) -> Score:
    if len(predictions) != len(corpus):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(corpus)} addresses")
    n = k = 0
    seq_total = 0.0
    for pred, addr in zip(predictions, corpus):
        acc = sequence_accuracy(pred, addr.tags)
        n += len(addr.tags)
        k += round(acc * len(addr.tags))
        seq_total += acc
    return Score(n, k, k / n, seq_total / len(corpus))


def evaluate(model: Tagger, corpus: Sequence[TaggedAddress]) -> Score:
    """Micro token accuracy and mean per-address accuracy of ``model`` on ``corpus``."""
    if not corpus:
        raise ValueError("cannot evaluate on an empty corpus")
    return score_predictions(model.predict([a.tokens for a in corpus]), corpus)


class RandomTagger:
    """Draws every tag uniformly from the eight predictable tags."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def predict(self, token_lists: Sequence[Sequence[str]]) -> list[list[int]]:
        return [self.rng.integers(0, NUM_TAGS, len(toks)).tolist() for toks in token_lists]


def aggregate_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation of per-seed accuracies."""
    if len(values) < 2:
        raise TooFewRuns(f"need at least 2 runs to aggregate, got {len(values)}")
    return statistics.fmean(values), statistics.stdev(values)


@dataclass(frozen=True)
class ZTestResult:
    z: float
    reject: bool
    n1: int
    n2: int
    pooled: float

    def to_dict(self) -> dict:
        return asdict(self)


def z_test(k1: int, n1: int, k2: int, n2: int) -> ZTestResult:
    """Pooled two-proportion z; positive when the first proportion is higher."""
    if n1 < 1 or n2 < 1:
        raise ValueError("sample sizes must be >= 1")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("successes must lie in [0, n]")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        z = 0.0
    else:
        z = (k1 / n1 - k2 / n2) / math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    return ZTestResult(z, abs(z) > Z_CRITICAL, n1, n2, pooled)


# -- reports --------------------------------------------------------------

@dataclass
class CountryRecord:
    country: str
    n: int
    k: int
    token_accuracy: float
    mean_sequence_accuracy: float
    per_seed: list[float]
    mean: float
    std: float | None  # None for a single seed
    relation: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, country: str, scores: Sequence[Score], relation: dict | None = None) -> "CountryRecord":
        per_seed = [s.token_accuracy for s in scores]
        if not per_seed:
            raise TooFewRuns("no runs to aggregate")
        mean, std = aggregate_seeds(per_seed) if len(per_seed) > 1 else (per_seed[0], None)
        n = sum(s.n for s in scores)
        k = sum(s.k for s in scores)
        return cls(country, n, k, k / n, statistics.fmean(s.mean_sequence_accuracy for s in scores),
                   per_seed, mean, std, dict(relation or {}))


@dataclass
class EvalReport:
    """Per-country accuracy across seeds; ``n`` and ``k`` pool the tokens of every seed."""

    title: str
    seeds: list[int]
    countries: list[CountryRecord]

    @property
    def n(self) -> int:
        return sum(c.n for c in self.countries)

    @property
    def k(self) -> int:
        return sum(c.k for c in self.countries)

    @property
    def token_accuracy(self) -> float:
        return self.k / self.n

    def country(self, code: str) -> CountryRecord:
        for c in self.countries:
            if c.country == code:
                return c
        raise KeyError(code)

    def to_dict(self) -> dict:
        return {"title": self.title, "seeds": self.seeds, "n": self.n, "k": self.k,
                "token_accuracy": self.token_accuracy,
                "countries": [asdict(c) for c in self.countries]}

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(data["title"], list(data["seeds"]), [CountryRecord(**c) for c in data["countries"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        flags = any(c.relation for c in self.countries)
        head = f"{'country':<8} {'mean':>8} {'std':>8} {'tokens':>8}  per-seed"
        lines = [self.title, head + ("  relation" if flags else "")]
        for c in self.countries:
            seeds = " ".join(f"{v * 100:6.2f}" for v in c.per_seed)
            std = "-" if c.std is None else f"{c.std * 100:.2f}"
            row = f"{c.country:<8} {c.mean * 100:8.2f} {std:>8} {c.n // len(c.per_seed):>8}  {seeds}"
            if flags:
                row += "  " + (",".join(k for k, v in c.relation.items() if v) or "none")
            lines.append(row)
        lines.append(f"pooled token accuracy {self.token_accuracy * 100:.2f} over {self.n} tokens")
        return "\n".join(lines) + "\n"


def by_country(corpus: Iterable[TaggedAddress]) -> dict[str, list[TaggedAddress]]:
    groups: dict[str, list[TaggedAddress]] = {}
    for addr in corpus:
        groups.setdefault(addr.country, []).append(addr)
    return groups


def evaluate_seeds(models: Sequence[tuple[int, Tagger]], corpus: Sequence[TaggedAddress], title: str = "holdout",
                   relations: dict[str, dict[str, bool]] | None = None) -> EvalReport:
    """Score every seed's model on every country in ``corpus``."""
    if not models:
        raise TooFewRuns("no runs to aggregate")
    groups = by_country(corpus)
    scores: dict[str, list[Score]] = {c: [] for c in groups}
    for _, model in models:
        preds = model.predict([a.tokens for a in corpus])
        per_country: dict[str, list] = {c: [] for c in groups}
        for addr, pred in zip(corpus, preds):
            per_country[addr.country].append(pred)
        for code, addrs in groups.items():
            scores[code].append(score_predictions(per_country[code], addrs))
    relations = relations or {}
    records = [CountryRecord.from_scores(code, scores[code], relations.get(code)) for code in groups]
    return EvalReport(title, [s for s, _ in models], records)


def relation_flags(country: CountryProfile, training: Sequence[CountryProfile],
                   lexicon_family: dict[str, str]) -> dict[str, bool]:
    """How an unseen country relates to the training countries.

    ``lexicon_family`` maps each lexicon id to the lexicon it descends from
    (itself when it is not a sister lexicon).
    """
    seen_patterns = {c.pattern_ids for c in training}
    seen_families = {lexicon_family.get(c.lexicon_id, c.lexicon_id) for c in training}
    shared_pattern = country.pattern_ids in seen_patterns
    shared_lexicon = lexicon_family.get(country.lexicon_id, country.lexicon_id) in seen_families
    return {"shared_pattern": shared_pattern, "shared_lexicon": shared_lexicon,
            "neither": not (shared_pattern or shared_lexicon)}


def zero_shot_eval(models: Sequence[tuple[int, Tagger]], corpus: Sequence[TaggedAddress],
                   unseen: Sequence[CountryProfile], training: Sequence[CountryProfile],
                   lexicon_family: dict[str, str] | None = None) -> EvalReport:
    """Evaluate every seed on countries that never appeared in training."""
    train_codes = {c.code for c in training}
    overlap = train_codes & {c.code for c in unseen}
    if overlap:
        raise ValueError(f"zero-shot countries also used in training: {sorted(overlap)}")
    family = lexicon_family or {}
    relations = {c.code: relation_flags(c, training, family) for c in unseen}
    wanted = set(relations)
    return evaluate_seeds(models, [a for a in corpus if a.country in wanted], "zero-shot", relations)


@dataclass(frozen=True)
class ReorderResult:
    before: Score
    after: Score
    targets: dict[int, int]

    @property
    def drop(self) -> float:
        return self.before.token_accuracy - self.after.token_accuracy

    def to_dict(self) -> dict:
        return {"before": asdict(self.before), "after": asdict(self.after),
                "drop": self.drop, "targets": {str(k): v for k, v in self.targets.items()}}


def reorder_study(model: Tagger, corpus: Sequence[TaggedAddress], patterns: Sequence[int],
                  n: int | None = None, seed: int = 0) -> ReorderResult:
    """Accuracy before and after rewriting ``corpus`` into ``patterns``.

    Up to ``n`` addresses are drawn with ``seed`` and dealt to the target
    patterns in equal shares.
    """
    if not corpus:
        raise ValueError("cannot run a reordering study on an empty corpus")
    if not patterns:
        raise ValueError("need at least one target pattern")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))[: n or len(corpus)]
    sample = [corpus[i] for i in order]
    reordered = []
    counts = {pid: 0 for pid in patterns}
    for i, addr in enumerate(sample):
        pid = patterns[i % len(patterns)]
        reordered.append(reorder_to_pattern(addr, PATTERNS[pid]))
        counts[pid] += 1
    return ReorderResult(evaluate(model, sample), evaluate(model, reordered), counts)
