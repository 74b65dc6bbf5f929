"""Tag scheme, tagged addresses, address patterns and the JSON Lines corpus format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import EmptyAddress, SchemaError


class Tag(str, Enum):
    StreetNumber = "StreetNumber"
    StreetName = "StreetName"
    Unit = "Unit"
    Municipality = "Municipality"
    Province = "Province"
    PostalCode = "PostalCode"
    Orientation = "Orientation"
    GeneralDelivery = "GeneralDelivery"
    # control symbols, never predicted
    BOS = "BOS"
    PAD = "PAD"

    @property
    def index(self) -> int:
        return _TAG_INDEX[self]

    def __str__(self) -> str:
        return self.value


TAGS: tuple[Tag, ...] = tuple(list(Tag)[:8])
NUM_TAGS = len(TAGS)
_TAG_INDEX = {tag: i for i, tag in enumerate(Tag)}
BOS_ID = _TAG_INDEX[Tag.BOS]
PAD_ID = _TAG_INDEX[Tag.PAD]
TAG_NAMES: tuple[str, ...] = tuple(t.value for t in TAGS)
_PREDICTABLE = {t.value: t for t in TAGS}


def tag_from_name(name: str) -> Tag:
    """Look up one of the eight predictable tags by its exact, case-sensitive name."""
    try:
        return _PREDICTABLE[name]
    except (KeyError, TypeError):
        raise SchemaError(f"unknown tag {name!r}") from None


def tokenize(raw: str) -> list[str]:
    """Split an address into maximal runs of non-whitespace."""
    tokens = raw.split()
    if not tokens:
        raise EmptyAddress("address is empty after trimming whitespace")
    return tokens


@dataclass(frozen=True)
class TaggedAddress:
    raw: str
    tokens: tuple[str, ...]
    tags: tuple[Tag, ...]
    country: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        if not self.tokens:
            raise SchemaError("address has no tokens")
        if len(self.tokens) != len(self.tags):
            raise SchemaError(
                f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        for tag in self.tags:
            if not isinstance(tag, Tag) or tag in (Tag.BOS, Tag.PAD):
                raise SchemaError(f"invalid tag {tag!r}")
        if any(not tok or any(ch.isspace() for ch in tok) for tok in self.tokens):
            raise SchemaError("tokens must be non-empty and whitespace-free")
        if self.raw.split() != list(self.tokens):
            raise SchemaError("raw text does not match tokens")
        if not (isinstance(self.country, str) and len(self.country) == 2):
            raise SchemaError(f"country must be a 2-letter code, got {self.country!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Tag]], country: str) -> "TaggedAddress":
        pairs = list(pairs)
        tokens = tuple(tok for tok, _ in pairs)
        return cls(" ".join(tokens), tokens, tuple(tag for _, tag in pairs), country)

    def to_json(self) -> str:
        return json.dumps(
            {
                "raw": self.raw,
                "tokens": list(self.tokens),
                "tags": [t.value for t in self.tags],
                "country": self.country,
            },
            ensure_ascii=False,
        )


@dataclass(frozen=True)
class FieldSpec:
    tag: Tag
    min_tokens: int = 1
    max_tokens: int = 1
    optional: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError(f"bad token range for {self.tag}: {self.min_tokens}..{self.max_tokens}")


@dataclass(frozen=True)
class AddressPattern:
    """Ordered template of tag fields."""

    id: int
    field_order: tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "field_order", tuple(self.field_order))
        tags = [f.tag for f in self.field_order]
        if len(set(tags)) != len(tags):
            raise ValueError(f"pattern {self.id} repeats a tag")
        if any(t in (Tag.BOS, Tag.PAD) for t in tags):
            raise ValueError("patterns may only use predictable tags")

    @property
    def tags(self) -> tuple[Tag, ...]:
        return tuple(f.tag for f in self.field_order)

    def position(self, tag: Tag) -> int:
        return self.tags.index(tag)

    def follows(self, tags: Iterable[Tag]) -> bool:
        """True if a per-token tag sequence is made of contiguous blocks in this order."""
        order = {t: i for i, t in enumerate(self.tags)}
        last = -1
        prev = None
        for tag in tags:
            if tag not in order:
                return False
            if tag != prev:
                if order[tag] <= last:
                    return False
                last = order[tag]
                prev = tag
        return True


SCRIPTS = ("latin", "hangul-like", "cyrillic-like")


@dataclass(frozen=True)
class CountryProfile:
    code: str
    pattern_ids: tuple[int, ...]
    lexicon_id: str
    script: str = "latin"

    def __post_init__(self) -> None:
        object.__setattr__(self, "pattern_ids", tuple(self.pattern_ids))
        if len(self.code) != 2:
            raise ValueError(f"country code must have 2 letters: {self.code!r}")
        if not self.pattern_ids:
            raise ValueError(f"country {self.code} has no pattern")
        if self.script not in SCRIPTS:
            raise ValueError(f"unknown script {self.script!r}")


def parse_record(obj: object, line: int | None = None) -> TaggedAddress:
    if not isinstance(obj, dict):
        raise SchemaError("record is not a JSON object", line)
    for key in ("raw", "tokens", "tags", "country"):
        if key not in obj:
            raise SchemaError(f"missing field {key!r}", line)
    tokens, tags = obj["tokens"], obj["tags"]
    if not isinstance(tokens, list) or not isinstance(tags, list) or not isinstance(obj["raw"], str):
        raise SchemaError("raw must be a string, tokens and tags lists", line)
    if len(tokens) != len(tags):
        raise SchemaError(f"length mismatch: {len(tokens)} tokens, {len(tags)} tags", line)
    try:
        return TaggedAddress(obj["raw"], tuple(tokens), tuple(tag_from_name(t) for t in tags), obj["country"])
    except SchemaError as exc:
        raise SchemaError(str(exc), line) from None


def load_corpus(path: str | Path) -> list[TaggedAddress]:
    """Read a JSON Lines corpus. Blank lines are skipped; line numbers are 1-based."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None
            records.append(parse_record(obj, lineno))
    return records


def save_corpus(records: Iterable[TaggedAddress], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
