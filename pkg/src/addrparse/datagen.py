"""Deterministic synthetic multinational address generator.

Five address patterns are fixed (see ``PATTERNS``). Lexicons supply the
words for each tag and are either listed explicitly in a config file or
synthesized from a script's syllable inventory. Every record is drawn with
its own derived RNG, so the output depends only on the config and seed.
"""

from __future__ import annotations

import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import (
    SCRIPTS,
    AddressPattern,
    CountryProfile,
    FieldSpec,
    Tag,
    TaggedAddress,
)
from .errors import ConfigError, IncompatiblePattern

T = Tag


def _p(pid: int, *fields: FieldSpec) -> AddressPattern:
    return AddressPattern(pid, fields)


_NUM = FieldSpec(T.StreetNumber, 1, 1)
_STREET = FieldSpec(T.StreetName, 1, 3)
_UNIT = FieldSpec(T.Unit, 2, 2, optional=True)
_ORIENT = FieldSpec(T.Orientation, 1, 1, optional=True)
_MUNI = FieldSpec(T.Municipality, 1, 2)
_PROV = FieldSpec(T.Province, 1, 2)
_POSTAL = FieldSpec(T.PostalCode, 1, 2)
_GD = FieldSpec(T.GeneralDelivery, 2, 3, optional=True)

PATTERNS: dict[int, AddressPattern] = {
    # number street municipality province postal  (e.g. Canada, USA)
    1: _p(1, _NUM, _UNIT, _STREET, _ORIENT, _MUNI, _PROV, _POSTAL, _GD),
    # street number postal municipality province   (e.g. Germany, Poland)
    2: _p(2, _STREET, _ORIENT, _NUM, _UNIT, _POSTAL, _MUNI, _PROV, _GD),
    # number street postal municipality            (e.g. France)
    3: _p(3, _NUM, _UNIT, _STREET, _ORIENT, _POSTAL, _MUNI, _GD),
    # postal municipality street number            (inverse of pattern 1)
    4: _p(4, _GD, _POSTAL, _MUNI, _STREET, _ORIENT, _NUM, _UNIT),
    # province municipality street number postal   (e.g. South Korea)
    5: _p(5, _PROV, _MUNI, _STREET, _ORIENT, _NUM, _UNIT, _POSTAL, _GD),
}

DEFAULT_OPTIONAL_PROBABILITY = 0.3

_ALPHABETS = {
    "latin": {
        "consonants": "bcdfghjklmnprstvwz",
        "vowels": "aeiou",
        "upper": "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    },
    "cyrillic-like": {
        "consonants": "бвгджзклмнпрстфхцчш",
        "vowels": "аеиоуыэюя",
        "upper": "АБВГДЕЖЗИКЛМНОПРСТУФХЦЧШ",
    },
    # Precomposed Hangul syllables, U+AC00..U+D7A3; no case, so no postal letters.
    "hangul-like": {"syllables": (0xAC00, 0xD7A3), "upper": ""},
}


@dataclass(frozen=True)
class Lexicon:
    lexicon_id: str
    script: str
    street_names: tuple[str, ...]
    street_types: tuple[str, ...]
    municipalities: tuple[str, ...]
    provinces: tuple[str, ...]
    unit_designators: tuple[str, ...]
    orientations: tuple[str, ...]
    general_delivery: tuple[str, ...]
    postal_format: str = "00000"
    number_range: tuple[int, int] = (1, 9999)
    street_type_first: bool = True

    _POOLS = ("street_names", "street_types", "municipalities", "provinces",
              "unit_designators", "orientations", "general_delivery")

    def __post_init__(self) -> None:
        for name in self._POOLS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "number_range", tuple(self.number_range))

    def validate(self) -> None:
        for name in self._POOLS:
            if name == "street_types":
                continue
            pool = getattr(self, name)
            if not pool:
                raise ConfigError(f"lexicon {self.lexicon_id}: empty pool {name!r}")
            for word in pool:
                if not word or any(ch.isspace() for ch in word):
                    raise ConfigError(f"lexicon {self.lexicon_id}: bad word {word!r} in {name!r}")
        fmt_tokens = self.postal_format.split()
        if not fmt_tokens or len(fmt_tokens) > _POSTAL.max_tokens:
            raise ConfigError(f"lexicon {self.lexicon_id}: postal_format must have 1-{_POSTAL.max_tokens} tokens")
        if any(ch not in "A0 " for ch in self.postal_format):
            raise ConfigError(f"lexicon {self.lexicon_id}: postal_format may only use 'A', '0' and spaces")
        if "A" in self.postal_format and not _ALPHABETS[self.script]["upper"]:
            raise ConfigError(f"lexicon {self.lexicon_id}: script {self.script} has no postal letters")
        lo, hi = self.number_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"lexicon {self.lexicon_id}: bad number_range {self.number_range}")

    def to_dict(self) -> dict:
        out = {"script": self.script}
        for name in self._POOLS:
            out[name] = list(getattr(self, name))
        out.update(postal_format=self.postal_format, number_range=list(self.number_range),
                   street_type_first=self.street_type_first)
        return out


def _syllable_inventory(script: str, rng: random.Random, size: int) -> list[str]:
    alpha = _ALPHABETS[script]
    if "syllables" in alpha:
        lo, hi = alpha["syllables"]
        return [chr(c) for c in rng.sample(range(lo, hi + 1), size)]
    cons, vows = alpha["consonants"], alpha["vowels"]
    every = sorted({c + v for c in cons for v in vows} | {c + v + k for c in cons for v in vows for k in cons[:6]})
    return rng.sample(every, min(size, len(every)))


def _make_words(rng: random.Random, inventory: Sequence[str], count: int, syllables: tuple[int, int],
                capitalize: bool, taken: set[str]) -> list[str]:
    words: list[str] = []
    attempts = 0
    while len(words) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise ConfigError("syllable inventory too small for requested pool size")
        word = "".join(rng.choice(inventory) for _ in range(rng.randint(*syllables)))
        if capitalize:
            word = word[0].upper() + word[1:]
        if word in taken:
            continue
        taken.add(word)
        words.append(word)
    return words


def synthesize_lexicon(lexicon_id: str, script: str, seed: int, *, sister_of: Lexicon | None = None,
                       n_street_names: int = 80, n_municipalities: int = 40, n_provinces: int = 12,
                       postal_format: str | None = None) -> Lexicon:
    """Build a lexicon of pseudo-words for ``script``.

    A sister lexicon keeps the function words (street types, unit
    designators, orientations, delivery words) and number/postal formats of
    ``sister_of`` and only draws new proper names, which models a new
    country sharing a language with a known one.
    """
    if script not in SCRIPTS:
        raise ConfigError(f"unknown script {script!r}")
    if sister_of is not None and sister_of.script != script:
        raise ConfigError(f"sister lexicon must share script {sister_of.script!r}")
    rng = random.Random(f"lexicon/{script}/{seed}")
    inventory = _syllable_inventory(script, rng, 60)
    cap = script != "hangul-like"
    taken: set[str] = set()
    if sister_of is not None:
        for name in ("street_types", "unit_designators", "orientations", "general_delivery"):
            taken.update(getattr(sister_of, name))
        function_words = dict(
            street_types=sister_of.street_types,
            unit_designators=sister_of.unit_designators,
            orientations=sister_of.orientations,
            general_delivery=sister_of.general_delivery,
            postal_format=sister_of.postal_format if postal_format is None else postal_format,
            number_range=sister_of.number_range,
            street_type_first=sister_of.street_type_first,
        )
    else:
        if postal_format is None:
            postal_format = rng.choice(["A0A 0A0", "00000", "000 00", "0000"]) if cap else rng.choice(["00000", "000000"])
        function_words = dict(
            street_types=_make_words(rng, inventory, 5, (1, 2), False, taken),
            unit_designators=_make_words(rng, inventory, 3, (1, 1), False, taken),
            orientations=_make_words(rng, inventory, 4, (1, 2), cap, taken),
            general_delivery=_make_words(rng, inventory, 3, (1, 2), False, taken),
            postal_format=postal_format,
            number_range=(1, rng.choice([999, 9999])),
            street_type_first=rng.random() < 0.5,
        )
    lex = Lexicon(
        lexicon_id=lexicon_id,
        script=script,
        street_names=_make_words(rng, inventory, n_street_names, (2, 3), cap, taken),
        municipalities=_make_words(rng, inventory, n_municipalities, (2, 3), cap, taken),
        provinces=_make_words(rng, inventory, n_provinces, (2, 3), cap, taken),
        **function_words,
    )
    lex.validate()
    return lex


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    countries: tuple[CountryProfile, ...]
    samples_per_country: int
    lexicons: dict[str, Lexicon] = field(default_factory=dict)
    optional_probability: float = DEFAULT_OPTIONAL_PROBABILITY

    def __post_init__(self) -> None:
        object.__setattr__(self, "countries", tuple(self.countries))

    def validate(self) -> None:
        if self.samples_per_country < 1:
            raise ConfigError("samples_per_country must be >= 1")
        if not self.countries:
            raise ConfigError("countries: at least one country is required")
        if not 0.0 <= self.optional_probability <= 1.0:
            raise ConfigError("optional_probability must lie in [0, 1]")
        codes = [c.code for c in self.countries]
        if len(set(codes)) != len(codes):
            raise ConfigError("countries: duplicate country code")
        for c in self.countries:
            if c.lexicon_id not in self.lexicons:
                raise ConfigError(f"countries[{c.code}].lexicon: unknown lexicon {c.lexicon_id!r}")
            if self.lexicons[c.lexicon_id].script != c.script:
                raise ConfigError(f"countries[{c.code}].script: does not match lexicon {c.lexicon_id!r}")
            for pid in c.pattern_ids:
                if pid not in PATTERNS:
                    raise ConfigError(f"countries[{c.code}].patterns: unknown pattern {pid}")
        for lex in self.lexicons.values():
            lex.validate()

    def country(self, code: str) -> CountryProfile:
        for c in self.countries:
            if c.code == code:
                return c
        raise KeyError(code)


# -- config files ---------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing field {key!r}")
    return obj[key]


def config_from_dict(data: dict, seed: int | None = None) -> GeneratorConfig:
    """Build a config from its declarative JSON form.

    Schema::

        {"seed": int, "samples_per_country": int, "optional_probability": float?,
         "lexicons": {id: {"synthesize": {"script", "seed", "sister_of"?, "postal_format"?}}
                      | {"script", "street_names", "street_types", "municipalities",
                         "provinces", "unit_designators", "orientations",
                         "general_delivery", "postal_format"?, "number_range"?,
                         "street_type_first"?}},
         "countries": [{"code", "patterns": [int], "lexicon", "script"?}]}
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    lex_specs = _require(data, "lexicons", "config")
    if not isinstance(lex_specs, dict):
        raise ConfigError("lexicons: must be an object")
    lexicons: dict[str, Lexicon] = {}
    pending = dict(lex_specs)
    # sister lexicons may reference lexicons declared later in the file
    while pending:
        progressed = False
        for lid, spec in list(pending.items()):
            where = f"lexicons.{lid}"
            if not isinstance(spec, dict):
                raise ConfigError(f"{where}: must be an object")
            if "synthesize" in spec:
                syn = spec["synthesize"]
                sister = syn.get("sister_of")
                if sister is not None and sister not in lexicons:
                    if sister not in pending:
                        raise ConfigError(f"{where}.sister_of: unknown lexicon {sister!r}")
                    continue
                try:
                    lexicons[lid] = synthesize_lexicon(
                        lid, _require(syn, "script", where), int(_require(syn, "seed", where)),
                        sister_of=lexicons.get(sister) if sister else None,
                        postal_format=syn.get("postal_format"),
                    )
                except ConfigError as exc:
                    raise ConfigError(f"{where}: {exc}") from None
            else:
                kwargs = {k: spec[k] for k in spec if k in Lexicon.__dataclass_fields__}
                try:
                    lexicons[lid] = Lexicon(lexicon_id=lid, **kwargs)
                except TypeError as exc:
                    raise ConfigError(f"{where}: {exc}") from None
            del pending[lid]
            progressed = True
        if not progressed:
            raise ConfigError("lexicons: circular sister_of references")

    countries = []
    for i, c in enumerate(_require(data, "countries", "config")):
        where = f"countries[{i}]"
        lid = _require(c, "lexicon", where)
        script = c.get("script", lexicons[lid].script if lid in lexicons else "latin")
        try:
            countries.append(CountryProfile(_require(c, "code", where), tuple(_require(c, "patterns", where)),
                                            lid, script))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        cfg = GeneratorConfig(
            seed=int(data["seed"]) if seed is None else int(seed),
            countries=tuple(countries),
            samples_per_country=int(_require(data, "samples_per_country", "config")),
            lexicons=lexicons,
            optional_probability=float(data.get("optional_probability", DEFAULT_OPTIONAL_PROBABILITY)),
        )
    except KeyError:
        raise ConfigError("config: missing field 'seed'") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    cfg.validate()
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> GeneratorConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    return config_from_dict(data, seed=seed)


# -- generation -----------------------------------------------------------

def _number(rng: random.Random, lex: Lexicon) -> str:
    return str(rng.randint(*lex.number_range))


def _postal(rng: random.Random, lex: Lexicon) -> list[str]:
    upper = _ALPHABETS[lex.script]["upper"]
    chars = [rng.choice(upper) if ch == "A" else str(rng.randint(0, 9)) if ch == "0" else ch
             for ch in lex.postal_format]
    return "".join(chars).split()


def _field_tokens(tag: Tag, n: int, rng: random.Random, lex: Lexicon) -> list[str]:
    if tag is T.StreetNumber:
        return [_number(rng, lex)]
    if tag is T.StreetName:
        if n >= 2 and lex.street_types:
            names = [rng.choice(lex.street_names) for _ in range(n - 1)]
            kind = rng.choice(lex.street_types)
            return [kind] + names if lex.street_type_first else names + [kind]
        return [rng.choice(lex.street_names) for _ in range(n)]
    if tag is T.Unit:
        return [rng.choice(lex.unit_designators)] + [str(rng.randint(1, 999)) for _ in range(n - 1)]
    if tag is T.Municipality:
        return [rng.choice(lex.municipalities) for _ in range(n)]
    if tag is T.Province:
        return [rng.choice(lex.provinces) for _ in range(n)]
    if tag is T.PostalCode:
        return _postal(rng, lex)
    if tag is T.Orientation:
        return [rng.choice(lex.orientations) for _ in range(n)]
    if tag is T.GeneralDelivery:
        return [rng.choice(lex.general_delivery) for _ in range(n - 1)] + [str(rng.randint(1, 9999))]
    raise ValueError(f"cannot generate tokens for {tag}")


def generate_record(rng: random.Random, country: CountryProfile, lex: Lexicon,
                    optional_probability: float = DEFAULT_OPTIONAL_PROBABILITY) -> TaggedAddress:
    pattern = PATTERNS[rng.choice(country.pattern_ids)]
    pairs: list[tuple[str, Tag]] = []
    for spec in pattern.field_order:
        if spec.optional and rng.random() >= optional_probability:
            continue
        n = rng.randint(spec.min_tokens, spec.max_tokens)
        pairs.extend((tok, spec.tag) for tok in _field_tokens(spec.tag, n, rng, lex))
    return TaggedAddress.from_pairs(pairs, country.code)


def record_rng(seed: int, country: str, index: int) -> random.Random:
    return random.Random(f"{seed}/{country}/{index}")


def generate(config: GeneratorConfig) -> list[TaggedAddress]:
    """Generate ``samples_per_country`` records per country, in config order."""
    config.validate()
    out = []
    for country in config.countries:
        lex = config.lexicons[country.lexicon_id]
        for i in range(config.samples_per_country):
            rng = record_rng(config.seed, country.code, i)
            out.append(generate_record(rng, country, lex, config.optional_probability))
    return out


def pattern_of(addr: TaggedAddress, candidates: Sequence[int] = tuple(PATTERNS)) -> list[int]:
    """Pattern ids whose field order the address's tag sequence follows."""
    return [pid for pid in candidates if PATTERNS[pid].follows(addr.tags)]


def reorder_to_pattern(addr: TaggedAddress, target: AddressPattern) -> TaggedAddress:
    """Permute tag blocks of ``addr`` into ``target``'s field order.

    Tokens keep their relative order within a tag; the multiset of
    (token, tag) pairs is unchanged.
    """
    blocks: dict[Tag, list[str]] = defaultdict(list)
    for tok, tag in zip(addr.tokens, addr.tags):
        blocks[tag].append(tok)
    missing = [t.value for t in blocks if t not in target.tags]
    if missing:
        raise IncompatiblePattern(f"pattern {target.id} has no field for {', '.join(missing)}")
    pairs = [(tok, tag) for tag in target.tags for tok in blocks.get(tag, ())]
    return TaggedAddress.from_pairs(pairs, addr.country)


def split(corpus: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Shuffle with ``seed`` and cut into ceil(train_fraction * n) / remainder."""
    n = len(corpus)
    if n == 0:
        raise ValueError("cannot split an empty corpus")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    frac = Fraction(train_fraction).limit_denominator(10**6)
    n_train = math.ceil(n * frac)
    order = np.random.default_rng(seed).permutation(n)
    return [corpus[i] for i in order[:n_train]], [corpus[i] for i in order[n_train:]]
