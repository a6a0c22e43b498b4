"""Geometry lexicon: entity types, predicates and functions with triggers.

The lexicon drives two things: counting geometry entities for features, and
the trigger/slot span mapper that turns mention text into logical formulas.
It is loaded from a line-oriented file so the vocabulary can be edited
without touching code:

    type point : "point"
    isTriangle/3 : point,point,point : "triangle"
    fn lengthOf/1 : segment : number : "length"

Trigger phrases are lowercase token sequences; resolution is longest match
first, then file order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

_LABEL_RE = re.compile(r"[A-Z]{1,4}$")
_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?$")

STOPWORDS = frozenset(
    "a an the of in on at to is are was were be been being and or if then "
    "this that these those it its with for as by from we you they he she".split()
)


@dataclass(frozen=True)
class EntityType:
    name: str
    triggers: tuple[tuple[str, ...], ...] = ()


@dataclass(frozen=True)
class PredicateDef:
    name: str
    arity: int
    arg_types: tuple[str, ...]
    triggers: tuple[tuple[str, ...], ...] = ()
    is_function: bool = False
    result_type: str | None = None

    def __post_init__(self) -> None:
        if len(self.arg_types) != self.arity:
            raise ValueError(f"{self.name}: arity {self.arity} vs {len(self.arg_types)} types")


class LexiconError(ValueError):
    pass


@dataclass
class Lexicon:
    entity_types: dict[str, EntityType] = field(default_factory=dict)
    predicates: dict[str, PredicateDef] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._trigger_map: dict[tuple[str, ...], str] = {}
        self._entity_trigger_map: dict[tuple[str, ...], str] = {}
        for p in self.predicates.values():
            for phrase in p.triggers:
                self._trigger_map.setdefault(phrase, p.name)
        for t in self.entity_types.values():
            for phrase in t.triggers:
                self._entity_trigger_map.setdefault(phrase, t.name)
        self._max_phrase = max((len(p) for p in self._trigger_map), default=1)
        self._max_entity_phrase = max((len(p) for p in self._entity_trigger_map), default=1)

    # -- lookup ------------------------------------------------------------

    def predicate(self, name: str) -> PredicateDef:
        try:
            return self.predicates[name]
        except KeyError:
            raise LexiconError(f"unknown predicate {name!r}") from None

    @staticmethod
    def is_label(token: str) -> bool:
        return bool(_LABEL_RE.fullmatch(token))

    @staticmethod
    def is_number(token: str) -> bool:
        return bool(_NUMBER_RE.fullmatch(token))

    def find_triggers(self, tokens: list[str]) -> list[tuple[int, int, str]]:
        """Non-overlapping predicate trigger occurrences (start, end, name)."""
        lowered = [t.lower() for t in tokens]
        hits: list[tuple[int, int, str]] = []
        i = 0
        while i < len(lowered):
            match = None
            for width in range(min(self._max_phrase, len(lowered) - i), 0, -1):
                phrase = tuple(lowered[i : i + width])
                if phrase in self._trigger_map:
                    match = (i, i + width, self._trigger_map[phrase])
                    break
            if match:
                hits.append(match)
                i = match[1]
            else:
                i += 1
        return hits

    def find_entity_nouns(self, tokens: list[str]) -> list[tuple[int, int, str]]:
        """Entity-type noun occurrences (start, end, type name)."""
        lowered = [t.lower() for t in tokens]
        hits: list[tuple[int, int, str]] = []
        i = 0
        while i < len(lowered):
            match = None
            for width in range(min(self._max_entity_phrase, len(lowered) - i), 0, -1):
                phrase = tuple(lowered[i : i + width])
                if phrase in self._entity_trigger_map:
                    match = (i, i + width, self._entity_trigger_map[phrase])
                    break
            if match:
                hits.append(match)
                i = match[1]
            else:
                i += 1
        return hits

    def entity_token_count(self, tokens: list[str]) -> int:
        """Tokens that express geometry entities, relations or constants."""
        covered = [False] * len(tokens)
        for s, e, _ in self.find_triggers(tokens):
            for k in range(s, e):
                covered[k] = True
        for s, e, _ in self.find_entity_nouns(tokens):
            for k in range(s, e):
                covered[k] = True
        for k, tok in enumerate(tokens):
            if self.is_label(tok) or self.is_number(tok):
                covered[k] = True
        return sum(covered)


def _parse_triggers(raw: str) -> tuple[tuple[str, ...], ...]:
    phrases = []
    for part in raw.split("|"):
        part = part.strip()
        if not part:
            continue
        if part.startswith('"') and part.endswith('"'):
            part = part[1:-1]
        words = tuple(part.lower().split())
        if words:
            phrases.append(words)
    return tuple(phrases)


def parse_lexicon(text: str) -> Lexicon:
    entity_types: dict[str, EntityType] = {}
    predicates: dict[str, PredicateDef] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("type "):
                body = line[5:]
                parts = [p.strip() for p in body.split(":", 1)]
                name = parts[0]
                triggers = _parse_triggers(parts[1]) if len(parts) > 1 else ()
                if name in entity_types:
                    raise LexiconError(f"duplicate entity type {name!r}")
                entity_types[name] = EntityType(name, triggers)
                continue
            is_function = line.startswith("fn ")
            if is_function:
                line = line[3:]
            head, _, rest = line.partition(":")
            name, _, arity = head.strip().partition("/")
            if is_function:
                argpart, _, tail = rest.partition(":")
                result, _, trigpart = tail.partition(":")
                result_type = result.strip()
            else:
                argpart, _, trigpart = rest.partition(":")
                result_type = None
            arg_types = tuple(t.strip() for t in argpart.split(",") if t.strip())
            triggers = _parse_triggers(trigpart)
            if name in predicates:
                raise LexiconError(f"duplicate predicate {name!r}")
            predicates[name] = PredicateDef(
                name=name.strip(),
                arity=int(arity),
                arg_types=arg_types,
                triggers=triggers,
                is_function=is_function,
                result_type=result_type,
            )
        except LexiconError:
            raise
        except (ValueError, IndexError) as exc:
            raise LexiconError(f"lexicon line {lineno}: {raw!r} ({exc})") from exc
    return Lexicon(entity_types=entity_types, predicates=predicates)


def load_lexicon(path: str | Path) -> Lexicon:
    return parse_lexicon(Path(path).read_text(encoding="utf-8"))


def default_lexicon() -> Lexicon:
    data = resources.files("axiomharvest").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    return parse_lexicon(data)
