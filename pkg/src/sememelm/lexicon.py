"""Sememe lexicon, relation triples and embedding tables.

Words decompose into senses, and each sense into a set of sememes. The
sememe vocabulary and the relation-type vocabulary are interned to dense
integer ids in first-seen order so that two parses of the same bytes give
the same ids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO

import numpy as np

logger = logging.getLogger(__name__)

INTERSECTION = "intersection"
UNION = "union"


class LexiconError(ValueError):
    """Malformed lexicon, triple or embedding input."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True)
class SememeInventory:
    sememes: tuple[str, ...] = ()
    relation_types: tuple[str, ...] = ()
    _sememe_index: Mapping[str, int] = field(default=None, repr=False, compare=False)
    _relation_index: Mapping[str, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        sememe_index = {label: i for i, label in enumerate(self.sememes)}
        relation_index = {label: i for i, label in enumerate(self.relation_types)}
        if len(sememe_index) != len(self.sememes):
            raise LexiconError("duplicate sememe label in inventory")
        if len(relation_index) != len(self.relation_types):
            raise LexiconError("duplicate relation-type label in inventory")
        object.__setattr__(self, "_sememe_index", sememe_index)
        object.__setattr__(self, "_relation_index", relation_index)

    def __len__(self) -> int:
        return len(self.sememes)

    def sememe_id(self, label: str) -> int:
        return self._sememe_index[label]

    def relation_id(self, label: str) -> int:
        return self._relation_index[label]

    def has_sememe(self, label: str) -> bool:
        return label in self._sememe_index

    def extended(self, sememes: Iterable[str] = (), relation_types: Iterable[str] = ()) -> "SememeInventory":
        """Return a new inventory with unseen labels appended in order."""
        new_sememes = list(self.sememes)
        seen = set(self._sememe_index)
        for label in sememes:
            if label not in seen:
                seen.add(label)
                new_sememes.append(label)
        new_relations = list(self.relation_types)
        seen = set(self._relation_index)
        for label in relation_types:
            if label not in seen:
                seen.add(label)
                new_relations.append(label)
        return SememeInventory(tuple(new_sememes), tuple(new_relations))


@dataclass(frozen=True)
class WordEntry:
    word: str
    senses: tuple[frozenset[int], ...]


@dataclass(frozen=True)
class RelationTriple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class EmbeddingTable:
    dimension: int
    rows: Mapping[str, np.ndarray]

    def __contains__(self, label: str) -> bool:
        return label in self.rows

    def __len__(self) -> int:
        return len(self.rows)

    def lookup(self, label: str) -> np.ndarray:
        """Vector for ``label``; raises ``KeyError`` for absent labels."""
        return self.rows[label]


def _source_name(source) -> str | None:
    name = getattr(source, "name", None)
    return name if isinstance(name, str) else None


def parse_lexicon(source: TextIO, inventory: SememeInventory | None = None):
    """Parse a JSONL lexicon into ``(inventory, {word: WordEntry})``.

    Each non-blank line is ``{"word": str, "senses": [[sememe, ...], ...]}``.
    Sememes are interned in the order they are first mentioned, after any
    labels already in ``inventory``.
    """
    name = _source_name(source)
    records = []
    labels: list[str] = []
    seen_words = set()
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LexiconError(f"malformed JSON: {exc.msg}", lineno, name) from None
        if not isinstance(record, dict) or not isinstance(record.get("word"), str):
            raise LexiconError("record must be an object with a string 'word'", lineno, name)
        word = record["word"]
        senses = record.get("senses")
        if not isinstance(senses, list) or not senses:
            raise LexiconError(f"word {word!r} has an empty sense list", lineno, name)
        for sense in senses:
            if not isinstance(sense, list) or not sense:
                raise LexiconError(f"word {word!r} has an empty sense", lineno, name)
            if not all(isinstance(s, str) and s for s in sense):
                raise LexiconError(f"word {word!r} has a non-string sememe", lineno, name)
            labels.extend(sense)
        if word in seen_words:
            raise LexiconError(f"duplicate word {word!r}", lineno, name)
        seen_words.add(word)
        records.append((word, senses))

    inventory = (inventory or SememeInventory()).extended(labels)
    lexicon = {}
    for word, senses in records:
        lexicon[word] = WordEntry(
            word, tuple(frozenset(inventory.sememe_id(s) for s in sense) for sense in senses)
        )
    return inventory, lexicon


def serialize_lexicon(inventory: SememeInventory, lexicon: Mapping[str, WordEntry]) -> str:
    lines = []
    for entry in lexicon.values():
        # sememe ids are first-seen ordered, so sorting by id reproduces mention order
        senses = [[inventory.sememes[i] for i in sorted(sense)] for sense in entry.senses]
        lines.append(json.dumps({"word": entry.word, "senses": senses}, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def parse_relation_triples(source: TextIO, inventory: SememeInventory | None = None):
    """Parse ``head<TAB>relation<TAB>tail`` lines.

    Returns ``(inventory, triples)``. Sememes and relation types not yet in
    ``inventory`` are appended to it: triples may mention sememes that no
    word uses.
    """
    name = _source_name(source)
    raw = []
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise LexiconError(f"expected 3 tab-separated fields, got {len(fields)}", lineno, name)
        if any(not f.strip() for f in fields):
            raise LexiconError("empty field", lineno, name)
        raw.append(tuple(f.strip() for f in fields))

    sememes = []
    relations = []
    for head, rel, tail in raw:
        sememes.extend((head, tail))
        relations.append(rel)
    inventory = (inventory or SememeInventory()).extended(sememes, relations)
    triples = [
        RelationTriple(inventory.sememe_id(h), inventory.relation_id(r), inventory.sememe_id(t))
        for h, r, t in raw
    ]
    return inventory, triples


def serialize_triples(inventory: SememeInventory, triples: Iterable[RelationTriple]) -> str:
    return "".join(
        f"{inventory.sememes[t.head]}\t{inventory.relation_types[t.relation]}\t{inventory.sememes[t.tail]}\n"
        for t in triples
    )


def sememe_set(entry: WordEntry, mode: str = INTERSECTION) -> frozenset[int]:
    """Sememes shared by every sense of ``entry``.

    An empty result is a normal value: the caller skips the graph for that
    word. ``mode="union"`` pools the senses instead.
    """
    if not entry.senses:
        raise LexiconError(f"word {entry.word!r} has no senses")
    if mode == INTERSECTION:
        return frozenset.intersection(*entry.senses)
    if mode == UNION:
        return frozenset.union(*entry.senses)
    raise ValueError(f"unknown sememe-set mode {mode!r}")


def load_embeddings(source: TextIO) -> EmbeddingTable:
    """Read a GloVe-style text file: ``label v1 ... vD`` per line."""
    name = _source_name(source)
    rows: dict[str, np.ndarray] = {}
    dimension = None
    for lineno, line in enumerate(source, start=1):
        parts = line.split()
        if not parts:
            continue
        label, values = parts[0], parts[1:]
        if not values:
            raise LexiconError(f"label {label!r} has no values", lineno, name)
        if dimension is None:
            dimension = len(values)
        elif len(values) != dimension:
            raise LexiconError(
                f"dimension mismatch: expected {dimension}, got {len(values)}", lineno, name
            )
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError:
            raise LexiconError(f"non-numeric token in row {label!r}", lineno, name) from None
        if not np.all(np.isfinite(vec)):
            raise LexiconError(f"non-finite value in row {label!r}", lineno, name)
        if label in rows:
            raise LexiconError(f"duplicate label {label!r}", lineno, name)
        vec.setflags(write=False)
        rows[label] = vec
    return EmbeddingTable(dimension or 0, rows)


def node_init_matrix(inventory: SememeInventory, table: EmbeddingTable, dim: int | None = None,
                     seed: int = 0, scale: float = 0.05) -> np.ndarray:
    """Initial node states for every sememe in ``inventory``.

    Sememes missing from ``table`` are drawn from a seeded uniform
    distribution on ``[-scale, scale]`` and logged.
    """
    if dim is None:
        dim = table.dimension
    if table.rows and table.dimension != dim:
        raise LexiconError(f"embedding dimension {table.dimension} does not match graph dimension {dim}")
    rng = np.random.default_rng(seed)
    out = np.empty((len(inventory), dim))
    missing = []
    for i, label in enumerate(inventory.sememes):
        if label in table:
            out[i] = table.rows[label]
        else:
            out[i] = rng.uniform(-scale, scale, size=dim)
            missing.append(label)
    if missing:
        logger.info("imputed %d sememe vectors absent from embeddings: %s", len(missing),
                    ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else ""))
    return out


def format_vector(label: str, vec: Iterable[float], precision: int | None = None) -> str:
    if precision is None:
        vals = " ".join(repr(float(v)) for v in vec)
    else:
        vals = " ".join(f"{v:.{precision}f}" for v in vec)
    return f"{label} {vals}"
