"""Candidate-ranking analogy evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from . import gat, textenc
from .lexicon import EmbeddingTable
from .model import RelationModel

Pair = tuple[str, str]


class AnalogyError(ValueError):
    pass


@dataclass(frozen=True)
class AnalogyQuestion:
    stem: Pair
    choices: tuple[Pair, ...]
    answer: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise AnalogyError("a question needs at least 2 choices")
        if not 0 <= self.answer < len(self.choices):
            raise AnalogyError(f"answer {self.answer} out of range for {len(self.choices)} choices")


def _pair(x) -> Pair:
    if not isinstance(x, (list, tuple)) or len(x) != 2 or not all(isinstance(w, str) for w in x):
        raise AnalogyError(f"expected a [head, tail] pair, got {x!r}")
    return (x[0], x[1])


def parse_analogy_dataset(source: TextIO) -> list[AnalogyQuestion]:
    questions = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            q = AnalogyQuestion(_pair(rec["stem"]), tuple(_pair(c) for c in rec["choice"]), int(rec["answer"]))
        except AnalogyError as exc:
            raise AnalogyError(f"line {lineno}: {exc}") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise AnalogyError(f"line {lineno}: malformed question ({exc})") from None
        questions.append(q)
    return questions


# ------------------------------------------------------------ representations

def plain_mask_representation(model: RelationModel, pair: Pair) -> np.ndarray:
    """``h_m`` from the text encoder alone, with no graph machinery involved."""
    with ad.no_grad():
        h_m = textenc.encode(model.encoder, model.prompt(*pair), model.vocab)[0]
    return h_m.value[0].copy()


def graph_representation(model: RelationModel, pair: Pair) -> np.ndarray | None:
    """Projected virtual-node state ``h_g'``, or None on the degenerate path."""
    sub = model.pair_subgraph(*pair)
    if sub is None:
        return None
    with ad.no_grad():
        h_g, _ = gat.encode_pair(model.gat, sub, model.node_init)
        return gat.project(model.gat, h_g).value[0].copy()


def relation_representation(model: RelationModel, pair: Pair) -> np.ndarray:
    """Relation vector for ``pair`` according to ``model.score_with``.

    The default scores with ``h_m``. Pairs where either word has an empty
    sememe set never touch the graph; in ``h_g`` mode they fall back to
    ``h_m`` and in ``concat`` mode the graph half is zero.
    """
    h_m = plain_mask_representation(model, pair)
    if model.score_with == "h_m":
        return h_m
    h_g = graph_representation(model, pair)
    if model.score_with == "h_g":
        return h_m if h_g is None else h_g
    return np.concatenate([h_m, np.zeros_like(h_m) if h_g is None else h_g])


# -------------------------------------------------------------------- ranking

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def rank_choices(stem: np.ndarray | None, choices: Sequence[np.ndarray | None]) -> tuple[int, list[float]]:
    """Argmax of cosine similarity; ties go to the lowest index, missing vectors score -inf."""
    scores = []
    for c in choices:
        if stem is None or c is None:
            scores.append(float("-inf"))
        else:
            scores.append(cosine(stem, c))
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best, scores


Representer = Callable[[Pair], "np.ndarray | None"]


def _representer(model) -> Representer:
    if isinstance(model, RelationModel):
        return lambda pair: relation_representation(model, pair)
    if callable(model):
        return model
    raise TypeError("model must be a RelationModel or a callable pair -> vector")


def answer_question(model, question: AnalogyQuestion) -> tuple[int, list[float]]:
    represent = _representer(model)
    return rank_choices(represent(question.stem), [represent(c) for c in question.choices])


@dataclass
class QuestionRecord:
    chosen: int
    gold: int
    scores: list[float]

    @property
    def correct(self) -> bool:
        return self.chosen == self.gold


@dataclass
class EvalReport:
    dataset: str
    accuracy: float
    n: int
    per_question: list[QuestionRecord] = field(default_factory=list)
    coverage: float | None = None

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "accuracy": self.accuracy,
            "n": self.n,
            "per_question": [asdict(r) for r in self.per_question],
        }
        if self.coverage is not None:
            out["coverage"] = self.coverage
        return out

    def to_json(self) -> str:
        # -inf scores (uncovered words) are written as null
        def clean(x):
            if isinstance(x, float) and not np.isfinite(x):
                return None
            if isinstance(x, list):
                return [clean(v) for v in x]
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            return x

        return json.dumps(clean(self.to_dict()), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        records = [
            QuestionRecord(r["chosen"], r["gold"], [float("-inf") if s is None else s for s in r["scores"]])
            for r in d["per_question"]
        ]
        return cls(d["dataset"], d["accuracy"], d["n"], records, d.get("coverage"))

    def tsv_row(self) -> str:
        return f"{self.dataset}\t{self.n}\t{self.accuracy:.4f}"


def evaluate(model, dataset: Sequence[AnalogyQuestion], name: str = "dataset") -> EvalReport:
    if not dataset:
        raise AnalogyError("empty analogy dataset")
    represent = _representer(model)
    cache: dict[Pair, np.ndarray | None] = {}

    def cached(pair: Pair):
        if pair not in cache:
            cache[pair] = represent(pair)
        return cache[pair]

    records = []
    for q in dataset:
        chosen, scores = rank_choices(cached(q.stem), [cached(c) for c in q.choices])
        records.append(QuestionRecord(chosen, q.answer, scores))
    correct = sum(r.correct for r in records)
    return EvalReport(name, correct / len(records), len(records), records)


# ------------------------------------------------------------------- baseline

class OffsetRepresenter:
    """``embed(tail) - embed(head)``; None when either word is missing."""

    def __init__(self, embeddings: EmbeddingTable, casefold: bool = True):
        self.embeddings = embeddings
        self.casefold = casefold
        self.lookups = 0
        self.misses = 0

    def _vec(self, word: str):
        rows = self.embeddings.rows
        if word in rows:
            return rows[word]
        if self.casefold and word.casefold() in rows:
            return rows[word.casefold()]
        return None

    def __call__(self, pair: Pair):
        h, t = self._vec(pair[0]), self._vec(pair[1])
        self.lookups += 1
        if h is None or t is None:
            self.misses += 1
            return None
        return t - h

    @property
    def coverage(self) -> float:
        return 1.0 if self.lookups == 0 else 1.0 - self.misses / self.lookups


def vector_offset_baseline(embeddings: EmbeddingTable, dataset: Sequence[AnalogyQuestion],
                           name: str = "dataset") -> EvalReport:
    rep = OffsetRepresenter(embeddings)
    report = evaluate(rep, dataset, name)
    report.coverage = rep.coverage
    return report
