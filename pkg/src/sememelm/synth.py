"""Seeded synthetic corpus for end-to-end runs.

Each of ``n_relations`` relations owns a group of head sememes and a group
of tail sememes, joined by edges of one relation type. A word pair's label
is the type of the edge running from the head word's sememes to the tail
word's sememes, so every analogy answer can be read off the graph.
Some words get senses with no shared sememe and exercise the degenerate
path; a few sememes are left out of the vector file to exercise imputation.
"""

from __future__ import annotations

import io
import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .training import load_relation_data

FILES = ("lexicon.jsonl", "triples.tsv", "sememe_vectors.txt", "relations.jsonl", "analogy.jsonl")


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_relations: int = 13
    sememes_per_side: int = 3
    words_per_sememe: int = 2
    n_misc: int = 12
    n_noise_edges: int = 24
    positives_per_relation: int = 12
    negatives_per_relation: int = 13
    n_questions: int = 200
    n_choices: int = 4
    dim: int = 300
    vector_std: float = 0.3
    # sememes of one relation side scatter this much around a shared centroid
    cluster_spread: float = 0.5


def _sememe(k: int, side: str, i: int) -> str:
    return f"sem{side}{k}_{i}"


def _word(k: int, side: str, i: int, j: int) -> str:
    return f"{'hw' if side == 'h' else 'tw'}{k}{chr(ord('a') + i)}{j}"


def generate(seed: int = 1, spec: SynthSpec = SynthSpec()) -> dict[str, str]:
    """Return ``{filename: content}`` for the synthetic corpus."""
    rng = random.Random(seed)
    nrng = np.random.default_rng(seed)
    R, S, J = spec.n_relations, spec.sememes_per_side, spec.words_per_sememe
    misc = [f"misc{m}" for m in range(spec.n_misc)]

    # lexicon: one core sememe per word; the last word of the last sememe
    # in each group has senses sharing nothing
    lex_lines = []
    words = {(k, side): [] for k in range(R) for side in "ht"}
    for k in range(R):
        for side in "ht":
            for i in range(S):
                core = _sememe(k, side, i)
                for j in range(J):
                    w = _word(k, side, i, j)
                    a, b, c = rng.sample(misc, 3)
                    if i == S - 1 and j == J - 1:
                        senses = [[core, a], [b, c]]
                    elif rng.random() < 0.5:
                        senses = [[core, a], [core, b]]
                    else:
                        senses = [[core]]
                    lex_lines.append(json.dumps({"word": w, "senses": senses}))
                    words[(k, side)].append(w)

    triples = []
    for k in range(R):
        for i in range(S):
            for i2 in range(S):
                triples.append((_sememe(k, "h", i), f"rel{k}", _sememe(k, "t", i2)))
    # noise edges stay on one side, so no word pair picks up a second label
    for n in range(spec.n_noise_edges):
        side = rng.choice("ht")
        k1, k2 = rng.sample(range(R), 2)
        src = _sememe(k1, side, rng.randrange(S))
        dst = _sememe(k2, side, rng.randrange(S))
        triples.append((src, f"noise{n % 2}", dst))

    all_sememes = [_sememe(k, side, i) for k in range(R) for side in "ht" for i in range(S)] + misc
    missing = {_sememe(0, "h", 0), misc[0], misc[1]}
    centroids = {(k, side): nrng.normal(0.0, spec.vector_std, spec.dim) for k in range(R) for side in "ht"}
    vec_lines = []
    for s in all_sememes:
        vec = nrng.normal(0.0, spec.vector_std, spec.dim)
        if not s.startswith("misc"):
            k, side = int(s[4:].split("_")[0]), s[3]
            vec = centroids[(k, side)] + spec.cluster_spread * vec
        if s not in missing:
            vec_lines.append(s + " " + " ".join(f"{v:.5f}" for v in vec))

    rel_lines = []
    for k in range(R):
        grid = [(h, t) for h in words[(k, "h")] for t in words[(k, "t")]]
        pos = rng.sample(grid, spec.positives_per_relation)
        neg = set()
        while len(neg) < spec.negatives_per_relation:
            j, m = rng.sample(range(R), 2)
            neg.add((rng.choice(words[(j, "h")]), rng.choice(words[(m, "t")])))
        pairs = [{"head": h, "tail": t, "score": round(rng.uniform(70, 100), 2)} for h, t in pos]
        pairs += [{"head": h, "tail": t, "score": round(rng.uniform(0, 30), 2)} for h, t in sorted(neg)]
        rng.shuffle(pairs)
        rel_lines.append(json.dumps({"relation": f"rel{k}", "pairs": pairs}))
    relations_text = "".join(line + "\n" for line in rel_lines)

    dataset = load_relation_data(io.StringIO(relations_text))
    used = {(p["head"], p["tail"]) for line in rel_lines for p in json.loads(line)["pairs"]}
    candidates = []
    for k, r in enumerate(dataset.relations):
        heads = {h for h, _ in r.train_positives}
        tails = {t for _, t in r.train_positives}
        cands = sorted((h, t) for h in heads for t in tails if (h, t) not in used)
        if len(cands) < 2:
            raise SynthError(f"relation {k} has too few held-out pairs")
        candidates.append(cands)

    q_lines = []
    for n in range(spec.n_questions):
        k = n % R
        for _attempt in range(100):
            stem, correct = rng.sample(candidates[k], 2)
            if not set(stem) & set(correct):
                break
        else:
            raise SynthError(f"relation {k}: no word-disjoint stem/answer pair")
        others = rng.sample([j for j in range(R) if j != k], spec.n_choices - 1)
        choices = [correct] + [rng.choice(candidates[j]) for j in others]
        rng.shuffle(choices)
        q_lines.append(json.dumps({
            "stem": list(stem),
            "choice": [list(c) for c in choices],
            "answer": choices.index(correct),
        }))

    files = {
        "lexicon.jsonl": "".join(line + "\n" for line in lex_lines),
        "triples.tsv": "".join(f"{h}\t{r}\t{t}\n" for h, r, t in triples),
        "sememe_vectors.txt": "".join(line + "\n" for line in vec_lines),
        "relations.jsonl": relations_text,
        "analogy.jsonl": "".join(line + "\n" for line in q_lines),
    }
    verify(files)
    return files


def structural_labels(files: dict[str, str]):
    """Map a word pair to the set of edge types from its head's to its tail's sememes."""
    sememes_of = {}
    for line in files["lexicon.jsonl"].splitlines():
        rec = json.loads(line)
        sememes_of[rec["word"]] = {s for sense in rec["senses"] for s in sense}
    edges = {}
    for line in files["triples.tsv"].splitlines():
        h, r, t = line.split("\t")
        edges.setdefault((h, t), set()).add(r)

    def label(pair):
        h, t = pair
        out = set()
        for a in sememes_of.get(h, ()):
            for b in sememes_of.get(t, ()):
                out |= edges.get((a, b), set())
        return frozenset(out)

    return label


def verify(files: dict[str, str]) -> None:
    """Every question must have exactly one choice whose label matches the stem's."""
    label = structural_labels(files)
    for n, line in enumerate(files["analogy.jsonl"].splitlines()):
        q = json.loads(line)
        stem_label = label(tuple(q["stem"]))
        if len(stem_label) != 1:
            raise SynthError(f"question {n}: stem has labels {sorted(stem_label)}")
        matches = [i for i, c in enumerate(q["choice"]) if label(tuple(c)) == stem_label]
        if matches != [q["answer"]]:
            raise SynthError(f"question {n}: structurally correct choices {matches}, answer {q['answer']}")


def write(out_dir: str | Path, seed: int = 1, spec: SynthSpec = SynthSpec()) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in generate(seed, spec).items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths[name] = path
    return paths
