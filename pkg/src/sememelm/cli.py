"""Command-line entry point.

Commands: build-graph, inspect-pair, train, eval, embed, gradcheck, synth.
Failures print one JSON line ``{"error": <kind>, "message": ...}`` to
stderr and exit with status 2; ``gradcheck`` exits 1 when the gradient
check itself fails.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, evalkit, relgraph, synth
from .lexicon import (LexiconError, RelationTriple, SememeInventory, WordEntry, load_embeddings,
                      parse_lexicon, parse_relation_triples, sememe_set)
from .model import SCORE_MODES, build_model
from .training import (RelationExamples, TrainConfig, TrainingDiverged, compute_losses, load_relation_data,
                       plan_step, train)

logger = logging.getLogger("sememelm")

SEED_ENV = "SEMEMELM_SEED"
GRADCHECK_TOLERANCE = 1e-4


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------- config

def _coerce(key: str, raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if raw.lower() not in states:
            raise UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
        return states[raw.lower()]
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines (``#`` comments) with keys named after TrainConfig fields."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[train]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config: {exc}".replace("\n", " ")) from None
    return resolve_overrides(dict(parser["train"]))


def resolve_overrides(raw: dict[str, str]) -> dict:
    types = TrainConfig.field_types()
    out = {}
    for key, value in raw.items():
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def build_config(config_path: str | None = None, overrides: list[str] | None = None,
                 seed: int | None = None) -> TrainConfig:
    """Config file, then ``SEMEMELM_SEED``, then ``--set`` overrides, then ``--seed``."""
    values = {}
    if config_path:
        values.update(parse_config_text(_read(config_path)))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        values["seed"] = _coerce(SEED_ENV, env_seed, int)
    pairs = {}
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value
    values.update(resolve_overrides(pairs))
    if seed is not None:
        values["seed"] = seed
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


def _open(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return open(path, encoding="utf-8")


# --------------------------------------------------------------- gradcheck

def gradcheck_problem(seed: int, nodes: int = 5, dim: int = 8, graph_dim: int = 4):
    """A tiny random model and one relation group exercising all three losses.

    Four words over ``nodes`` sememes; when there are at least two
    sememes one extra word has disjoint senses and takes the degenerate path.
    """
    if nodes < 1 or dim < 1 or graph_dim < 1:
        raise UsageError("nodes and dimensions must be positive")
    rng = np.random.default_rng(seed)
    inventory = SememeInventory(tuple(f"s{i}" for i in range(nodes)), ("r0", "r1"))
    triples = [RelationTriple(i, int(rng.integers(2)), j)
               for i in range(nodes) for j in range(nodes) if i != j and rng.random() < 0.4]
    graph = relgraph.build_graph(inventory, triples)
    lexicon = {}
    for w in range(4):
        k = int(rng.integers(1, min(2, nodes) + 1))
        ids = frozenset(int(i) for i in rng.choice(nodes, size=k, replace=False))
        lexicon[f"w{w}"] = WordEntry(f"w{w}", (ids,))
    if nodes >= 2:
        lexicon["wd"] = WordEntry("wd", (frozenset([0]), frozenset([1])))
    words = list(lexicon)

    def pairs(n):
        return tuple((words[int(a)], words[int(b)]) for a, b in rng.integers(len(words), size=(n, 2)))

    pos, neg = pairs(3), pairs(3)
    relation = RelationExamples("rel0", pos, neg, pos, neg, (), ())
    node_init = rng.normal(0.0, 0.5, (nodes, graph_dim))
    config = TrainConfig(encoder_dim=dim, graph_dim=graph_dim, max_len=11, seed=seed)
    model = build_model(inventory, lexicon, graph, node_init, encoder_dim=dim, graph_dim=graph_dim,
                        max_len=11, seed=seed)
    return model, [relation], config


def run_gradcheck(seed: int, nodes: int = 5, dim: int = 8, graph_dim: int = 4, eps: float = 1e-5) -> dict:
    model, relations, config = gradcheck_problem(seed, nodes, dim, graph_dim)
    plan = plan_step(model, relations)
    errors = ad.gradient_errors(lambda: compute_losses(model, plan, config).total, model.parameters(), eps)
    return {"seed": seed, "nodes": nodes, "dim": dim, "graph_dim": graph_dim, "eps": eps,
            "max_rel_error": float(max(errors.values())),
            "per_parameter": {k: float(v) for k, v in errors.items()}}


# ----------------------------------------------------------------- commands

def cmd_build_graph(args) -> int:
    with _open(args.lexicon) as f:
        inventory, lexicon = parse_lexicon(f)
    with _open(args.triples) as f:
        inventory, triples = parse_relation_triples(f, inventory)
    graph = relgraph.build_graph(inventory, triples)
    checkpoint.save_bundle(args.out, inventory, lexicon, graph)
    print(f"nodes={graph.node_count} edges={len(graph.edges)} relation_types={graph.relation_count} "
          f"words={len(lexicon)}")
    return 0


def cmd_inspect_pair(args) -> int:
    inventory, lexicon, graph = checkpoint.load_bundle(args.graph)
    sets = []
    for word in (args.head, args.tail):
        entry = lexicon.get(word)
        sets.append(sememe_set(entry, args.sememe_mode) if entry is not None else frozenset())
    if not all(sets):
        print(json.dumps({"head": args.head, "tail": args.tail, "degenerate": True}, sort_keys=True))
        return 0
    sub = relgraph.add_virtual_node(relgraph.extract_subgraph(graph, sets[0], sets[1], hops=args.hops))
    print(relgraph.serialize_subgraph(sub, inventory))
    return 0


def cmd_train(args) -> int:
    config = build_config(args.config, args.set, args.seed)
    inventory, lexicon, graph = checkpoint.load_bundle(args.graph)
    with _open(args.relations) as f:
        data = load_relation_data(f, split_seed=config.split_seed)
    with _open(args.embeddings) as f:
        table = load_embeddings(f)
    model = build_model(inventory, lexicon, graph, table, encoder_dim=config.encoder_dim,
                        graph_dim=config.graph_dim, layers=config.layers, leaky_slope=config.leaky_slope,
                        heads=config.heads, max_len=config.max_len, seed=config.seed,
                        sememe_mode=config.sememe_mode, hops=config.hops, score_with=config.score_with,
                        extra_words=data.words())
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    started = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8") as mf:
        result = train(model, data, config, on_epoch=lambda rec: mf.write(rec.to_json() + "\n"))
    checkpoint.save(args.out, model, config)
    final = result.metrics[-1].to_json() if result.metrics else "{}"
    print(f"steps={result.steps} seed={config.seed} seconds={time.perf_counter() - started:.1f} final={final}")
    return 0


def cmd_eval(args) -> int:
    with _open(args.dataset) as f:
        dataset = evalkit.parse_analogy_dataset(f)
    name = args.name or Path(args.dataset).stem
    if args.baseline == "vector-offset":
        if not args.embeddings:
            raise UsageError("--baseline vector-offset needs --embeddings")
        with _open(args.embeddings) as f:
            report = evalkit.vector_offset_baseline(load_embeddings(f), dataset, name)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --baseline vector-offset)")
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"no such file: {args.checkpoint}")
        model, _ = checkpoint.load(args.checkpoint)
        if args.score_with:
            model.score_with = args.score_with
        report = evalkit.evaluate(model, dataset, name)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.tsv_row())
    return 0


def cmd_embed(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"no such file: {args.checkpoint}")
    model, _ = checkpoint.load(args.checkpoint)
    pair = (args.head, args.tail)
    if args.score_with:
        model.score_with = args.score_with
    h_g = evalkit.graph_representation(model, pair)
    out = {
        "head": args.head,
        "tail": args.tail,
        "degenerate": h_g is None,
        "score_with": model.score_with,
        "representation": evalkit.relation_representation(model, pair).tolist(),
        "h_m": evalkit.plain_mask_representation(model, pair).tolist(),
        "h_g_prime": None if h_g is None else h_g.tolist(),
    }
    print(json.dumps(out))
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in args.seed:
        report = run_gradcheck(seed, args.nodes, args.dim, args.graph_dim, args.eps)
        worst = max(worst, report["max_rel_error"])
        if not args.verbose:
            report.pop("per_parameter")
        report["passed"] = bool(report["max_rel_error"] < GRADCHECK_TOLERANCE)
        print(json.dumps(report, sort_keys=True))
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def cmd_synth(args) -> int:
    paths = synth.write(args.out, args.seed)
    files = {name: p.read_text(encoding="utf-8") for name, p in paths.items()}
    n_questions = sum(1 for line in files["analogy.jsonl"].splitlines() if line.strip())
    print(f"seed={args.seed} out={args.out} files={len(paths)} questions={n_questions}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sememelm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="parse a lexicon and sememe triples into a graph bundle")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("inspect-pair", help="print the subgraph a word pair induces")
    p.add_argument("--graph", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--tail", required=True)
    p.add_argument("--hops", type=int, default=0, choices=(0, 1))
    p.add_argument("--sememe-mode", default="intersection", choices=("intersection", "union"))
    p.set_defaults(func=cmd_inspect_pair)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--graph", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--config", help="flat key = value file of training settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-epoch JSONL (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="answer an analogy dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--report")
    p.add_argument("--name")
    p.add_argument("--baseline", choices=("vector-offset",))
    p.add_argument("--embeddings")
    p.add_argument("--score-with", choices=SCORE_MODES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="dump the relation representation of one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--tail", required=True)
    p.add_argument("--score-with", choices=SCORE_MODES)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses on a tiny random model")
    p.add_argument("--seed", type=int, nargs="+", default=[0])
    p.add_argument("--nodes", type=int, default=5)
    p.add_argument("--dim", type=int, default=8, help="encoder width D_lm")
    p.add_argument("--graph-dim", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic end-to-end corpus")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


EXPECTED_ERRORS = (FileNotFoundError, IsADirectoryError, PermissionError, UsageError, LexiconError,
                   relgraph.GraphError, checkpoint.CheckpointError, evalkit.AnalogyError, TrainingDiverged,
                   ad.AutodiffError, synth.SynthError, ValueError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        message = str(exc).replace("\n", " ")
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
