"""Graph bundles and model checkpoints.

Both are JSON. Floats go through ``json``'s shortest round-trip repr, so
loading a checkpoint and saving it again reproduces the file byte for
byte. A compact ``.npz`` variant of the checkpoint is also supported; it
holds the same arrays plus the JSON header but is not byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import gat, textenc
from .autodiff import Tensor
from .lexicon import RelationTriple, SememeInventory, WordEntry
from .model import RelationModel
from .relgraph import SememeGraph, build_graph
from .training import TrainConfig

FORMAT_VERSION = 1
BUNDLE_VERSION = 1


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------- graph bundle

def bundle_dict(inventory: SememeInventory, lexicon: Mapping[str, WordEntry], graph: SememeGraph) -> dict:
    return {
        "bundle_version": BUNDLE_VERSION,
        "sememes": list(inventory.sememes),
        "relation_types": list(inventory.relation_types),
        "lexicon": [[e.word, [sorted(s) for s in e.senses]] for e in lexicon.values()],
        "edges": [list(e) for e in graph.edges],
    }


def bundle_from_dict(d: Mapping):
    """Inverse of ``bundle_dict``: ``(inventory, lexicon, graph)``."""
    try:
        version = int(d["bundle_version"])
        if version > BUNDLE_VERSION:
            raise CheckpointError(f"graph bundle version {version} is newer than supported {BUNDLE_VERSION}")
        inventory = SememeInventory(tuple(d["sememes"]), tuple(d["relation_types"]))
        lexicon = {word: WordEntry(word, tuple(frozenset(s) for s in senses)) for word, senses in d["lexicon"]}
        graph = build_graph(inventory, [RelationTriple(s, r, t) for s, r, t in d["edges"]])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed graph bundle: {exc}") from None
    return inventory, lexicon, graph


def save_bundle(path, inventory, lexicon, graph) -> None:
    Path(path).write_text(json.dumps(bundle_dict(inventory, lexicon, graph)) + "\n", encoding="utf-8")


def load_bundle(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg})") from None
    return bundle_from_dict(d)


# --------------------------------------------------------------- checkpoint

def _array(x: np.ndarray) -> dict:
    return {"shape": list(x.shape), "data": np.asarray(x, dtype=np.float64).ravel().tolist()}


def _unarray(d: Mapping, name: str) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in d["shape"])
        data = np.asarray(d["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"array {name!r} is malformed: {exc}") from None
    if data.ndim != 1 or data.size != int(np.prod(shape)):
        raise CheckpointError(f"array {name!r} holds {data.size} values for shape {list(shape)}")
    return data.reshape(shape)


def checkpoint_dict(model: RelationModel, config: TrainConfig) -> dict:
    gat_section = {name: _array(t.value) for name, t in model.gat.named_parameters().items() if name != "W_proj"}
    return {
        "format_version": FORMAT_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "graph": bundle_dict(model.inventory, model.lexicon, model.graph),
        "node_init": _array(model.node_init.value),
        "vocab": list(model.vocab.tokens),
        "sections": {
            "gat": gat_section,
            "textenc": {name: _array(t.value) for name, t in model.encoder.named_parameters().items()},
            "projections": {"W_proj": _array(model.gat.W_proj.value), "P": _array(model.P.value)},
        },
    }


def model_from_dict(d: Mapping) -> tuple[RelationModel, TrainConfig]:
    if not isinstance(d, Mapping) or "format_version" not in d:
        raise CheckpointError("not a checkpoint (no format_version)")
    version = d["format_version"]
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version} is not supported (max {FORMAT_VERSION})")
    try:
        known = TrainConfig.field_types()
        config = TrainConfig(**{k: v for k, v in d["config"].items() if k in known})
        inventory, lexicon, graph = bundle_from_dict(d["graph"])
        sections = d["sections"]
        g, e, pr = sections["gat"], sections["textenc"], sections["projections"]
        vocab = textenc.Vocabulary(d["vocab"])
        if list(vocab.tokens) != list(d["vocab"]):
            raise CheckpointError("vocabulary is not in canonical form")

        def param(section, name):
            return ad.parameter(_unarray(section[name], name))

        layers = sum(1 for name in g if name.startswith("Wq"))
        gat_params = gat.GatParams(
            [param(g, f"W{l}") for l in range(layers)],
            [param(g, f"Wq{l}") for l in range(layers)],
            [param(g, f"Wk{l}") for l in range(layers)],
            param(g, "virtual_seed"),
            param(pr, "W_proj"),
            config.leaky_slope,
            config.heads,
        )
        encoder = textenc.EncoderParams(*(param(e, name) for name in
                                          ("token_embeddings", "position_embeddings", "W1", "b1", "W2", "b2")))
        if encoder.token_embeddings.shape[0] != len(vocab):
            raise CheckpointError("token embedding rows do not match the vocabulary")
        model = RelationModel(inventory, lexicon, graph, Tensor(_unarray(d["node_init"], "node_init")), vocab,
                              gat_params, encoder, param(pr, "P"), config.sememe_mode, config.hops,
                              config.score_with)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return model, config


def dumps(model: RelationModel, config: TrainConfig) -> str:
    return json.dumps(checkpoint_dict(model, config), ensure_ascii=False) + "\n"


def save(path, model: RelationModel, config: TrainConfig) -> None:
    path = Path(path)
    if path.suffix == ".npz":
        _save_npz(path, checkpoint_dict(model, config))
    else:
        path.write_text(dumps(model, config), encoding="utf-8")


def load(path) -> tuple[RelationModel, TrainConfig]:
    path = Path(path)
    if path.suffix == ".npz":
        return model_from_dict(_load_npz(path))
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg})") from None
    return model_from_dict(d)


# arrays are pulled out of the JSON tree and stored natively, keyed by path

def _save_npz(path: Path, d: dict) -> None:
    arrays = {}

    def strip(node, prefix):
        if isinstance(node, dict) and set(node) == {"shape", "data"}:
            arrays[prefix] = np.asarray(node["data"], dtype=np.float64).reshape(node["shape"])
            return {"npz": prefix}
        if isinstance(node, dict):
            return {k: strip(v, f"{prefix}/{k}" if prefix else k) for k, v in node.items()}
        return node

    header = strip(d, "")
    np.savez_compressed(path, __header__=np.array(json.dumps(header)), **arrays)


def _load_npz(path: Path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))

        def fill(node):
            if isinstance(node, dict) and set(node) == {"npz"}:
                x = z[node["npz"]]
                return {"shape": list(x.shape), "data": x.ravel().tolist()}
            if isinstance(node, dict):
                return {k: fill(v) for k, v in node.items()}
            return node

        return fill(header)
