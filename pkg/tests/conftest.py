import sys
from pathlib import Path

import numpy as np
import pytest

from sememelm import synth
from sememelm.lexicon import RelationTriple, SememeInventory, WordEntry
from sememelm.model import build_model
from sememelm.relgraph import build_graph

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))


def read_dir(path: Path) -> dict[str, str]:
    return {name: (path / name).read_text(encoding="utf-8") for name in synth.FILES}


@pytest.fixture(scope="session")
def synth_files():
    return read_dir(DATA / "synth_seed1")


@pytest.fixture(scope="session")
def tiny_files():
    return read_dir(DATA / "tiny")


def small_world(seed: int = 0, nodes: int = 5, dim: int = 6, encoder_dim: int = 4):
    """Hand-sized model: a few sememes, random edges, one degenerate word."""
    rng = np.random.default_rng(seed)
    inventory = SememeInventory(tuple(f"s{i}" for i in range(nodes)), ("r0", "r1"))
    triples = [RelationTriple(i, int(rng.integers(2)), j)
               for i in range(nodes) for j in range(nodes) if i != j and rng.random() < 0.5]
    graph = build_graph(inventory, triples)
    lexicon = {
        "alpha": WordEntry("alpha", (frozenset([0, 1]),)),
        "beta": WordEntry("beta", (frozenset([2]), frozenset([2, 3]))),
        "gamma": WordEntry("gamma", (frozenset([3, 4]),)),
        "delta": WordEntry("delta", (frozenset([1]),)),
        "odd": WordEntry("odd", (frozenset([0]), frozenset([4]))),
    }
    node_init = rng.normal(0.0, 0.5, (nodes, dim))
    model = build_model(inventory, lexicon, graph, node_init, encoder_dim=encoder_dim, graph_dim=dim,
                        max_len=16, seed=seed)
    return model


@pytest.fixture
def world():
    return small_world()


# (number, description, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d} {name}: {detail}")
