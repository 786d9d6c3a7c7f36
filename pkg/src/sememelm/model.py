"""The trainable relation model and its fixed resources."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import gat, textenc
from .autodiff import Tensor
from .lexicon import INTERSECTION, EmbeddingTable, SememeInventory, WordEntry, node_init_matrix, sememe_set
from .relgraph import PairSubgraph, SememeGraph, add_virtual_node, extract_subgraph

SCORE_MODES = ("h_m", "h_g", "concat")


@dataclass
class RelationModel:
    inventory: SememeInventory
    lexicon: Mapping[str, WordEntry]
    graph: SememeGraph
    node_init: Tensor  # constant, one row per sememe id
    vocab: textenc.Vocabulary
    gat: gat.GatParams
    encoder: textenc.EncoderParams
    P: Tensor  # (D_lm, d) sememe-to-encoder projection used by word alignment
    sememe_mode: str = INTERSECTION
    hops: int = 0
    score_with: str = "h_m"
    _subgraphs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.node_init.shape != (self.graph.node_count, self.gat.dim):
            raise ad.ShapeError(
                f"node init {self.node_init.shape} does not match graph ({self.graph.node_count}, {self.gat.dim})"
            )
        if self.P.shape != (self.encoder.dim, self.gat.dim):
            raise ad.ShapeError(f"P has shape {self.P.shape}, expected {(self.encoder.dim, self.gat.dim)}")
        if self.gat.out_dim != self.encoder.dim:
            raise ad.ShapeError("W_proj output width must equal the encoder width")
        if self.score_with not in SCORE_MODES:
            raise ValueError(f"score_with must be one of {SCORE_MODES}")

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor, keyed ``section.name``."""
        out = {}
        for name, t in self.gat.named_parameters().items():
            if name != "W_proj":
                out[f"gat.{name}"] = t
        for name, t in self.encoder.named_parameters().items():
            out[f"textenc.{name}"] = t
        out["projections.W_proj"] = self.gat.W_proj
        out["projections.P"] = self.P
        return out

    def word_sememes(self, word: str) -> frozenset[int]:
        entry = self.lexicon.get(word)
        if entry is None:
            return frozenset()
        return sememe_set(entry, self.sememe_mode)

    def pair_subgraph(self, head: str, tail: str) -> PairSubgraph | None:
        """Augmented subgraph for the pair, or None on the degenerate path."""
        key = (head, tail)
        if key not in self._subgraphs:
            sh, st = self.word_sememes(head), self.word_sememes(tail)
            if not sh or not st:
                self._subgraphs[key] = None
            else:
                sub = extract_subgraph(self.graph, sh, st, hops=self.hops)
                self._subgraphs[key] = add_virtual_node(sub)
        return self._subgraphs[key]

    def prompt(self, head: str, tail: str) -> textenc.TokenizedPrompt:
        return textenc.prompt_for(head, tail, self.encoder.max_len)


def build_model(inventory: SememeInventory, lexicon: Mapping[str, WordEntry], graph: SememeGraph,
                embeddings: EmbeddingTable | np.ndarray, *, encoder_dim: int = 64, graph_dim: int = 300,
                layers: int = 2, leaky_slope: float = 0.2, heads: int = 1, max_len: int = textenc.MAX_LEN,
                seed: int = 0, sememe_mode: str = INTERSECTION, hops: int = 0, score_with: str = "h_m",
                extra_words=()) -> RelationModel:
    """Fresh model with seeded parameters.

    The vocabulary covers the template scaffold, every lexicon word and
    ``extra_words``. ``embeddings`` is either a table keyed by sememe label
    or an already-built node-init matrix.
    """
    if isinstance(embeddings, EmbeddingTable):
        init = node_init_matrix(inventory, embeddings, graph_dim, seed=seed)
    else:
        init = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng(seed)
    vocab = textenc.Vocabulary.from_words(list(lexicon) + list(extra_words))
    gat_params = gat.init_gat_params(rng, graph_dim, encoder_dim, layers, leaky_slope, heads)
    enc = textenc.init_encoder_params(rng, len(vocab), encoder_dim, max_len)
    P = ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(graph_dim), (encoder_dim, graph_dim)))
    return RelationModel(inventory, dict(lexicon), graph, Tensor(init), vocab, gat_params, enc, P,
                         sememe_mode, hops, score_with)
