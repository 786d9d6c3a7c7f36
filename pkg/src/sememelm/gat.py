"""Graph attention encoder for pair subgraphs.

Each layer updates node ``i`` from the nodes it receives from (in-neighbours
plus itself)::

    h_i' = LeakyReLU( sum_j alpha_ij * W h_j )
    alpha_i. = softmax_j( (Wq h_i) . (Wk h_j) )

Edge labels do not enter the computation. The virtual node is a sink, so
after ``L`` layers its state summarises the whole subgraph and serves as
the graph-side relation representation.

Node states are stored row-wise, so ``W h_j`` is computed as ``H @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .relgraph import VIRTUAL, GraphError, PairSubgraph


@dataclass
class GatParams:
    W: list[Tensor]
    Wq: list[Tensor]
    Wk: list[Tensor]
    virtual_seed: Tensor  # shape (1, d)
    W_proj: Tensor  # shape (D_lm, d)
    leaky_slope: float = 0.2
    heads: int = 1

    def __post_init__(self):
        if not (len(self.W) == len(self.Wq) == len(self.Wk)):
            raise ValueError("every layer needs W, Wq and Wk")
        if self.heads != 1:
            raise ValueError("only single-head attention is implemented")
        d = self.dim
        for m in (*self.W, *self.Wq, *self.Wk):
            if m.shape != (d, d):
                raise ad.ShapeError(f"layer matrix has shape {m.shape}, expected {(d, d)}")
        if self.virtual_seed.shape != (1, d):
            raise ad.ShapeError(f"virtual seed has shape {self.virtual_seed.shape}, expected {(1, d)}")
        if self.W_proj.value.ndim != 2 or self.W_proj.shape[1] != d:
            raise ad.ShapeError(f"projection has shape {self.W_proj.shape}, expected (D_lm, {d})")

    @property
    def layers(self) -> int:
        return len(self.W)

    @property
    def dim(self) -> int:
        return self.virtual_seed.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W_proj.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for l in range(self.layers):
            out[f"W{l}"] = self.W[l]
            out[f"Wq{l}"] = self.Wq[l]
            out[f"Wk{l}"] = self.Wk[l]
        out["virtual_seed"] = self.virtual_seed
        out["W_proj"] = self.W_proj
        return out


def init_gat_params(rng: np.random.Generator, dim: int, out_dim: int, layers: int = 2,
                    leaky_slope: float = 0.2, heads: int = 1, seed_std: float = 0.02) -> GatParams:
    std = 1.0 / np.sqrt(dim)
    W, Wq, Wk = [], [], []
    for _ in range(layers):
        W.append(ad.parameter(rng.normal(0.0, std, (dim, dim))))
        Wq.append(ad.parameter(rng.normal(0.0, std, (dim, dim))))
        Wk.append(ad.parameter(rng.normal(0.0, std, (dim, dim))))
    seed = ad.parameter(rng.normal(0.0, seed_std, (1, dim)))
    proj = ad.parameter(rng.normal(0.0, std, (out_dim, dim)))
    return GatParams(W, Wq, Wk, seed, proj, leaky_slope, heads)


@dataclass(frozen=True)
class GraphBatch:
    """Several augmented subgraphs laid out as one block-diagonal graph."""

    node_ids: np.ndarray  # global sememe id per row, VIRTUAL for virtual rows
    mask: np.ndarray
    offsets: tuple[int, ...]
    virtual_rows: np.ndarray
    _stack_order: np.ndarray = field(repr=False)
    _sememe_ids: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.node_ids)

    def receive_mask(self) -> np.ndarray:
        return self.mask


def batch_subgraphs(subgraphs: Sequence[PairSubgraph]) -> GraphBatch:
    if not subgraphs:
        raise GraphError("empty subgraph batch")
    node_ids = []
    offsets = []
    virtual_rows = []
    total = sum(g.size for g in subgraphs)
    mask = np.zeros((total, total), dtype=bool)
    start = 0
    for g in subgraphs:
        if not g.augmented:
            raise GraphError("subgraph has no virtual node")
        offsets.append(start)
        node_ids.extend(g.local_nodes)
        virtual_rows.append(start + g.virtual_index)
        mask[start:start + g.size, start:start + g.size] = g.receive_mask()
        start += g.size
    node_ids = np.asarray(node_ids, dtype=np.intp)
    is_virtual = node_ids == VIRTUAL
    sememe_rows = np.flatnonzero(~is_virtual)
    virt_rows = np.flatnonzero(is_virtual)
    # rows are built as [sememe rows..., virtual rows...] then permuted into place
    stack_order = np.empty(total, dtype=np.intp)
    stack_order[sememe_rows] = np.arange(len(sememe_rows))
    stack_order[virt_rows] = len(sememe_rows) + np.arange(len(virt_rows))
    return GraphBatch(node_ids, mask, tuple(offsets), np.asarray(virtual_rows, dtype=np.intp),
                      stack_order, node_ids[sememe_rows])


def initial_states(params: GatParams, batch: GraphBatch, node_init: Tensor) -> Tensor:
    parts = []
    if len(batch._sememe_ids):
        parts.append(ad.select_rows(node_init, batch._sememe_ids))
    n_virtual = batch.size - len(batch._sememe_ids)
    parts.append(ad.select_rows(params.virtual_seed, np.zeros(n_virtual, dtype=np.intp)))
    return ad.select_rows(ad.concat_rows(parts), batch._stack_order)


def attention_coefficients(params: GatParams, layer: int, H: Tensor, graph) -> Tensor:
    """Row-stochastic attention matrix; row = receiver, column = sender."""
    if not 0 <= layer < params.layers:
        raise IndexError(f"layer {layer} out of range for {params.layers} layers")
    mask = graph.receive_mask()
    if H.shape[0] != mask.shape[0]:
        raise ad.ShapeError(f"{H.shape[0]} node states for {mask.shape[0]} nodes")
    assert mask.diagonal().all(), "every node must receive from itself"
    q = ad.matmul(H, ad.transpose(params.Wq[layer]))
    k = ad.matmul(H, ad.transpose(params.Wk[layer]))
    logits = ad.matmul(q, ad.transpose(k))
    return ad.masked_softmax_rows(logits, mask)


def gat_layer(params: GatParams, layer: int, H: Tensor, graph) -> Tensor:
    alpha = attention_coefficients(params, layer, H, graph)
    values = ad.matmul(H, ad.transpose(params.W[layer]))
    return ad.leaky_relu(ad.matmul(alpha, values), params.leaky_slope)


def encode_batch(params: GatParams, batch: GraphBatch, node_init: Tensor, trace: list | None = None) -> Tensor:
    """Final node states for every row of ``batch``."""
    H = initial_states(params, batch, node_init)
    for layer in range(params.layers):
        H = gat_layer(params, layer, H, batch)
        if trace is not None:
            trace.append(layer)
    return H


def encode_pair(params: GatParams, subgraph: PairSubgraph, node_init, trace: list | None = None):
    """Encode one augmented subgraph.

    ``node_init`` holds one initial state per global sememe id (see
    ``lexicon.node_init_matrix``). Returns ``(h_g, sememe_reps)``: the
    virtual node's final state as a ``(1, d)`` row and the final sememe
    states row-aligned with ``subgraph.local_nodes`` (virtual row excluded).
    """
    if not subgraph.augmented:
        raise GraphError("encode_pair needs an augmented subgraph")
    node_init = ad.as_tensor(node_init)
    batch = batch_subgraphs([subgraph])
    H = encode_batch(params, batch, node_init, trace)
    v = subgraph.virtual_index
    sememe_rows = [i for i in range(subgraph.size) if i != v]
    return ad.select_rows(H, [v]), ad.select_rows(H, sememe_rows)


def project(params: GatParams, h_g: Tensor) -> Tensor:
    """Map graph-side rows ``(n, d)`` to the text-encoder width ``(n, D_lm)``."""
    if h_g.value.ndim != 2 or h_g.shape[1] != params.W_proj.shape[1]:
        raise ad.ShapeError(f"cannot project {h_g.shape} with W_proj {params.W_proj.shape}")
    return ad.matmul(h_g, ad.transpose(params.W_proj))
