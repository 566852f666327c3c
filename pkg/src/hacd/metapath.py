"""Learned convolution over typed sub-adjacencies and meta-path composition.

Each convolution layer carries one free logit per edge type; the softmaxed
weights blend the typed adjacencies into one matrix over the full node space.
Stacking L layers and taking the entity-entity block of each prefix product
yields L meta-path neighbor graphs (layer 1 keeps direct links, layer 2 adds
entity-attribute-entity co-occurrence, and so on). Rows are sparsified to the
``top_k`` heaviest neighbors plus the always-present self link.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import EDGE_TYPES, HeteroGraph

__all__ = ["HeteroConvLayer", "MetaPathGraph", "hetero_convolve",
           "compose_metapaths", "metapath_neighbors"]


@dataclass
class HeteroConvLayer:
    """Per-edge-type mixing logits for one convolution layer."""

    edge_types: tuple[str, ...] = EDGE_TYPES
    logits: np.ndarray = field(default_factory=lambda: np.zeros(len(EDGE_TYPES)))

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).ravel()
        if len(self.edge_types) == 0:
            raise ValueError("empty edge-type set")
        if self.logits.shape != (len(self.edge_types),):
            raise ValueError("one logit per edge type required")

    def weights(self) -> dict[str, float]:
        """Softmaxed mixing weights; non-negative and summing to 1."""
        z = self.logits - self.logits.max()
        e = np.exp(z)
        w = e / e.sum()
        return dict(zip(self.edge_types, w))


@dataclass
class MetaPathGraph:
    """Row-sparsified entity-entity adjacency for one composed meta-path."""

    path_id: int
    adjacency: sp.csr_matrix          # entity x entity, diagonal present
    provenance: list[int]             # layer ids composed, in order

    def __post_init__(self):
        self.adjacency = self.adjacency.tocsr()
        self.adjacency.sort_indices()

    @property
    def entity_count(self) -> int:
        return self.adjacency.shape[0]

    def dense_mask(self) -> np.ndarray:
        """Boolean neighbor mask; guaranteed True on the diagonal."""
        return (self.adjacency.toarray() != 0)

    def dense_weights(self) -> np.ndarray:
        return self.adjacency.toarray()

    def pair_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Neighbor pairs as (row ids, col ids, CSR row boundaries)."""
        a = self.adjacency
        rows = np.repeat(np.arange(a.shape[0]), np.diff(a.indptr))
        return rows, a.indices.copy(), a.indptr.copy()


def hetero_convolve(layer: HeteroConvLayer, type_adjacencies: dict[str, sp.spmatrix]) -> sp.csr_matrix:
    """Weighted sum of the typed adjacencies with the layer's softmaxed weights."""
    if not type_adjacencies:
        raise ValueError("empty edge-type set")
    missing = [e for e in layer.edge_types if e not in type_adjacencies]
    if missing:
        raise ValueError(f"adjacency missing for edge types {missing}")
    w = layer.weights()
    out = None
    for e in layer.edge_types:
        term = type_adjacencies[e].tocsr() * w[e]
        out = term if out is None else out + term
    return out.tocsr()


def _sparsify_rows(mat: sp.csr_matrix, top_k: int) -> sp.csr_matrix:
    """Keep the top_k heaviest off-diagonal entries per row plus the diagonal.

    Ties break toward the lower column id (stable sort on descending weight)
    so composition is deterministic. Weights are non-negative by construction,
    which lets zero padding drop out naturally.
    """
    dense = np.asarray(mat.todense(), dtype=np.float64)
    n = dense.shape[0]
    diag = dense.diagonal().copy()
    off = dense.copy()
    np.fill_diagonal(off, -np.inf)
    order = np.argsort(-off, axis=1, kind="stable")[:, :top_k]
    picked = np.take_along_axis(off, order, axis=1)
    keep = picked > 0

    rows = np.repeat(np.arange(n), keep.sum(axis=1))
    cols = order[keep]
    vals = picked[keep]
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    vals = np.concatenate([vals, diag])
    out = sp.csr_matrix((vals, (rows, cols)), shape=dense.shape)
    out.sort_indices()
    return out


def compose_metapaths(layers: list[HeteroConvLayer], hetero: HeteroGraph,
                      top_k: int) -> list[MetaPathGraph]:
    """Meta-path graphs from the prefix products of the convolved adjacencies.

    Path ℓ's adjacency is the entity-entity block of conv(1)···conv(ℓ) with an
    identity added for self-inclusion, then row-sparsified.
    """
    if len(layers) < 1:
        raise ValueError("at least one convolution layer required")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    n = hetero.entity_count
    prefix = None
    paths = []
    for idx, layer in enumerate(layers):
        conv = hetero_convolve(layer, hetero.type_adjacencies)
        prefix = conv if prefix is None else (prefix @ conv).tocsr()
        block = prefix[:n, :n] + sp.identity(n, format="csr")
        paths.append(MetaPathGraph(path_id=idx, adjacency=_sparsify_rows(block, top_k),
                                   provenance=list(range(idx + 1))))
    return paths


def metapath_neighbors(mp: MetaPathGraph, i: int) -> list[tuple[int, float]]:
    """Weighted neighbor list of entity ``i``, ordered by node id."""
    if not 0 <= i < mp.entity_count:
        raise IndexError(f"node {i} outside 0..{mp.entity_count - 1}")
    a = mp.adjacency
    lo, hi = a.indptr[i], a.indptr[i + 1]
    return [(int(j), float(w)) for j, w in zip(a.indices[lo:hi], a.data[lo:hi])]
