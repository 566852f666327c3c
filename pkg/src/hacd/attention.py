"""Node-level attention per meta-path and the attribute-level fusion that
weights the per-path embeddings.

Per path, a shared attention vector scores each (node, neighbor) pair on the
concatenated projected features; masked row-softmax over the neighbor set
gives the mixing coefficients. Across paths, fusion weights combine two
signals: a semantic importance score (averaged tanh bottleneck) and an
attribute-affinity score (mean normalized similarity mass on non-self
neighbor pairs), balanced per path by a learned two-way gate and normalized
with a softmax over paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import HeteroGraph
from .metapath import MetaPathGraph

__all__ = [
    "NodeAttentionParams", "SemanticAttentionParams", "A2MParams",
    "project_features", "node_attention_coeffs", "aggregate",
    "metapath_importance", "attr_similarity", "attr_coeffs",
    "balance_weights", "attribute_level_coeffs", "fuse",
]


@dataclass
class NodeAttentionParams:
    """Per-type feature projections into the shared space plus one attention
    vector of length 2*dim per meta-path."""

    proj_entity: Tensor        # (d_features, dim)
    proj_attribute: Tensor     # (d_features, dim); attribute nodes are one-hot in column id
    attn_vectors: list[Tensor]  # each (2*dim, 1)

    @property
    def dim(self) -> int:
        return self.proj_entity.data.shape[1]


@dataclass
class SemanticAttentionParams:
    w: Tensor   # (dim, dim)
    b: Tensor   # (dim,)
    q: Tensor   # (dim, 1)


@dataclass
class A2MParams:
    """Attribute-level attention: free weights for the non-negative feature
    vector (softplus-reparameterized) and per-path balance logits."""

    u_free: Tensor   # (d_features,)
    l_s: Tensor      # (n_paths, 1)
    l_a: Tensor      # (n_paths, 1)

    def u_effective(self) -> Tensor:
        return ad.softplus(self.u_free)


def project_features(hetero: HeteroGraph, features: np.ndarray,
                     params: NodeAttentionParams) -> Tensor:
    """Projected features for the full typed node set.

    Entities project their feature rows; attribute nodes are one-hot in their
    column id, so their projections are rows of the attribute matrix.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != hetero.entity_count:
        raise ValueError("feature rows must match entity count")
    h_ent = ad.matmul(ad.constant(x), params.proj_entity)
    h_attr = ad.gather_rows(params.proj_attribute, hetero.active_columns)
    # row-concatenation via the column catalog
    return ad.transpose(ad.concat_cols(ad.transpose(h_ent), ad.transpose(h_attr)))


def project_entity_features(features: np.ndarray, proj: Tensor) -> Tensor:
    """Entity block only; the attention pipeline never consumes attribute rows."""
    return ad.matmul(ad.constant(np.asarray(features, dtype=np.float64)), proj)


def node_attention_coeffs(h_entities: Tensor, mp: MetaPathGraph, attn_vector: Tensor,
                          *, slope: float = 0.2, edge_log_weights: Tensor | None = None,
                          paper_literal: bool = False) -> Tensor:
    """Dense masked coefficient matrix for one meta-path.

    The score of pair (i, j) is leaky_relu(a^T [h_i || h_j]) plus an optional
    additive log-weight bias; rows are normalized over the neighbor mask.
    ``paper_literal`` switches the normalizer of row i to the scores of pairs
    (j, k) over the same neighbor set, in which case rows need not sum to 1.
    """
    dim = h_entities.data.shape[1]
    if attn_vector.data.shape not in ((2 * dim, 1), (2 * dim,)):
        raise ValueError(f"attention vector must have length {2 * dim}")
    a_col = attn_vector if attn_vector.data.ndim == 2 else ad.reshape(attn_vector, (2 * dim, 1))
    a_src = ad.gather_rows(a_col, np.arange(dim))
    a_dst = ad.gather_rows(a_col, np.arange(dim, 2 * dim))
    src = ad.matmul(h_entities, a_src)                 # (n, 1)
    dst = ad.transpose(ad.matmul(h_entities, a_dst))   # (1, n)
    scores = ad.leaky_relu(ad.add(src, dst), slope=slope)
    if edge_log_weights is not None:
        scores = ad.add(scores, edge_log_weights)
    mask = mp.dense_mask()
    if not paper_literal:
        return ad.masked_row_softmax(scores, mask)
    # literal normalizer: alpha_ij = exp(e_ij) / sum_{k in N_i} exp(e_jk)
    shift = float(scores.data.max())
    shifted = ad.add(scores, -shift)
    denom = ad.matmul(ad.constant(mask.astype(np.float64)), ad.transpose(ad.exp(shifted)))
    coeffs = ad.exp(ad.sub(shifted, ad.log(denom)))
    return ad.hadamard(coeffs, ad.constant(mask.astype(np.float64)))


def aggregate(h_entities: Tensor, coeffs: Tensor, mp: MetaPathGraph) -> Tensor:
    """Semantic-specific embedding: elu of the coefficient-weighted neighbor sum."""
    if coeffs.data.shape != (mp.entity_count, mp.entity_count):
        raise ValueError("coefficient matrix must be entities x entities")
    return ad.elu(ad.matmul(coeffs, h_entities))


def metapath_importance(h_paths: list[Tensor], sem: SemanticAttentionParams) -> list[Tensor]:
    """Scalar importance per meta-path: mean over nodes of q^T tanh(W h + b)."""
    if not h_paths:
        raise ValueError("at least one meta-path embedding required")
    out = []
    for h in h_paths:
        n = h.data.shape[0]
        hidden = ad.tanh(ad.add(ad.matmul(h, ad.transpose(sem.w)), sem.b))
        scores = ad.matmul(hidden, sem.q)              # (n, 1)
        out.append(ad.scale(ad.tsum(scores, axis=0), 1.0 / n))   # (1, 1)
    return out


def attr_similarity(features: np.ndarray, u: Tensor,
                    rows_i: np.ndarray, rows_j: np.ndarray) -> Tensor:
    """Weighted attribute similarity s_ij = (x_i ⊙ u)^T x_j on the given pairs."""
    return ad.pairwise_weighted_dot(features, rows_i, rows_j, u)


def attr_coeffs(scores: Tensor, row_ptr: np.ndarray) -> Tensor:
    """Normalize pair scores over each node's neighbor segment."""
    return ad.segment_softmax(scores, row_ptr)


def balance_weights(l_s: Tensor, l_a: Tensor) -> tuple[Tensor, Tensor]:
    """Per-path convex pair (q_s, q_a) = softmax of the two balance logits."""
    if l_s.data.shape != l_a.data.shape:
        raise ValueError("balance logits must align per path")
    stacked = ad.concat_cols(l_s, l_a)                    # (P, 2)
    sm = ad.row_softmax(stacked)
    q_s = ad.matmul(sm, ad.constant([[1.0], [0.0]]))
    q_a = ad.matmul(sm, ad.constant([[0.0], [1.0]]))
    return q_s, q_a


def _as_scalar_row(t: Tensor) -> Tensor:
    return ad.reshape(t, (1, 1))


def attribute_level_coeffs(gamma_terms: list[Tensor], importances: list[Tensor],
                           q_s: Tensor, q_a: Tensor) -> Tensor:
    """Fusion weights across paths: softmax over q_a*gamma_term + q_s*importance."""
    n_paths = len(gamma_terms)
    if n_paths == 0:
        raise ValueError("no meta-paths to fuse")
    if len(importances) != n_paths or q_s.data.shape[0] != n_paths:
        raise ValueError("per-path inputs must align")
    gm = _as_scalar_row(gamma_terms[0])
    wm = _as_scalar_row(importances[0])
    for p in range(1, n_paths):
        gm = ad.concat_cols(gm, _as_scalar_row(gamma_terms[p]))
        wm = ad.concat_cols(wm, _as_scalar_row(importances[p]))
    raw = ad.add(ad.hadamard(ad.transpose(q_a), gm), ad.hadamard(ad.transpose(q_s), wm))
    return ad.row_softmax(raw)                            # (1, P)


def fuse(beta: Tensor, h_paths: list[Tensor]) -> Tensor:
    """Weighted sum of the per-path embeddings with the fusion coefficients."""
    n_paths = len(h_paths)
    if beta.data.shape != (1, n_paths):
        raise ValueError(f"beta must be a (1, {n_paths}) row")
    out = None
    for p, h in enumerate(h_paths):
        sel = np.zeros((n_paths, 1))
        sel[p, 0] = 1.0
        coeff = ad.matmul(beta, ad.constant(sel))         # (1, 1)
        term = ad.hadamard(coeff, h)
        out = term if out is None else ad.add(out, term)
    return out
