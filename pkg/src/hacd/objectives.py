"""Loss and score functions: classic and soft higher-order modularity, the
membership (CMF) loss, contrastive attribute-cohesiveness losses, the total
training loss, and the two-part attribute score.

Functions that appear in the training objective accept either plain arrays
(returning floats, for evaluation and oracles) or autodiff tensors (returning
tensors, for the training tape); both paths run the same formula.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import AttributedGraph

__all__ = [
    "CommunityAssignment", "MembershipMatrix", "ModularityContext",
    "classic_modularity", "higher_order_adjacency", "generalized_modularity",
    "cmf_loss", "PairLoss", "sample_intra_pairs", "sample_inter_pairs",
    "sample_cut_pairs", "pair_distance_mean", "intra_loss", "inter_loss",
    "attribute_cohesiveness_loss", "total_loss", "ascore",
]


@dataclass
class CommunityAssignment:
    """Hard partition: one community id in 0..k-1 per entity node."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size == 0:
            raise ValueError("labels must be a non-empty vector")
        if self.k < 1 or self.labels.min() < 0 or self.labels.max() >= self.k:
            raise ValueError("labels must lie in 0..k-1")

    @classmethod
    def from_labels(cls, labels) -> "CommunityAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels=labels, k=int(labels.max()) + 1 if labels.size else 1)


@dataclass
class MembershipMatrix:
    """Row-stochastic soft membership, n nodes by k communities."""

    b: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.ndim != 2:
            raise ValueError("membership must be a matrix")
        if (self.b < -1e-12).any() or (self.b > 1 + 1e-12).any():
            raise ValueError("membership entries must lie in [0, 1]")
        if np.abs(self.b.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("membership rows must sum to 1")


@dataclass
class ModularityContext:
    """Higher-order proximity matrix with its degree vector, half total
    weight, and centered null-model matrix."""

    a_tilde: np.ndarray
    k_tilde: np.ndarray
    m_tilde: float
    p_tilde: np.ndarray


def classic_modularity(g: AttributedGraph, assignment: CommunityAssignment) -> float:
    """Newman modularity of a hard partition on the entity graph."""
    if assignment.labels.shape != (g.n_nodes,):
        raise ValueError("assignment must cover every node")
    m = g.n_edges
    if m < 1:
        raise ValueError("modularity undefined on an empty graph")
    a = g.adjacency().toarray()
    k = a.sum(axis=1)
    delta = assignment.labels[:, None] == assignment.labels[None, :]
    return float(((a - np.outer(k, k) / (2 * m)) * delta).sum() / (2 * m))


def higher_order_adjacency(g: AttributedGraph, order: int = 2, decay: float = 0.5) -> ModularityContext:
    """Decay-weighted sum of adjacency powers with the diagonal zeroed.

    order=1 reduces to the plain adjacency and hence the classic modularity
    matrix.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must be in (0, 1]")
    a = g.adjacency().toarray()
    a_tilde = np.zeros_like(a)
    power = np.eye(g.n_nodes)
    for t in range(1, order + 1):
        power = power @ a
        a_tilde += (decay ** (t - 1)) * power
    np.fill_diagonal(a_tilde, 0.0)
    k_tilde = a_tilde.sum(axis=1)
    m_tilde = k_tilde.sum() / 2.0
    if m_tilde <= 0:
        raise ValueError("graph has no weight; modularity context undefined")
    p_tilde = a_tilde - np.outer(k_tilde, k_tilde) / (2.0 * m_tilde)
    return ModularityContext(a_tilde=a_tilde, k_tilde=k_tilde, m_tilde=m_tilde, p_tilde=p_tilde)


def generalized_modularity(b, ctx: ModularityContext):
    """Soft modularity trace(B^T P~ B) / (2 M~); tensor in, tensor out."""
    if isinstance(b, Tensor):
        quad = ad.matmul(ad.transpose(b), ad.matmul(ad.constant(ctx.p_tilde), b))
        return ad.scale(ad.trace(quad), 1.0 / (2.0 * ctx.m_tilde))
    mat = b.b if isinstance(b, MembershipMatrix) else np.asarray(b, dtype=np.float64)
    if mat.shape[0] != ctx.p_tilde.shape[0]:
        raise ValueError("membership rows must match context size")
    return float(np.trace(mat.T @ ctx.p_tilde @ mat) / (2.0 * ctx.m_tilde))


def cmf_loss(b, ctx: ModularityContext):
    """Membership loss: the negated soft modularity."""
    q = generalized_modularity(b, ctx)
    return ad.scale(q, -1.0) if isinstance(q, Tensor) else -q


# ---------------------------------------------------------------------------
# Contrastive attribute-cohesiveness losses
# ---------------------------------------------------------------------------

class PairLoss(NamedTuple):
    value: object          # float or Tensor
    n_pairs: int
    degenerate: bool       # True when no eligible pair existed


def _grouped(labels: np.ndarray, k: int):
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=k)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pos = np.empty(labels.size, dtype=np.int64)
    pos[order] = np.arange(labels.size) - offsets[labels[order]]
    return order, sizes, offsets, pos


def sample_intra_pairs(assignment: CommunityAssignment, budget: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform same-community pairs (i != j), with replacement."""
    if budget < 1:
        raise ValueError("pair budget must be >= 1")
    labels = assignment.labels
    order, sizes, offsets, pos = _grouped(labels, assignment.k)
    eligible = np.flatnonzero(sizes[labels] >= 2)
    if eligible.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    i = rng.choice(eligible, size=budget, replace=True)
    c = labels[i]
    r = rng.integers(0, sizes[c] - 1)
    r = r + (r >= pos[i])
    j = order[offsets[c] + r]
    return i, j


def sample_inter_pairs(assignment: CommunityAssignment, budget: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform cross-community pairs, with replacement."""
    if budget < 1:
        raise ValueError("pair budget must be >= 1")
    labels = assignment.labels
    n = labels.size
    order, sizes, offsets, _ = _grouped(labels, assignment.k)
    if (sizes > 0).sum() < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    i = rng.integers(0, n, size=budget)
    c = labels[i]
    r = rng.integers(0, n - sizes[c])
    r = r + np.where(r >= offsets[c], sizes[c], 0)
    j = order[r]
    return i, j


def sample_cut_pairs(g: AttributedGraph, assignment: CommunityAssignment, budget: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Literal reading of cross-community pairs: endpoints of cut edges."""
    if budget < 1:
        raise ValueError("pair budget must be >= 1")
    labels = assignment.labels
    cut = g.edges[labels[g.edges[:, 0]] != labels[g.edges[:, 1]]]
    if cut.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    idx = rng.integers(0, cut.shape[0], size=budget)
    return cut[idx, 0], cut[idx, 1]


def pair_distance_mean(embeddings, rows_i: np.ndarray, rows_j: np.ndarray):
    """Mean squared Euclidean distance between L2-normalized embedding rows."""
    tensor_in = isinstance(embeddings, Tensor)
    h = embeddings if tensor_in else ad.constant(np.asarray(embeddings, dtype=np.float64))
    hn = ad.l2_normalize_rows(h)
    diff = ad.sub(ad.gather_rows(hn, rows_i), ad.gather_rows(hn, rows_j))
    total = ad.tsum(ad.hadamard(diff, diff))
    out = ad.scale(total, 1.0 / max(len(rows_i), 1))
    return out if tensor_in else out.item()


def intra_loss(embeddings, assignment: CommunityAssignment, pair_budget: int,
               rng: np.random.Generator) -> PairLoss:
    """Mean normalized distance over sampled same-community pairs."""
    i, j = sample_intra_pairs(assignment, pair_budget, rng)
    if i.size == 0:
        zero = ad.constant(0.0) if isinstance(embeddings, Tensor) else 0.0
        return PairLoss(zero, 0, True)
    return PairLoss(pair_distance_mean(embeddings, i, j), int(i.size), False)


def inter_loss(embeddings, assignment: CommunityAssignment, pair_budget: int,
               rng: np.random.Generator, *, g: AttributedGraph | None = None,
               on_cut_edges: bool = False) -> PairLoss:
    """Mean normalized distance over sampled cross-community pairs."""
    if on_cut_edges:
        if g is None:
            raise ValueError("cut-edge sampling needs the graph")
        i, j = sample_cut_pairs(g, assignment, pair_budget, rng)
    else:
        i, j = sample_inter_pairs(assignment, pair_budget, rng)
    if i.size == 0:
        zero = ad.constant(0.0) if isinstance(embeddings, Tensor) else 0.0
        return PairLoss(zero, 0, True)
    return PairLoss(pair_distance_mean(embeddings, i, j), int(i.size), False)


def attribute_cohesiveness_loss(l_intra, l_inter, r1: float, r2: float):
    """Contrastive combination r1 * intra - r2 * inter."""
    if isinstance(l_intra, Tensor) or isinstance(l_inter, Tensor):
        li = l_intra if isinstance(l_intra, Tensor) else ad.constant(l_intra)
        lx = l_inter if isinstance(l_inter, Tensor) else ad.constant(l_inter)
        return ad.add(ad.scale(li, r1), ad.scale(lx, -r2))
    return r1 * l_intra - r2 * l_inter


def total_loss(l_m, l_a, lam: float):
    """Training objective: membership loss plus scaled cohesiveness loss."""
    if isinstance(l_m, Tensor) or isinstance(l_a, Tensor):
        lm = l_m if isinstance(l_m, Tensor) else ad.constant(l_m)
        la = l_a if isinstance(l_a, Tensor) else ad.constant(l_a)
        return ad.add(lm, ad.scale(la, lam))
    return l_m + lam * l_a


# ---------------------------------------------------------------------------
# Attribute score
# ---------------------------------------------------------------------------

def ascore(x_u, x_v, alpha: float, numeric_dims=None, text_sets=None,
           maxima=(1.0, 1.0)) -> float:
    """Blend of normalized numeric distance and Jaccard text distance.

    ``numeric_dims`` selects the feature entries compared by Euclidean
    distance; ``text_sets`` is the pair of token sets compared by Jaccard
    distance. ``maxima`` holds the (numeric, textual) normalizers, typically
    dataset-global maxima.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    smax, tmax = maxima
    numeric = 0.0
    if alpha > 0.0:
        if smax <= 0:
            raise ValueError("numeric maximum must be positive when alpha > 0")
        dims = np.asarray(numeric_dims if numeric_dims is not None
                          else np.arange(len(np.atleast_1d(x_u))), dtype=np.int64)
        du = np.asarray(x_u, dtype=np.float64)[dims] - np.asarray(x_v, dtype=np.float64)[dims]
        numeric = float(np.sqrt((du * du).sum())) / smax
    textual = 0.0
    if alpha < 1.0:
        if tmax <= 0:
            raise ValueError("textual maximum must be positive when alpha < 1")
        su, sv = (set(text_sets[0]), set(text_sets[1])) if text_sets else (set(), set())
        union = su | sv
        jaccard = 0.0 if not union else 1.0 - len(su & sv) / len(union)
        textual = jaccard / tmax
    return alpha * numeric + (1.0 - alpha) * textual
