"""Attributed-graph data model, file ingestion, heterogeneity lifting, and a
seeded block-model generator.

An attributed graph couples an undirected entity graph with a sparse
non-negative feature matrix. Lifting promotes every active feature column to
an attribute node, yielding a typed graph with entity-entity (EE),
entity-attribute (EA) and attribute-entity (AE) adjacencies embedded in one
common index space.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .rng import substream

__all__ = [
    "GraphFormatError",
    "GraphValidationError",
    "AttributedGraph",
    "HeteroGraph",
    "SbmConfig",
    "load_attributed_graph",
    "write_attributed_graph",
    "to_heterogeneous",
    "generate_sbm",
]

EDGE_TYPES = ("EE", "EA", "AE")


class GraphFormatError(ValueError):
    """A dataset file could not be parsed; carries the offending line number."""


class GraphValidationError(ValueError):
    """Parsed content violates a graph invariant."""


def _canonicalize_edges(edges, n_nodes, drop_self_loops=False):
    """Min-id-first, sorted, deduplicated edge array of shape (M, 2)."""
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.asarray(edges, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphValidationError("edge list must be pairs")
    loops = arr[:, 0] == arr[:, 1]
    if loops.any():
        if not drop_self_loops:
            u = int(arr[loops][0, 0])
            raise GraphValidationError(f"self-loop on node {u} (use drop_self_loops to ignore)")
        arr = arr[~loops]
    if arr.size and (arr.min() < 0 or arr.max() >= n_nodes):
        raise GraphValidationError("edge endpoint outside 0..n_nodes-1")
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    arr = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return arr


@dataclass
class AttributedGraph:
    """Entity graph with a sparse non-negative feature matrix.

    Node and attribute identifiers from input files are remapped to dense
    integer ranges; the original names are kept in ``node_ids`` / ``attr_ids``
    so files can be written back in terms of the caller's identifiers.
    """

    n_nodes: int
    edges: np.ndarray                      # (M, 2) int64, canonical
    features: sp.csr_matrix                # n_nodes x d_features, non-negative
    labels: np.ndarray | None = None       # (n_nodes,) int64 in 0..k-1, or None
    node_ids: list[str] = field(default_factory=list)
    attr_ids: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.edges = _canonicalize_edges(self.edges, self.n_nodes)
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.features.eliminate_zeros()
        if self.features.shape[0] != self.n_nodes:
            raise GraphValidationError(
                f"feature matrix has {self.features.shape[0]} rows for {self.n_nodes} nodes")
        if self.features.nnz and self.features.data.min() < 0:
            raise GraphValidationError("feature values must be non-negative")
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.n_nodes)]
        if not self.attr_ids:
            self.attr_ids = [f"a{j}" for j in range(self.features.shape[1])]
        if len(self.node_ids) != self.n_nodes or len(self.attr_ids) != self.features.shape[1]:
            raise GraphValidationError("id tables do not match matrix dimensions")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_nodes,):
                raise GraphValidationError("labels must cover every node")
            k = self.labels.max() + 1 if self.labels.size else 0
            if self.labels.min() < 0 or len(np.unique(self.labels)) != k:
                raise GraphValidationError("label ids must be contiguous 0..k-1")
            if not self.label_names:
                self.label_names = [str(c) for c in range(k)]

    @property
    def d_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def n_communities(self) -> int | None:
        if self.labels is None:
            return None
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 entity adjacency."""
        if self.n_edges == 0:
            return sp.csr_matrix((self.n_nodes, self.n_nodes))
        u, v = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(u))
        a = sp.csr_matrix((data, (np.concatenate([u, v]), np.concatenate([v, u]))),
                          shape=(self.n_nodes, self.n_nodes))
        a.sum_duplicates()
        return a

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency().sum(axis=1)).ravel()


@dataclass
class HeteroGraph:
    """Typed lift of an attributed graph: entities plus one node per active
    feature column, with EE/EA/AE adjacencies in the combined index space."""

    entity_count: int
    attribute_count: int
    node_types: np.ndarray                 # 0 = entity, 1 = attribute
    active_columns: np.ndarray             # feature column behind each attribute node
    type_adjacencies: dict[str, sp.csr_matrix]   # keys EE/EA/AE, all (N, N)

    ENTITY = 0
    ATTRIBUTE = 1

    @property
    def total_nodes(self) -> int:
        return self.entity_count + self.attribute_count

    def __post_init__(self):
        n = self.total_nodes
        for name in EDGE_TYPES:
            if name not in self.type_adjacencies:
                raise GraphValidationError(f"missing {name} adjacency")
            if self.type_adjacencies[name].shape != (n, n):
                raise GraphValidationError(f"{name} adjacency must live in the full node space")


@dataclass
class SbmConfig:
    """Planted-partition generator settings: block sizes, edge probabilities
    and per-block attribute signatures."""

    blocks: list[int]
    p_in: float
    p_out: float
    n_attrs: int = 20
    signature_size: int = 5
    p_sig: float = 0.8
    p_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.blocks or any(b < 1 for b in self.blocks):
            raise GraphValidationError("blocks must be positive sizes")
        for name in ("p_in", "p_out", "p_sig", "p_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GraphValidationError(f"{name} must be in [0, 1]")
        if self.p_in <= self.p_out:
            raise GraphValidationError("p_in must exceed p_out")
        if self.signature_size * len(self.blocks) > self.n_attrs:
            raise GraphValidationError("signatures do not fit into n_attrs")


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


_NATURAL_RE = re.compile(r"(\d+)")


def _natural_key(name: str):
    """Sort key treating digit runs numerically, so 'a2' precedes 'a10'."""
    return tuple((0, int(part)) if part.isdigit() else (1, part)
                 for part in _NATURAL_RE.split(name) if part != "")


def load_attributed_graph(edges_path, features_path, labels_path=None, *,
                          drop_self_loops: bool = False) -> AttributedGraph:
    """Read the TSV edge list, the feature table (sparse triples or dense CSV,
    auto-detected by header) and the optional label file.

    Node and attribute identifiers may be arbitrary strings; internal ids are
    dense 0..n-1 indices in natural-sorted identifier order, which makes the
    written form a canonical fixed point. With a dense feature table the
    enumerated rows define the node universe and edges referencing other nodes
    are rejected.
    """
    raw_edges: list[tuple[str, str, int]] = []
    for lineno, line in _data_lines(edges_path):
        parts = line.split("\t")
        if len(parts) == 1:
            parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"{edges_path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
        raw_edges.append((parts[0], parts[1], lineno))

    # Peek at the feature file to pick sparse-triple vs dense-CSV parsing.
    with open(features_path, "r", encoding="utf-8") as fh:
        head = ""
        for raw in fh:
            if raw.strip() and not raw.lstrip().startswith("#"):
                head = raw
                break
    dense = head.startswith("node,")

    raw_triples: list[tuple[str, str, float]] = []
    dense_attr_order: list[str] | None = None
    seen_triples: set[tuple[str, str]] = set()
    feature_nodes: list[str] = []

    if dense:
        with open(features_path, "r", encoding="utf-8") as fh:
            reader = csv.reader(io.StringIO("".join(
                l for l in fh if l.strip() and not l.lstrip().startswith("#"))))
            rows = list(reader)
        header = rows[0]
        dense_attr_order = list(header[1:])
        for r, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise GraphFormatError(f"{features_path}:{r}: row width mismatch")
            if row[0] in feature_nodes:
                raise GraphValidationError(f"{features_path}:{r}: duplicate node row {row[0]!r}")
            feature_nodes.append(row[0])
            for attr, cell in zip(dense_attr_order, row[1:]):
                try:
                    val = float(cell)
                except ValueError as exc:
                    raise GraphFormatError(f"{features_path}:{r}: bad value {cell!r}") from exc
                if val != 0.0:
                    raw_triples.append((row[0], attr, val))
    else:
        for lineno, line in _data_lines(features_path):
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphFormatError(
                    f"{features_path}:{lineno}: expected 'node<TAB>attr<TAB>value', got {line!r}")
            key = (parts[0], parts[1])
            if key in seen_triples:
                raise GraphValidationError(
                    f"{features_path}:{lineno}: duplicate feature triple for {key}")
            seen_triples.add(key)
            try:
                val = float(parts[2])
            except ValueError as exc:
                raise GraphFormatError(f"{features_path}:{lineno}: bad value {parts[2]!r}") from exc
            if val != 0.0:
                raw_triples.append((parts[0], parts[1], val))

    raw_labels: dict[str, str] = {}
    if labels_path is not None:
        for lineno, line in _data_lines(labels_path):
            parts = line.split("\t")
            if len(parts) == 1:
                parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{labels_path}:{lineno}: expected 'node<TAB>label'")
            if parts[0] in raw_labels:
                raise GraphValidationError(f"{labels_path}:{lineno}: duplicate label for {parts[0]}")
            raw_labels[parts[0]] = parts[1]

    # Node universe: enumerated rows for dense tables, union of mentions for
    # sparse triples; internal ids follow natural identifier order.
    if dense:
        universe = set(feature_nodes)
        for src, dst, lineno in raw_edges:
            if src not in universe or dst not in universe:
                raise GraphValidationError(
                    f"{edges_path}:{lineno}: edge references node absent from the feature table")
        for name in raw_labels:
            if name not in universe:
                raise GraphValidationError(
                    f"{labels_path}: label for node {name!r} absent from the feature table")
    else:
        universe = {name for e in raw_edges for name in e[:2]}
        universe.update(name for name, _, _ in raw_triples)
        universe.update(raw_labels)
    node_ids = sorted(universe, key=_natural_key)
    node_index = {name: i for i, name in enumerate(node_ids)}

    if dense_attr_order is not None:
        attr_ids = list(dense_attr_order)
    else:
        attr_ids = sorted({a for _, a, _ in raw_triples}, key=_natural_key)
    attr_index = {name: j for j, name in enumerate(attr_ids)}

    n = len(node_ids)
    edges = _canonicalize_edges(
        [(node_index[s], node_index[d]) for s, d, _ in raw_edges], n,
        drop_self_loops=drop_self_loops)

    if raw_triples:
        rows, cols, vals = zip(*[(node_index[v], attr_index[a], x) for v, a, x in raw_triples])
        features = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(attr_ids)))
    else:
        features = sp.csr_matrix((n, len(attr_ids)))

    labels = None
    label_names: list[str] = []
    if labels_path is not None:
        if set(raw_labels) != universe:
            raise GraphValidationError(
                f"label file covers {len(raw_labels)} of {n} nodes")
        label_names = sorted(set(raw_labels.values()), key=_natural_key)
        lut = {name: c for c, name in enumerate(label_names)}
        labels = np.array([lut[raw_labels[nid]] for nid in node_ids], dtype=np.int64)

    return AttributedGraph(n_nodes=n, edges=edges, features=features, labels=labels,
                           node_ids=node_ids, attr_ids=attr_ids, label_names=label_names)


def write_attributed_graph(g: AttributedGraph, out_dir) -> dict[str, Path]:
    """Write ``edges.tsv``, ``features.tsv`` (sparse triples) and, when labels
    exist, ``labels.tsv`` in canonical order. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"edges": out / "edges.tsv", "features": out / "features.tsv"}

    with open(paths["edges"], "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{g.node_ids[u]}\t{g.node_ids[v]}\n")

    coo = g.features.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(paths["features"], "w", encoding="utf-8") as fh:
        for idx in order:
            i, j, val = coo.row[idx], coo.col[idx], coo.data[idx]
            fh.write(f"{g.node_ids[i]}\t{g.attr_ids[j]}\t{val:.17g}\n")

    if g.labels is not None:
        paths["labels"] = out / "labels.tsv"
        with open(paths["labels"], "w", encoding="utf-8") as fh:
            for i in range(g.n_nodes):
                fh.write(f"{g.node_ids[i]}\t{g.label_names[g.labels[i]]}\n")
    return paths


def load_dataset_dir(data_dir, *, drop_self_loops: bool = False) -> AttributedGraph:
    """Load a directory produced by :func:`write_attributed_graph` / the CLI."""
    d = Path(data_dir)
    labels = d / "labels.tsv"
    return load_attributed_graph(d / "edges.tsv", d / "features.tsv",
                                 labels if labels.exists() else None,
                                 drop_self_loops=drop_self_loops)


# ---------------------------------------------------------------------------
# Heterogeneity lifting
# ---------------------------------------------------------------------------

def to_heterogeneous(g: AttributedGraph, *, binary_lift: bool = False) -> HeteroGraph:
    """Promote every active feature column to an attribute node.

    EA edges connect an entity to each attribute it carries; by default the
    edge weight is the feature value (identical to 1 for binary features),
    with ``binary_lift`` collapsing all weights to 1. AE is the exact
    transpose. Raises when no feature is active anywhere, since the lifted
    graph would not be heterogeneous.
    """
    x = g.features.tocoo()
    if x.nnz == 0:
        raise GraphValidationError("no active feature columns; cannot lift to a typed graph")
    active = np.unique(x.col)
    col_rank = -np.ones(g.d_features, dtype=np.int64)
    col_rank[active] = np.arange(len(active))

    n, m = g.n_nodes, len(active)
    total = n + m
    node_types = np.zeros(total, dtype=np.int64)
    node_types[n:] = HeteroGraph.ATTRIBUTE

    if g.n_edges:
        u, v = g.edges[:, 0], g.edges[:, 1]
        ee = sp.csr_matrix((np.ones(2 * len(u)),
                            (np.concatenate([u, v]), np.concatenate([v, u]))),
                           shape=(total, total))
    else:
        ee = sp.csr_matrix((total, total))

    weights = np.ones(x.nnz) if binary_lift else x.data.astype(np.float64)
    ea = sp.csr_matrix((weights, (x.row, n + col_rank[x.col])), shape=(total, total))
    ae = ea.T.tocsr()

    return HeteroGraph(entity_count=n, attribute_count=m, node_types=node_types,
                       active_columns=active,
                       type_adjacencies={"EE": ee, "EA": ea, "AE": ae})


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def generate_sbm(cfg: SbmConfig) -> AttributedGraph:
    """Planted-partition graph with per-block attribute signatures.

    Block ``b`` owns attribute columns ``[b*signature_size, (b+1)*signature_size)``;
    its nodes carry each signature attribute with probability ``p_sig`` and
    every other attribute with probability ``p_noise``. Labels are the block
    ids. Deterministic for a fixed config seed.
    """
    rng = substream(cfg.seed, "sbm")
    sizes = list(cfg.blocks)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    nb = len(sizes)

    edges = []
    for bi in range(nb):
        lo_i, hi_i = offsets[bi], offsets[bi + 1]
        # intra-block upper triangle
        size = sizes[bi]
        if size > 1:
            draws = rng.random((size, size))
            iu = np.triu_indices(size, k=1)
            hit = draws[iu] < cfg.p_in
            edges.append(np.stack([iu[0][hit] + lo_i, iu[1][hit] + lo_i], axis=1))
        for bj in range(bi + 1, nb):
            lo_j = offsets[bj]
            draws = rng.random((sizes[bi], sizes[bj]))
            ii, jj = np.nonzero(draws < cfg.p_out)
            edges.append(np.stack([ii + lo_i, jj + lo_j], axis=1))
    edge_arr = np.concatenate(edges, axis=0) if edges else np.zeros((0, 2), dtype=np.int64)

    probs = np.full((n, cfg.n_attrs), cfg.p_noise)
    for b in range(nb):
        cols = slice(b * cfg.signature_size, (b + 1) * cfg.signature_size)
        probs[offsets[b]:offsets[b + 1], cols] = cfg.p_sig
    feats = (rng.random((n, cfg.n_attrs)) < probs).astype(np.float64)

    labels = np.concatenate([np.full(sizes[b], b, dtype=np.int64) for b in range(nb)])
    return AttributedGraph(n_nodes=n, edges=edge_arr, features=sp.csr_matrix(feats),
                           labels=labels)
