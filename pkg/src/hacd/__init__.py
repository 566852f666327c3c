"""Attributed community detection over heterogeneity-lifted graphs.

Public surface: the graph data model and generator, the sklearn-style
:class:`HACD` estimator, the training entry points, and the clustering
metric suite. Submodules are imported lazily so the ``HACD_THREADS`` cap can
take effect before any BLAS-backed library loads.
"""

import os as _os


def _cap_threads() -> None:
    cap = _os.environ.get("HACD_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(var, cap)


_cap_threads()

__version__ = "0.1.0"

_LAZY = {
    "AttributedGraph": "graph",
    "HeteroGraph": "graph",
    "SbmConfig": "graph",
    "load_attributed_graph": "graph",
    "write_attributed_graph": "graph",
    "load_dataset_dir": "graph",
    "to_heterogeneous": "graph",
    "generate_sbm": "graph",
    "HACD": "estimator",
    "TrainConfig": "trainer",
    "train": "trainer",
    "CommunityAssignment": "objectives",
    "MembershipMatrix": "objectives",
    "classic_modularity": "objectives",
    "generalized_modularity": "objectives",
    "accuracy_hungarian": "metrics",
    "nmi": "metrics",
    "ari": "metrics",
    "f1_macro": "metrics",
    "all_metrics": "metrics",
}

__all__ = ["__version__", *_LAZY]


def __getattr__(name: str):
    if name in _LAZY:
        import importlib

        module = importlib.import_module(f".{_LAZY[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
