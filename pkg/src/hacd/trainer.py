"""Training loop: membership initialization, Adam with decoupled weight
decay, the per-epoch forward pass, and binary checkpoints.

Each epoch recomputes the meta-path graphs from the current edge-type mixing
logits, runs the attention forward pass, reads a soft membership matrix off
the fused embedding through a linear head (its per-node bias starts at
large-margin logits of the initial one-hot membership), and descends the
selected loss. Discrete choices made along the way (top-k neighbor selection,
community refresh, pair sampling) are frozen within the epoch, which is also
what makes the analytic gradient finite-difference-checkable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import attention as att
from . import objectives as obj
from .autodiff import DiffMathError, Tape, Tensor
from .graph import AttributedGraph, HeteroGraph, to_heterogeneous
from .metapath import HeteroConvLayer, MetaPathGraph, compose_metapaths
from .rng import substream

__all__ = [
    "ConfigError", "TrainingDiverged", "TrainConfig", "ModelState",
    "TrainResult", "init_membership", "adam_step", "train",
    "assign_communities", "save_checkpoint", "load_checkpoint",
    "run_gradcheck",
]

LOSS_MODES = ("full", "a2m", "cmf")
INIT_MODES = ("labels", "kmeans", "random")
CHECKPOINT_MAGIC = b"HACD1"
CHECKPOINT_VERSION = 1
INIT_MARGIN = 8.0   # logit margin for the one-hot membership bias


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the last good state."""

    def __init__(self, message, state, history):
        super().__init__(message)
        self.state = state
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 400
    dim: int = 32
    learning_rate: float = 0.01
    weight_decay: float = 0.2
    lam: float = 0.1
    r1: float = 1.0
    r2: float = 1.0
    layers: int = 2
    top_k: int = 10
    order: int = 2
    decay: float = 0.5
    pair_budget: int = 4096
    seed: int = 0
    loss_mode: str = "full"
    init_mode: str = "labels"
    k: int | None = None
    heads: int = 1
    binary_lift: bool = False
    paper_literal_eq3: bool = False
    inter_on_cut_edges: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.dim < 1 or self.layers < 1 or self.top_k < 1 or self.order < 1:
            raise ConfigError("dim, layers, top_k and order must be >= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must be in (0, 1]")
        if self.pair_budget < 1:
            raise ConfigError("pair_budget must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")
        if self.heads != 1:
            raise ConfigError("multi-head attention is reserved; only heads=1 is supported")
        if self.k is not None and self.k < 2:
            raise ConfigError("k must be >= 2")


@dataclass
class ModelState:
    params: dict[str, Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    epoch: int = 0
    t: int = 0
    k: int = 2

    @classmethod
    def fresh(cls, params: dict[str, Tensor], k: int) -> "ModelState":
        return cls(params=params,
                   adam_m={n: np.zeros_like(p.data) for n, p in params.items()},
                   adam_v={n: np.zeros_like(p.data) for n, p in params.items()},
                   epoch=0, t=0, k=k)


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    assignment: obj.CommunityAssignment
    membership: obj.MembershipMatrix
    embedding: np.ndarray
    provenance: list[dict]
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_membership(g: AttributedGraph, init_mode: str, k: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One-hot initial membership and the feature matrix with it appended.

    ``labels`` mode encodes the ground-truth community ids; ``kmeans`` runs a
    seeded k-means over the raw features; ``random`` assigns uniformly.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    if init_mode == "labels":
        if g.labels is None:
            raise ConfigError("init_mode=labels requires ground-truth labels")
        if g.n_communities != k:
            raise ConfigError(f"labels define k={g.n_communities}, got k={k}")
        assign = g.labels
    elif init_mode == "kmeans":
        from sklearn.cluster import KMeans
        seed = int(rng.integers(0, 2**31 - 1))
        assign = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(
            g.features.toarray())
    elif init_mode == "random":
        assign = rng.integers(0, k, size=g.n_nodes)
    else:
        raise ConfigError(f"unknown init_mode {init_mode!r}")
    m_init = np.zeros((g.n_nodes, k))
    m_init[np.arange(g.n_nodes), assign] = 1.0
    x_prime = np.concatenate([g.features.toarray(), m_init], axis=1)
    return m_init, x_prime


def _glorot(rng, fan_in, fan_out, shape):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def _init_params(g: AttributedGraph, cfg: TrainConfig, k: int,
                 m_init: np.ndarray, rng: np.random.Generator) -> dict[str, Tensor]:
    d, dim = g.d_features, cfg.dim
    params = {
        "proj_entity": ad.param(_glorot(rng, d, dim, (d, dim)), "proj_entity"),
        "sem_w": ad.param(_glorot(rng, dim, dim, (dim, dim)), "sem_w"),
        "sem_b": ad.param(np.zeros(dim), "sem_b"),
        "sem_q": ad.param(rng.normal(0.0, 1.0, size=(dim, 1)), "sem_q"),
        "attr_u": ad.param(np.zeros(d), "attr_u"),
        "balance_s": ad.param(np.zeros((cfg.layers, 1)), "balance_s"),
        "balance_a": ad.param(np.zeros((cfg.layers, 1)), "balance_a"),
        "conv_logits": ad.param(np.zeros((1, 3)), "conv_logits"),
        "head_w": ad.param(rng.normal(0.0, 0.01, size=(dim, k)), "head_w"),
        "head_bias": ad.param(INIT_MARGIN * m_init, "head_bias"),
    }
    for p in range(cfg.layers):
        params[f"attn_vec_{p}"] = ad.param(
            rng.normal(0.0, 0.5, size=(2 * dim, 1)), f"attn_vec_{p}")
    return params


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              adam_m: dict[str, np.ndarray], adam_v: dict[str, np.ndarray],
              lr: float, weight_decay: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with decoupled decay applied before the moment step."""
    if t < 1:
        raise ConfigError("Adam step count starts at 1")
    for name in sorted(params):
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise DiffMathError(f"non-finite gradient for parameter '{name}'")
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        p.data *= (1.0 - lr * weight_decay)
        adam_m[name] = beta1 * adam_m[name] + (1.0 - beta1) * g
        adam_v[name] = beta2 * adam_v[name] + (1.0 - beta2) * (g * g)
        m_hat = adam_m[name] / (1.0 - beta1 ** t)
        v_hat = adam_v[name] / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Per-epoch structure and forward pass
# ---------------------------------------------------------------------------

@dataclass
class _TrainSetup:
    hetero: HeteroGraph
    x_dense: np.ndarray
    a_entity: np.ndarray          # dense symmetric entity adjacency
    ctx: obj.ModularityContext
    k: int


@dataclass
class _EpochPlan:
    metapaths: list[MetaPathGraph]
    masks: list[np.ndarray]
    const_log_weights: list[np.ndarray | None]   # None for the first path
    pairs: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    nonself: list[np.ndarray]


@dataclass
class _FrozenSample:
    communities: obj.CommunityAssignment
    intra: tuple[np.ndarray, np.ndarray]
    inter: tuple[np.ndarray, np.ndarray]


def _build_setup(g: AttributedGraph, cfg: TrainConfig, k: int) -> _TrainSetup:
    hetero = to_heterogeneous(g, binary_lift=cfg.binary_lift)
    return _TrainSetup(
        hetero=hetero,
        x_dense=g.features.toarray(),
        a_entity=g.adjacency().toarray(),
        ctx=obj.higher_order_adjacency(g, order=cfg.order, decay=cfg.decay),
        k=k,
    )


def _build_plan(setup: _TrainSetup, params: dict[str, Tensor], cfg: TrainConfig) -> _EpochPlan:
    layer = HeteroConvLayer(logits=params["conv_logits"].data.ravel())
    metapaths = compose_metapaths([layer] * cfg.layers, setup.hetero, cfg.top_k)
    masks, const_logw, pairs, nonself = [], [], [], []
    for p, mp in enumerate(metapaths):
        mask = mp.dense_mask()
        masks.append(mask)
        if p == 0:
            const_logw.append(None)     # differentiable weights rebuilt in-forward
        else:
            w = mp.dense_weights()
            logw = np.zeros_like(w)
            logw[mask] = np.log(w[mask])
            const_logw.append(logw)
        ii, jj, ptr = mp.pair_arrays()
        pairs.append((ii, jj, ptr))
        nonself.append(ii != jj)
    return _EpochPlan(metapaths=metapaths, masks=masks, const_log_weights=const_logw,
                      pairs=pairs, nonself=nonself)


@dataclass
class _ForwardOut:
    loss: Tensor
    l_m: Tensor
    l_a: Tensor
    q_tilde: Tensor
    membership: Tensor
    embedding: Tensor
    communities: obj.CommunityAssignment
    intra: tuple[np.ndarray, np.ndarray]
    inter: tuple[np.ndarray, np.ndarray]
    degenerate: list[str]


def _forward(params: dict[str, Tensor], setup: _TrainSetup, plan: _EpochPlan,
             cfg: TrainConfig, g: AttributedGraph, epoch: int,
             frozen: _FrozenSample | None = None) -> _ForwardOut:
    h_ent = att.project_entity_features(setup.x_dense, params["proj_entity"])

    # Layer-1 convolved entity block, used directly so the mixing logits stay
    # inside the differentiable graph; composed paths carry frozen weights.
    alpha = ad.row_softmax(params["conv_logits"])
    alpha_ee = ad.matmul(alpha, ad.constant([[1.0], [0.0], [0.0]]))
    c1 = ad.add(ad.hadamard(alpha_ee, ad.constant(setup.a_entity)),
                ad.constant(np.eye(setup.hetero.entity_count)))

    h_paths = []
    for p, mp in enumerate(plan.metapaths):
        if p == 0:
            pad = ad.constant(np.where(plan.masks[p], 0.0, 1.0))
            logw = ad.log(ad.add(c1, pad))
        else:
            logw = ad.constant(plan.const_log_weights[p])
        coeffs = att.node_attention_coeffs(
            h_ent, mp, params[f"attn_vec_{p}"], edge_log_weights=logw,
            paper_literal=cfg.paper_literal_eq3)
        h_paths.append(att.aggregate(h_ent, coeffs, mp))

    sem = att.SemanticAttentionParams(w=params["sem_w"], b=params["sem_b"], q=params["sem_q"])
    importances = att.metapath_importance(h_paths, sem)

    u_eff = ad.softplus(params["attr_u"])
    gamma_terms = []
    for p in range(len(plan.metapaths)):
        ii, jj, ptr = plan.pairs[p]
        mask = plan.nonself[p]
        count = int(mask.sum())
        if count == 0:
            raise ConfigError(f"meta-path {p} has no non-self pairs")
        scores = att.attr_similarity(setup.x_dense, u_eff, ii, jj)
        gamma = att.attr_coeffs(scores, ptr)
        picked = ad.hadamard(gamma, ad.constant(mask.astype(np.float64)))
        gamma_terms.append(ad.scale(ad.tsum(picked), 1.0 / count))

    q_s, q_a = att.balance_weights(params["balance_s"], params["balance_a"])
    beta = att.attribute_level_coeffs(gamma_terms, importances, q_s, q_a)
    h_fused = att.fuse(beta, h_paths)

    logits = ad.add(ad.matmul(h_fused, params["head_w"]), params["head_bias"])
    membership = ad.row_softmax(logits)
    q_tilde = obj.generalized_modularity(membership, setup.ctx)
    l_m = ad.scale(q_tilde, -1.0)

    degenerate = []
    if frozen is None:
        communities = obj.CommunityAssignment(np.argmax(membership.data, axis=1), setup.k)
        rng = substream(cfg.seed, "pairs", epoch)
        intra = obj.sample_intra_pairs(communities, cfg.pair_budget, rng)
        if cfg.inter_on_cut_edges:
            inter = obj.sample_cut_pairs(g, communities, cfg.pair_budget, rng)
        else:
            inter = obj.sample_inter_pairs(communities, cfg.pair_budget, rng)
    else:
        communities, intra, inter = frozen.communities, frozen.intra, frozen.inter

    if intra[0].size == 0:
        l_intra = ad.constant(0.0)
        degenerate.append("intra")
    else:
        l_intra = obj.pair_distance_mean(h_fused, *intra)
    if inter[0].size == 0:
        l_inter = ad.constant(0.0)
        degenerate.append("inter")
    else:
        l_inter = obj.pair_distance_mean(h_fused, *inter)
    l_a = obj.attribute_cohesiveness_loss(l_intra, l_inter, cfg.r1, cfg.r2)

    if cfg.loss_mode == "full":
        loss = obj.total_loss(l_m, l_a, cfg.lam)
    elif cfg.loss_mode == "cmf":
        loss = l_m
    else:
        loss = l_a

    return _ForwardOut(loss=loss, l_m=l_m, l_a=l_a, q_tilde=q_tilde,
                       membership=membership, embedding=h_fused,
                       communities=communities, intra=intra, inter=inter,
                       degenerate=degenerate)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _resolve_k(g: AttributedGraph, cfg: TrainConfig) -> int:
    if cfg.init_mode == "labels":
        if g.labels is None:
            raise ConfigError("init_mode=labels requires a labeled dataset")
        k = g.n_communities
        if cfg.k is not None and cfg.k != k:
            raise ConfigError(f"labels define k={k}, got k={cfg.k}")
    else:
        k = cfg.k if cfg.k is not None else g.n_communities
        if k is None:
            raise ConfigError("k is required when the dataset carries no labels")
    if k < 2:
        raise ConfigError("k must be >= 2")
    return int(k)


def assign_communities(membership) -> obj.CommunityAssignment:
    """Hard partition from the soft membership: per-row argmax, ties toward
    the lowest community index."""
    b = membership.b if isinstance(membership, obj.MembershipMatrix) else np.asarray(membership)
    return obj.CommunityAssignment(labels=np.argmax(b, axis=1), k=b.shape[1])


def train(g: AttributedGraph, cfg: TrainConfig,
          resume_state: ModelState | None = None) -> TrainResult:
    """Run the full optimization and return the final state, per-epoch
    history and the detected communities.

    Raises :class:`TrainingDiverged` (with the last good state attached) if
    the loss or any gradient goes non-finite.
    """
    k = resume_state.k if resume_state is not None else _resolve_k(g, cfg)
    setup = _build_setup(g, cfg, k)

    if resume_state is None:
        rng = substream(cfg.seed, "init")
        m_init, _ = init_membership(g, cfg.init_mode, k, rng)
        state = ModelState.fresh(_init_params(g, cfg, k, m_init, rng), k)
    else:
        state = resume_state

    history: list[dict] = []
    warnings: list[str] = []
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        plan = _build_plan(setup, state.params, cfg)
        try:
            ad.zero_grads(state.params.values())
            with Tape() as tape:
                fwd = _forward(state.params, setup, plan, cfg, g, epoch)
                tape.backward(fwd.loss)
            grads = {n: p.grad for n, p in state.params.items() if p.grad is not None}
            adam_step(state.params, grads, state.adam_m, state.adam_v,
                      cfg.learning_rate, cfg.weight_decay, t=state.t + 1)
        except DiffMathError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", state, history) from exc
        state.epoch = epoch
        state.t += 1
        for tag in fwd.degenerate:
            msg = f"{tag} pair sampling degenerate at epoch {epoch}"
            if msg not in warnings:
                warnings.append(msg)
        history.append({
            "epoch": epoch,
            "loss": fwd.loss.item(),
            "l_m": fwd.l_m.item(),
            "l_a": fwd.l_a.item(),
            "q_tilde": fwd.q_tilde.item(),
        })

    plan = _build_plan(setup, state.params, cfg)
    final = _forward(state.params, setup, plan, cfg, g, epoch=state.epoch + 1)
    membership = obj.MembershipMatrix(final.membership.data)
    alpha_weights = HeteroConvLayer(logits=state.params["conv_logits"].data.ravel()).weights()
    provenance = [{"path": mp.path_id, "layers": mp.provenance,
                   "edge_type_weights": {k_: round(v, 6) for k_, v in alpha_weights.items()}}
                  for mp in plan.metapaths]
    return TrainResult(state=state, history=history,
                       assignment=assign_communities(membership),
                       membership=membership, embedding=final.embedding.data.copy(),
                       provenance=provenance, warnings=warnings)


# ---------------------------------------------------------------------------
# Gradient check harness
# ---------------------------------------------------------------------------

def run_gradcheck(g: AttributedGraph, cfg: TrainConfig, epsilon: float = 1e-5):
    """Finite-difference check of the full-loss gradient on ``g``.

    Discrete structure (meta-path selection, community refresh, sampled
    pairs) is frozen at the base point, exactly as it is within one training
    epoch.
    """
    cfg = replace(cfg, loss_mode="full")
    k = _resolve_k(g, cfg)
    setup = _build_setup(g, cfg, k)
    rng = substream(cfg.seed, "init")
    m_init, _ = init_membership(g, cfg.init_mode, k, rng)
    params = _init_params(g, cfg, k, m_init, rng)
    plan = _build_plan(setup, params, cfg)

    base = _forward(params, setup, plan, cfg, g, epoch=1)
    frozen = _FrozenSample(communities=base.communities, intra=base.intra, inter=base.inter)

    def fn(p):
        return _forward(p, setup, plan, cfg, g, epoch=1, frozen=frozen).loss

    return ad.finite_diff_check(fn, params, epsilon=epsilon)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(name.encode())) + name.encode()
    head += struct.pack("<B", data.ndim)
    for dim in data.shape:
        head += struct.pack("<Q", dim)
    return head + data.tobytes()


def save_checkpoint(state: ModelState, path) -> None:
    """Binary snapshot: magic, version, then length-prefixed named arrays for
    parameters, both Adam moments and the step counters."""
    entries: list[tuple[str, np.ndarray]] = [
        ("meta/epoch", np.array(float(state.epoch))),
        ("meta/t", np.array(float(state.t))),
        ("meta/k", np.array(float(state.k))),
    ]
    for name in sorted(state.params):
        entries.append((f"p/{name}", state.params[name].data))
        entries.append((f"m/{name}", state.adam_m[name]))
        entries.append((f"v/{name}", state.adam_v[name]))
    blob = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        blob += _pack_entry(name, arr)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ConfigError("not a model checkpoint (bad magic bytes)")
    version = struct.unpack_from("<H", blob, 5)[0]
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    count = struct.unpack_from("<I", blob, 7)[0]
    offset = 11
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack_from("<H", blob, offset)[0]
        offset += 2
        name = blob[offset:offset + name_len].decode()
        offset += name_len
        ndim = struct.unpack_from("<B", blob, offset)[0]
        offset += 1
        shape = []
        for _ in range(ndim):
            shape.append(struct.unpack_from("<Q", blob, offset)[0])
            offset += 8
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += size * 8
        arrays[name] = np.array(arr, dtype=np.float64)
    params, adam_m, adam_v = {}, {}, {}
    for name, arr in arrays.items():
        kind, _, rest = name.partition("/")
        if kind == "p":
            params[rest] = ad.param(arr, rest)
        elif kind == "m":
            adam_m[rest] = arr
        elif kind == "v":
            adam_v[rest] = arr
    def _meta(name: str) -> int:
        return int(arrays[name].reshape(-1)[0])

    return ModelState(params=params, adam_m=adam_m, adam_v=adam_v,
                      epoch=_meta("meta/epoch"), t=_meta("meta/t"), k=_meta("meta/k"))
