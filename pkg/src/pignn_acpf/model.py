"""Unrolled residual-to-update operator with MLP or edge-aware attention aggregation.

Each correction step computes mismatches, builds node features
``[V, theta, dP, dQ, m]``, aggregates neighbour context, decodes
``(dtheta, dV, dm)`` and applies it directly (optionally capped) or through
the backtracking line search.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import BatchedGraph, active_merits, graph_arrays, graph_merits, residuals

MODES = ("train", "train_ls", "infer_plain", "infer_caps", "infer_ls", "infer_caps_ls")
EVAL_MODES = {"base": "infer_plain", "caps": "infer_caps", "ls": "infer_ls", "caps_ls": "infer_caps_ls"}
PHYS_COLUMNS = 4  # V, theta, dP, dQ
EDGE_FEATURES = 4


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LsConfig:
    alpha0: float = 1.0
    c1: float = 1e-4
    rho: float = 0.5
    alpha_min: float = 0.05
    d_theta_max: float = 0.3
    d_v_frac: float = 0.10
    v_min: float = 0.8
    v_max: float = 1.2

    def __post_init__(self):
        if not 0 < self.alpha_min < self.alpha0:
            raise ValueError(f"need 0 < alpha_min < alpha0, got {self.alpha_min}, {self.alpha0}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not 0 < self.c1 < 1:
            raise ValueError(f"c1 must lie in (0, 1), got {self.c1}")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "attn"  # "mlp" | "attn"
    hidden: int = 16  # latent size d
    heads: int = 4
    layers: int = 1
    channels: int = 4  # DeepSets message channels
    edge_hidden: int = 16
    update_hidden: int = 16
    slope: float = 0.01
    output_gain: float = 0.1
    residual_scaling: str = "diag"  # "diag": divide dP, dQ features by |B_ii|; "raw": unscaled
    steps: int = 10  # number of per-step weight sets
    share_weights: bool = False  # one weight set reused by every step

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        if self.kind not in ("mlp", "attn"):
            raise ValueError(f"unknown aggregator kind {self.kind!r}")
        if self.residual_scaling not in ("raw", "diag"):
            raise ValueError(f"unknown residual scaling {self.residual_scaling!r}")
        if self.kind == "attn" and self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")

    @property
    def feature_width(self) -> int:
        return PHYS_COLUMNS + self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def weight_sets(self) -> int:
        return 1 if self.share_weights else self.steps


def _glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """Glorot-uniform weights and zero biases; one set per step unless weights are shared."""
        rng = np.random.default_rng(seed)
        shapes: dict[str, np.ndarray] = {}
        for k in range(config.weight_sets):
            prefix = "" if config.share_weights else f"step{k}."
            for name, value in cls._init_set(config, rng).items():
                shapes[prefix + name] = value
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in shapes.items()})

    @staticmethod
    def _init_set(config: ModelConfig, rng) -> dict[str, np.ndarray]:
        d, f = config.hidden, config.feature_width
        shapes: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out, gain=1.0, bias=True):
            shapes[f"{name}.W"] = _glorot(rng, fan_in, fan_out, gain)
            if bias:
                shapes[f"{name}.b"] = np.zeros(fan_out)

        if config.kind == "attn":
            for layer in range(config.layers):
                dense(f"attn{layer}.q", f, d, bias=False)
                dense(f"attn{layer}.k", f, d, bias=False)
                dense(f"attn{layer}.v", f, d, bias=False)
                dense(f"attn{layer}.o", d, d, bias=False)
                dense(f"edge{layer}.0", EDGE_FEATURES, config.edge_hidden)
                dense(f"edge{layer}.1", config.edge_hidden, config.heads)
        else:
            dense("msg.0", f + EDGE_FEATURES, config.update_hidden)
            dense("msg.1", config.update_hidden, config.channels)
            dense("msg.proj", config.channels, d, bias=False)
        dense("upd.0", f + d, config.update_hidden)
        dense("upd.1", config.update_hidden, config.update_hidden)
        dense("upd.2", config.update_hidden, 2 + d, gain=config.output_gain)
        return shapes

    def at(self, k: int) -> "ModelParams":
        """View with the weights used at step ``k``; steps beyond the trained range reuse the last set."""
        if self.config.share_weights:
            return self
        prefix = f"step{min(k, self.config.steps - 1)}."
        return ModelParams(self.config, {name[len(prefix):]: t for name, t in self.tensors.items()
                                         if name.startswith(prefix)})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), True, k) for k, t in self.tensors.items()})

    def zero_grad(self):
        ad.zero_grad(self.parameters())


def _dense(params: ModelParams, name: str, x: Tensor) -> Tensor:
    bias = params.tensors.get(f"{name}.b")
    return ad.affine(x, params[f"{name}.W"], bias)


def edge_inputs(graph: BatchedGraph) -> np.ndarray:
    """Signed log1p squashing of the edge features; raw admittances span about 1 to 300 p.u."""
    ell = graph.edge_features
    return np.sign(ell) * np.log1p(np.abs(ell))


# --- per-step pieces -------------------------------------------------------------

def injections_t(graph: BatchedGraph, v: Tensor, theta: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable P and Q via the edge list (sin/cos of angle differences)."""
    vi, vk = ad.gather(v, graph.dst), ad.gather(v, graph.src)
    dth = ad.gather(theta, graph.dst) - ad.gather(theta, graph.src)
    c, s = ad.cos(dth), ad.sin(dth)
    w = vi * vk
    v2 = v * v
    p = v2 * graph.g_diag + ad.scatter_add(w * (c * graph.g_edge + s * graph.b_edge), graph.dst, graph.n)
    q = ad.scatter_add(w * (s * graph.g_edge - c * graph.b_edge), graph.dst, graph.n) - v2 * graph.b_diag
    return p, q


def residuals_t(graph: BatchedGraph, v: Tensor, theta: Tensor) -> tuple[Tensor, Tensor]:
    p, q = injections_t(graph, v, theta)
    return (graph.p_set - p) * graph.p_mask, (graph.q_set - q) * graph.q_mask


def residual_scale(graph: BatchedGraph, config: ModelConfig) -> np.ndarray | float:
    """Per-bus divisor for the residual feature columns."""
    if config.residual_scaling == "raw":
        return 1.0
    return 1.0 / np.maximum(np.abs(graph.b_diag), 1e-6)


def phys_features(v: Tensor, theta: Tensor, dp: Tensor, dq: Tensor, m: Tensor, scale=1.0) -> Tensor:
    """Node features ``[V, theta, dP, dQ, m]`` of width 4 + d; ``scale`` multiplies the residual columns."""
    if not (np.isscalar(scale) and scale == 1.0):
        dp, dq = dp * scale, dq * scale
    cols = [ad.reshape(t, (-1, 1)) for t in (v, theta, dp, dq)]
    return ad.concat(cols + [m], axis=1)


def mlp_aggregate(features: Tensor, graph: BatchedGraph, params: ModelParams, edge_in=None) -> Tensor:
    """DeepSets context: sum over neighbours of a shared message network, then a linear lift to d."""
    cfg = params.config
    if edge_in is None:
        edge_in = edge_inputs(graph)
    # first message layer split by input block: node rows are projected once, then gathered to edges
    weight, width = params["msg.0.W"], features.shape[1]
    from_nodes = ad.gather(ad.matmul(features, weight[:width]), graph.src)
    from_edges = ad.affine(Tensor(edge_in), weight[width:], params["msg.0.b"])
    hidden = ad.leaky_relu(from_nodes + from_edges, cfg.slope)
    messages = _dense(params, "msg.1", hidden)
    pooled = ad.scatter_add(messages, graph.dst, graph.n)
    return ad.matmul(pooled, params["msg.proj.W"])


def attention_weights(features: Tensor, graph: BatchedGraph, params: ModelParams, layer: int = 0, edge_in=None):
    """Per-edge, per-head weights alpha (E, H) normalised over each node's incoming edges."""
    cfg = params.config
    if edge_in is None:
        edge_in = edge_inputs(graph)
    e = graph.src.size
    q = ad.matmul(features, params[f"attn{layer}.q.W"])
    k = ad.matmul(features, params[f"attn{layer}.k.W"])
    qe = ad.reshape(ad.gather(q, graph.dst), (e, cfg.heads, cfg.head_dim))
    ke = ad.reshape(ad.gather(k, graph.src), (e, cfg.heads, cfg.head_dim))
    scores = ad.tsum(qe * ke, axis=2) * (1.0 / math.sqrt(cfg.head_dim))
    bias = _dense(params, f"edge{layer}.1",
                  ad.leaky_relu(_dense(params, f"edge{layer}.0", Tensor(edge_in)), cfg.slope))
    return ad.segment_softmax(scores + bias, graph.dst, graph.n)


def attn_aggregate(features: Tensor, graph: BatchedGraph, params: ModelParams, edge_in=None) -> Tensor:
    """Edge-biased multi-head attention over incoming neighbours; ``layers`` stacked passes."""
    cfg = params.config
    if edge_in is None:
        edge_in = edge_inputs(graph)
    e = graph.src.size
    h = features
    ctx = None
    for layer in range(cfg.layers):
        if layer:
            h = ad.concat([features[:, :PHYS_COLUMNS], ctx], axis=1)
        alpha = attention_weights(h, graph, params, layer, edge_in)
        v = ad.matmul(h, params[f"attn{layer}.v.W"])
        ve = ad.reshape(ad.gather(v, graph.src), (e, cfg.heads, cfg.head_dim))
        weighted = ad.reshape(ad.reshape(alpha, (e, cfg.heads, 1)) * ve, (e, cfg.hidden))
        heads = ad.scatter_add(weighted, graph.dst, graph.n)
        ctx = ad.matmul(heads, params[f"attn{layer}.o.W"])
    return ctx


def aggregate(features, graph, params, edge_in=None) -> Tensor:
    if params.config.kind == "attn":
        return attn_aggregate(features, graph, params, edge_in)
    return mlp_aggregate(features, graph, params, edge_in)


def propose_update(features: Tensor, ctx: Tensor, params: ModelParams, graph: BatchedGraph):
    """Decode ``(dtheta, dV, dm)``; Slack gets no state update and PV keeps its magnitude."""
    cfg = params.config
    z = ad.concat([features, ctx], axis=1)
    z = ad.leaky_relu(_dense(params, "upd.0", z), cfg.slope)
    z = ad.leaky_relu(_dense(params, "upd.1", z), cfg.slope)
    out = _dense(params, "upd.2", z)
    dtheta = out[:, 0] * graph.p_mask
    dv = out[:, 1] * graph.q_mask
    dm = out[:, 2:]
    return dtheta, dv, dm


def apply_caps(dtheta, dv, v, cfg: LsConfig):
    """Clamp ``|dtheta| <= d_theta_max`` and ``|dV| <= d_v_frac * V`` (V as a constant bound)."""
    v_data = v.data if isinstance(v, Tensor) else np.asarray(v)
    cap_v = cfg.d_v_frac * np.abs(v_data)
    if isinstance(dtheta, Tensor) or isinstance(dv, Tensor):
        return ad.clamp(dtheta, -cfg.d_theta_max, cfg.d_theta_max), ad.clamp(dv, -cap_v, cap_v)
    return np.clip(dtheta, -cfg.d_theta_max, cfg.d_theta_max), np.clip(dv, -cap_v, cap_v)


@dataclass
class LineSearchResult:
    v: np.ndarray
    theta: np.ndarray
    m: np.ndarray
    alpha: np.ndarray  # per graph; 0 where the step was rejected
    accepted: np.ndarray
    merit_before: np.ndarray
    merit_after: np.ndarray


def line_search_step(graph: BatchedGraph, v, theta, m, dtheta, dv, dm, cfg: LsConfig,
                     merit_fn=None) -> LineSearchResult:
    """Backtracking (Armijo) line search on the mismatch merit, independently per graph.

    Candidates are ``clip(V + a dV)``, ``wrap(theta + a dtheta)`` for
    ``a = alpha0 * rho**j`` down to ``alpha_min``. If the search falls below
    ``alpha_min`` the step ``alpha_min`` is taken only when it strictly lowers
    the merit; otherwise the state and latent are returned unchanged.
    """
    if merit_fn is None:
        # graphs that have settled are skipped, so a batch costs what its members would alone
        def evaluate(v_, th_, active):
            return active_merits(graph, v_, th_, active)
    else:
        def evaluate(v_, th_, active):
            return merit_fn(v_, th_)

    from .numerics import wrap_angle

    v = np.clip(v, cfg.v_min, cfg.v_max)
    theta = wrap_angle(theta)
    node_graph = graph.node_graph
    f_k = evaluate(v, theta, np.ones(graph.offsets.size - 1, dtype=bool))
    b = f_k.size

    def candidate(a):
        a_node = a[node_graph]
        return np.clip(v + a_node * dv, cfg.v_min, cfg.v_max), wrap_angle(theta + a_node * dtheta)

    alpha = np.full(b, cfg.alpha0)
    status = np.zeros(b, dtype=np.int8)  # 0 searching, 1 sufficient decrease, 2 exhausted
    f_new = np.full(b, np.nan)
    while np.any(status == 0):
        searching = status == 0
        f_cand = evaluate(*candidate(alpha), searching)
        ok = searching & (f_cand <= (1.0 - cfg.c1 * alpha) * f_k)
        status[ok] = 1
        f_new[ok] = f_cand[ok]
        shrink = searching & ~ok
        alpha[shrink] *= cfg.rho
        status[shrink & (alpha < cfg.alpha_min)] = 2

    exhausted = status == 2
    if np.any(exhausted):
        alpha[exhausted] = cfg.alpha_min
        f_min = evaluate(*candidate(alpha), exhausted)
        fallback_ok = exhausted & (f_min < f_k)
        f_new[fallback_ok] = f_min[fallback_ok]
        alpha[exhausted & ~fallback_ok] = 0.0

    accepted = alpha > 0
    f_new[~accepted] = f_k[~accepted]
    a_node = alpha[node_graph]
    keep = ~accepted[node_graph]
    v_new, th_new = candidate(alpha)
    v_new = np.where(keep, v, v_new)
    th_new = np.where(keep, theta, th_new)
    m_new = np.where(keep[:, None], m, m + a_node[:, None] * dm)
    return LineSearchResult(v_new, th_new, m_new, alpha, accepted, f_k, f_new)


# --- unroll ----------------------------------------------------------------------

@dataclass
class Trajectory:
    """Per-step states and residuals for k = 0..K (tensors in train mode, arrays otherwise)."""

    v: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    dp: list = field(default_factory=list)
    dq: list = field(default_factory=list)
    merits: list = field(default_factory=list)  # per-graph merit arrays
    alphas: list = field(default_factory=list)
    accepted: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.v) - 1

    def final_state(self) -> tuple[np.ndarray, np.ndarray]:
        v, th = self.v[-1], self.theta[-1]
        return (v.data if isinstance(v, Tensor) else v), (th.data if isinstance(th, Tensor) else th)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _check_finite(k, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(_data(arr))):
            raise NonFiniteStateError(f"non-finite state after correction step {k}")


def unroll(graph: BatchedGraph, params: ModelParams, K: int, mode: str = "infer_caps_ls",
           ls_config: LsConfig | None = None, v0=None, theta0=None) -> Trajectory:
    """Run ``K`` correction steps.

    ``train`` records the autodiff graph and applies caps, clip and wrap.
    Inference modes run without a graph: ``infer_plain`` adds raw proposals
    (wrap only), ``infer_caps`` caps and clips, ``infer_ls`` and
    ``infer_caps_ls`` route the (capped) proposal through the line search.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = ls_config or LsConfig()
    v0 = graph.v0 if v0 is None else np.asarray(v0, dtype=float)
    theta0 = graph.theta0 if theta0 is None else np.asarray(theta0, dtype=float)
    if mode in ("train", "train_ls"):
        return _unroll_train(graph, params, K, cfg, v0, theta0, line_search=mode == "train_ls")
    with ad.no_grad():
        return _unroll_infer(graph, params, K, mode, cfg, v0, theta0)


def _unroll_train(graph, params, K, cfg, v0, theta0, line_search=False) -> Trajectory:
    edge_in = edge_inputs(graph)
    scale = residual_scale(graph, params.config)
    traj = Trajectory()
    v, theta = Tensor(v0), Tensor(theta0)
    m = Tensor(np.zeros((graph.n, params.config.hidden)))
    for k in range(K + 1):
        dp, dq = residuals_t(graph, v, theta)
        traj.v.append(v)
        traj.theta.append(theta)
        traj.dp.append(dp)
        traj.dq.append(dq)
        traj.merits.append(graph_merits(graph, dp.data, dq.data))
        if k == K:
            break
        x = phys_features(v, theta, dp, dq, m, scale)
        step = params.at(k)
        ctx = aggregate(x, graph, step, edge_in)
        dtheta, dv, dm = propose_update(x, ctx, step, graph)
        dtheta, dv = apply_caps(dtheta, dv, v, cfg)
        if line_search:
            res = line_search_step(graph, v.data, theta.data, m.data, dtheta.data, dv.data, dm.data, cfg)
            a_node = res.alpha[graph.node_graph]
            traj.alphas.append(res.alpha)
            traj.accepted.append(res.accepted)
            dtheta, dv, dm = dtheta * a_node, dv * a_node, dm * a_node[:, None]
        theta = ad.wrap_angle(theta + dtheta)
        v = ad.clamp(v + dv, cfg.v_min, cfg.v_max)
        m = m + dm
        _check_finite(k, v, theta, m)
    return traj


def _unroll_infer(graph, params, K, mode, cfg, v0, theta0) -> Trajectory:
    from .numerics import wrap_angle

    edge_in = edge_inputs(graph)
    scale = residual_scale(graph, params.config)
    traj = Trajectory()
    v, theta = np.array(v0, dtype=float), np.array(theta0, dtype=float)
    m = np.zeros((graph.n, params.config.hidden))
    use_caps = mode in ("infer_caps", "infer_caps_ls")
    use_ls = mode in ("infer_ls", "infer_caps_ls")
    dp, dq = residuals(graph, v, theta)
    for k in range(K + 1):
        traj.v.append(v)
        traj.theta.append(theta)
        traj.dp.append(dp)
        traj.dq.append(dq)
        traj.merits.append(graph_merits(graph, dp, dq))
        if k == K:
            break
        x = phys_features(Tensor(v), Tensor(theta), Tensor(dp), Tensor(dq), Tensor(m), scale)
        step = params.at(k)
        ctx = aggregate(x, graph, step, edge_in)
        dtheta, dv, dm = (t.data for t in propose_update(x, ctx, step, graph))
        if use_caps:
            dtheta, dv = apply_caps(dtheta, dv, v, cfg)
        if use_ls:
            res = line_search_step(graph, v, theta, m, dtheta, dv, dm, cfg)
            v, theta, m = res.v, res.theta, res.m
            traj.alphas.append(res.alpha)
            traj.accepted.append(res.accepted)
        else:
            theta = wrap_angle(theta + dtheta)
            v = np.clip(v + dv, cfg.v_min, cfg.v_max) if use_caps else v + dv
            m = m + dm
        _check_finite(k, v, theta, m)
        dp, dq = residuals(graph, v, theta)
    return traj


def unroll_scenario(scenario, params: ModelParams, K: int, mode: str = "infer_caps_ls",
                    ls_config: LsConfig | None = None) -> Trajectory:
    return unroll(graph_arrays(scenario.grid, scenario.initial_state), params, K, mode, ls_config)


def with_kind(config: ModelConfig, kind: str) -> ModelConfig:
    return replace(config, kind=kind)
