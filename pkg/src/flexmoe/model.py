"""Toy causal MoE transformer with an optional gated side expert per layer.

Block layout (pre-norm, learned positions)::

    u = h + Attn(LN(h))
    h = u + sum_i g_i * FFN_i(LN(u)) + sum_s FFN_s(LN(u)) [+ g_e * FFN_e(LN(u))]

Experts are gated-SiLU FFNs (``down(act(x@gate) * (x@up))``). All base weights
are frozen; only adapters and side routers carry gradients during training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from flexmoe import numerics as nx
from flexmoe.adapters import AdapterSet, lora_apply, lora_weight
from flexmoe.errors import ConfigError, InputError, LifecycleError
from flexmoe.numerics import Tensor
from flexmoe.rng import stream

GATE_ACTIVATIONS = ("sigmoid", "relu", "tanh")
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    vocab_size: int = 259
    n_experts: int = 8
    top_k: int = 2
    n_shared_experts: int = 0
    expert_ratio: float = 0.25
    ffn_mult: float = 4.0
    max_seq_len: int = 256
    gate_activation: str = "sigmoid"
    renormalize_topk: bool = False
    hidden_act: str = "silu"
    tie_embeddings: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("model.n_layers must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be a positive multiple of model.n_heads")
        if self.vocab_size < 2:
            raise ConfigError("model.vocab_size must be >= 2")
        if self.n_experts < 1 or not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("model.top_k must satisfy 1 <= top_k <= n_experts")
        if self.n_shared_experts < 0:
            raise ConfigError("model.n_shared_experts must be >= 0")
        if self.max_seq_len < 1:
            raise ConfigError("model.max_seq_len must be >= 1")
        if self.gate_activation not in GATE_ACTIVATIONS:
            raise ConfigError(f"model.gate_activation must be one of {GATE_ACTIVATIONS}")
        if self.hidden_act not in ("silu", "gelu", "relu", "tanh", "sigmoid"):
            raise ConfigError(f"unknown model.hidden_act {self.hidden_act!r}")
        if self.expert_hidden < 1:
            raise ConfigError("expert_ratio * d_model * ffn_mult must be >= 1")

    @property
    def expert_hidden(self) -> int:
        return int(round(self.expert_ratio * self.d_model * self.ffn_mult))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Frozen base weights addressed by dotted name."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, T, N, f = config.d_model, config.vocab_size, config.max_seq_len, config.n_experts, config.expert_hidden
    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (V, d), "embed.positions": (T, d)}
    for l in range(config.n_layers):
        p = f"layers.{l}"
        shapes[f"{p}.attn_norm.weight"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{m}"] = (d, d)
        shapes[f"{p}.moe_norm.weight"] = (d,)
        shapes[f"{p}.moe.router"] = (d, N)
        for i in range(N):
            shapes.update(_ffn_shapes(f"{p}.moe.experts.{i}", d, f))
        for j in range(config.n_shared_experts):
            shapes.update(_ffn_shapes(f"{p}.moe.shared.{j}", d, f))
    shapes["final_norm.weight"] = (d,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (d, V)
    return shapes


def _ffn_shapes(prefix: str, d: int, f: int) -> dict[str, tuple[int, int]]:
    return {f"{prefix}.gate": (d, f), f"{prefix}.up": (d, f), f"{prefix}.down": (f, d)}


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Gaussian init from per-tensor named streams; norms start at one."""
    out = ModelParams(config)
    for name, shape in param_shapes(config).items():
        if name.endswith("norm.weight"):
            arr = np.ones(shape)
        else:
            std = config.init_std
            if name.endswith(".attn.o") or name.endswith(".down"):
                std /= math.sqrt(2 * config.n_layers)
            arr = stream(seed, "model", f"init/{name}").normal(0.0, std, size=shape)
        out.tensors[name] = Tensor(arr)
    return out


@dataclass
class PersonalizedLayerState:
    """The side expert of one MoE layer: a frozen copy of the selected expert.

    Its trainable parts (LoRA on ``layers.{l}.side.*`` and the scalar router
    ``layers.{l}.side_router``) live in the client's :class:`AdapterSet`.
    """

    layer: int
    selected_expert_index: int
    ffn: dict[str, Tensor]


@dataclass
class PersonalizedState:
    layers: dict[int, PersonalizedLayerState] = field(default_factory=dict)

    def layer(self, l: int) -> PersonalizedLayerState:
        try:
            return self.layers[l]
        except KeyError:
            raise LifecycleError(f"personalized layer {l} not initialised (run expert selection first)") from None


# ---------------------------------------------------------------- attention


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), MASK_VALUE), k=1)


def _qkv(x: Tensor, params: ModelParams, layer: int, adapters: AdapterSet | None) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head projections ``[..., H, T, dh]`` of normed input ``x: [..., T, d]``."""
    cfg = params.config
    p = f"layers.{layer}.attn"
    ad = adapters.get if adapters is not None else (lambda _n: None)
    lead = x.shape[:-2]
    T = x.shape[-2]
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        t = nx.reshape(t, (*lead, T, H, dh))
        nd = t.ndim
        axes = (*range(nd - 3), nd - 2, nd - 3, nd - 1)
        return nx.transpose(t, axes)

    q = heads(lora_apply(x, params[f"{p}.q"], ad(f"{p}.q")))
    k = heads(lora_apply(x, params[f"{p}.k"], ad(f"{p}.k")))
    v = heads(lora_apply(x, params[f"{p}.v"], ad(f"{p}.v")))
    return q, k, v


def _scores(q: Tensor, k: Tensor) -> Tensor:
    nd = k.ndim
    kt = nx.transpose(k, (*range(nd - 2), nd - 1, nd - 2))
    return nx.mul(nx.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))


def attention_probs(x: Tensor, params: ModelParams, layer: int, adapters: AdapterSet | None = None) -> tuple[Tensor, Tensor]:
    """Causal attention weights ``[..., H, T, T]`` and values ``[..., H, T, dh]`` for normed input ``x``."""
    q, k, v = _qkv(x, params, layer, adapters)
    scores = nx.add(_scores(q, k), _causal_mask(x.shape[-2]))
    return nx.softmax(scores, axis=-1), v


def _merge_heads(o: Tensor, h: Tensor, params: ModelParams, layer: int, adapters: AdapterSet | None) -> Tensor:
    nd = o.ndim
    o = nx.transpose(o, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    o = nx.reshape(o, (*h.shape[:-1], params.config.d_model))
    p = f"layers.{layer}.attn.o"
    out = lora_apply(o, params[p], adapters.get(p) if adapters is not None else None)
    return nx.add(h, out)


def self_attention_forward(h, params: ModelParams, layer: int, adapters: AdapterSet | None = None) -> Tensor:
    """Pre-norm multi-head causal self-attention plus residual. ``h``: ``[..., T, d]``."""
    h = nx.as_tensor(h)
    cfg = params.config
    T = h.shape[-2]
    if T > cfg.max_seq_len:
        raise InputError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    x = nx.layer_norm(h, params[f"layers.{layer}.attn_norm.weight"])
    att, v = attention_probs(x, params, layer, adapters)
    return _merge_heads(nx.matmul(att, v), h, params, layer, adapters)


def _prefix_attention(hp: Tensor, hs: Tensor, params: ModelParams, layer: int, adapters) -> tuple[Tensor, Tensor]:
    """Attention when every sequence starts with the same ``P`` tokens.

    ``hp: [P, d]`` holds the shared prefix once, ``hs: [B, S, d]`` the
    per-sequence suffixes. Suffix queries see the prefix keys plus their own
    causal window.
    """
    w = params[f"layers.{layer}.attn_norm.weight"]
    xp, xs = nx.layer_norm(hp, w), nx.layer_norm(hs, w)
    qp, kp, vp = _qkv(xp, params, layer, adapters)  # [H, P, dh]
    qs, ks, vs = _qkv(xs, params, layer, adapters)  # [B, H, S, dh]
    P, S = hp.shape[0], hs.shape[1]
    att_p = nx.softmax(nx.add(_scores(qp, kp), _causal_mask(P)), axis=-1)
    out_p = _merge_heads(nx.matmul(att_p, vp), hp, params, layer, adapters)
    cross = _scores(qs, kp)  # [B, H, S, P] by broadcasting the prefix keys
    own = nx.add(_scores(qs, ks), _causal_mask(S))
    att = nx.softmax(nx.concat([cross, own], axis=-1), axis=-1)
    o = nx.add(nx.matmul(nx.narrow(att, 0, P), vp), nx.matmul(nx.narrow(att, P, P + S), vs))
    return out_p, _merge_heads(o, hs, params, layer, adapters)


# ---------------------------------------------------------------- routing


def router_scores(u, router_w) -> Tensor:
    """Softmax over raw router logits ``u @ router_w``; ``u`` is ``[..., d]``."""
    return nx.softmax(nx.matmul(nx.as_tensor(u), nx.as_tensor(router_w)), axis=-1)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores along the last axis; ties go to the lower index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k requires 1 <= K <= N, got K={k}, N={n}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    idx = topk_indices(scores, k)
    mask = np.zeros_like(scores)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    return mask


def topk_gate(s, k: int, renormalize: bool = False) -> Tensor:
    """Keep the top-``k`` scores, zero the rest; optionally rescale survivors to sum to one."""
    s = nx.as_tensor(s)
    g = nx.mul(s, topk_mask(s.data, k))
    if renormalize:
        g = nx.div(g, nx.sum(g, axis=-1, keepdims=True))
    return g


# ---------------------------------------------------------------- experts


def _act(cfg: ModelConfig):
    return lambda t: nx.activation(cfg.hidden_act, t)


def ffn_forward(x, weights: dict[str, Tensor], cfg: ModelConfig, adapters: AdapterSet | None = None, prefix: str | None = None) -> Tensor:
    """Single gated FFN: ``down(act(x@gate) * (x@up))`` with optional LoRA on each matrix."""
    ad = (lambda m: adapters.get(f"{prefix}.{m}")) if adapters is not None and prefix else (lambda m: None)
    a = _act(cfg)(lora_apply(x, weights["gate"], ad("gate")))
    b = lora_apply(x, weights["up"], ad("up"))
    return lora_apply(nx.mul(a, b), weights["down"], ad("down"))


def _stacked_weight(params: ModelParams, adapters: AdapterSet | None, prefixes: list[str], mat: str) -> Tensor:
    base = nx.stack([params[f"{p}.{mat}"] for p in prefixes])
    found = [adapters.get(f"{p}.{mat}") for p in prefixes] if adapters is not None else [None] * len(prefixes)
    if all(a is None for a in found):
        return base
    if any(a is None for a in found):
        raise ConfigError(f"expert adapters on '{mat}' must cover every expert or none")
    if len({(a.rank, a.scaling) for a in found}) > 1:
        return nx.stack([lora_weight(params[f"{p}.{mat}"], a) for p, a in zip(prefixes, found)])
    # one batched low-rank product for all experts: [n, out, r] @ [n, r, in]
    B = nx.stack([a.B for a in found])
    A = nx.stack([a.A for a in found])
    delta = nx.transpose(nx.matmul(nx.mul(B, found[0].scaling), A), (0, 2, 1))
    return nx.add(base, delta)


def experts_forward(x, params: ModelParams, layer: int, adapters: AdapterSet | None = None, kind: str = "experts") -> Tensor:
    """Outputs of every routed (``kind='experts'``) or shared expert: ``[n, M, d]`` for ``x: [M, d]``."""
    cfg = params.config
    n = cfg.n_experts if kind == "experts" else cfg.n_shared_experts
    prefixes = [f"layers.{layer}.moe.{kind}.{i}" for i in range(n)]
    x3 = nx.reshape(nx.as_tensor(x), (1, *x.shape))
    a = _act(cfg)(nx.matmul(x3, _stacked_weight(params, adapters, prefixes, "gate")))
    b = nx.matmul(x3, _stacked_weight(params, adapters, prefixes, "up"))
    return nx.matmul(nx.mul(a, b), _stacked_weight(params, adapters, prefixes, "down"))


@dataclass
class RoutingTrace:
    """Activated expert ids per token for each MoE layer (``[M, K]`` arrays)."""

    layers: dict[int, np.ndarray] = field(default_factory=dict)
    side_gates: dict[int, np.ndarray] = field(default_factory=dict)

    def flat(self, layer: int) -> np.ndarray:
        return self.layers[layer].reshape(-1)


def moe_layer_forward(
    u,
    params: ModelParams,
    layer: int,
    adapters: AdapterSet | None = None,
    trace: RoutingTrace | None = None,
    pers: PersonalizedState | None = None,
) -> Tensor:
    """MoE sublayer with residual. ``u``: ``[..., d]``.

    With ``pers`` given this is the FLEx layer: the frozen side expert is added
    with gate ``gate_activation(router_e(x))``; routed experts are untouched.
    """
    u = nx.as_tensor(u)
    cfg = params.config
    lead = u.shape[:-1]
    d = cfg.d_model
    M = int(np.prod(lead)) if lead else 1
    flat_u = nx.reshape(u, (M, d))
    x = nx.layer_norm(flat_u, params[f"layers.{layer}.moe_norm.weight"])

    s = router_scores(x, params[f"layers.{layer}.moe.router"])  # [M, N]
    if trace is not None:
        trace.layers[layer] = topk_indices(s.data, cfg.top_k)
    g = topk_gate(s, cfg.top_k, cfg.renormalize_topk)
    y = experts_forward(x, params, layer, adapters)  # [N, M, d]
    g3 = nx.reshape(nx.transpose(g, (1, 0)), (cfg.n_experts, M, 1))
    out = nx.sum(nx.mul(g3, y), axis=0)

    if cfg.n_shared_experts:
        out = nx.add(out, nx.sum(experts_forward(x, params, layer, adapters, kind="shared"), axis=0))

    if pers is not None:
        out = nx.add(out, side_expert_forward(x, params, layer, pers, adapters, trace))

    out = nx.add(flat_u, out)
    return nx.reshape(out, u.shape)


def side_expert_forward(x, params, layer, pers, adapters, trace=None) -> Tensor:
    cfg = params.config
    st = pers.layer(layer)
    router = adapters.gate(f"layers.{layer}.side_router") if adapters is not None else None
    if router is None:
        raise LifecycleError(f"side router for layer {layer} missing from adapter set")
    logit = nx.add(nx.matmul(x, nx.reshape(router.weight, (cfg.d_model, 1))), router.bias)  # [M, 1]
    ge = nx.activation(cfg.gate_activation, logit)
    if trace is not None:
        trace.side_gates[layer] = ge.data.reshape(-1).copy()
    ye = ffn_forward(x, st.ffn, cfg, adapters, prefix=f"layers.{layer}.side")
    return nx.mul(ge, ye)


def flex_moe_forward(u, params, layer, pers: PersonalizedState | None, adapters=None, trace=None) -> Tensor:
    if pers is None:
        raise LifecycleError("FLEx forward needs a personalized state")
    return moe_layer_forward(u, params, layer, adapters, trace, pers)


# ---------------------------------------------------------------- full model


def model_forward(
    tokens,
    params: ModelParams,
    adapters: AdapterSet | None = None,
    pers: PersonalizedState | None = None,
    trace: RoutingTrace | None = None,
    record: dict[int, np.ndarray] | None = None,
    positions: np.ndarray | None = None,
) -> Tensor:
    """Token ids ``[T]`` or ``[B, T]`` to logits ``[..., T, V]``.

    ``record``, when given, receives each layer's MoE input ``u`` (``[..., T, d]``).
    ``positions`` (flat indices into the ``B*T`` token grid) restricts the LM
    head to those rows and returns ``[len(positions), V]`` logits.
    """
    cfg = params.config
    ids = np.asarray(tokens)
    if ids.ndim not in (1, 2) or not np.issubdtype(ids.dtype, np.integer):
        raise InputError("tokens must be a 1-D or 2-D integer array")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    T = ids.shape[-1]
    if T > cfg.max_seq_len:
        raise InputError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if positions is not None and trace is None and record is None:
        P = _shared_prefix_len(ids, positions)
        if P:
            h = _prefix_forward(ids, P, params, adapters, pers, np.asarray(positions))
            return _lm_head(h, params)
    h = nx.embedding(params["embed.tokens"], ids)
    h = nx.add(h, nx.embedding(params["embed.positions"], np.arange(T)))
    for l in range(cfg.n_layers):
        u = self_attention_forward(h, params, l, adapters)
        if record is not None:
            record[l] = u.data.copy()
        h = moe_layer_forward(u, params, l, adapters, trace, pers)
    if positions is not None:
        h = nx.embedding(nx.reshape(h, (-1, cfg.d_model)), np.asarray(positions))
    return _lm_head(h, params)


MIN_SHARED_PREFIX = 8


def _shared_prefix_len(ids: np.ndarray, positions) -> int:
    """Length of the prefix common to every row, if worth sharing and unscored; else 0."""
    if ids.ndim != 2 or ids.shape[0] < 2:
        return 0
    same = np.all(ids == ids[:1], axis=0)
    P = int(np.argmin(same)) if not same.all() else ids.shape[1] - 1
    pos = np.asarray(positions)
    if P < MIN_SHARED_PREFIX or not pos.size or int((pos % ids.shape[1]).min()) < P:
        return 0
    return P


def _prefix_forward(ids, P, params, adapters, pers, positions) -> Tensor:
    cfg = params.config
    B, T = ids.shape
    S = T - P
    pos_tab = params["embed.positions"]
    hp = nx.add(nx.embedding(params["embed.tokens"], ids[0, :P]), nx.embedding(pos_tab, np.arange(P)))
    hs = nx.add(nx.embedding(params["embed.tokens"], ids[:, P:]), nx.embedding(pos_tab, np.arange(P, T)))
    for l in range(cfg.n_layers):
        up, us = _prefix_attention(hp, hs, params, l, adapters)
        if l < cfg.n_layers - 1:
            hp = moe_layer_forward(up, params, l, adapters, None, pers)
        hs = moe_layer_forward(us, params, l, adapters, None, pers)
    rows = (positions // T) * S + (positions % T - P)
    return nx.embedding(nx.reshape(hs, (-1, cfg.d_model)), rows)


def _lm_head(h: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    h = nx.layer_norm(h, params["final_norm.weight"])
    head = params["lm_head"] if not cfg.tie_embeddings else nx.transpose(params["embed.tokens"], (1, 0))
    return nx.matmul(h, head)
