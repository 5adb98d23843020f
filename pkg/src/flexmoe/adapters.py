"""LoRA adapters addressed by parameter name, tagged with an aggregation group.

Weights use the row-vector convention ``y = x @ W`` with ``W: [in, out]``.
A LoRA adapter stores ``A: [r, in]`` and ``B: [out, r]`` and contributes
``(alpha / r) * (x @ A.T) @ B.T``, i.e. a delta of ``(alpha / r) * (B @ A).T``
in the layout of ``W``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from flexmoe import numerics as nx
from flexmoe.errors import ConfigError, DimensionError
from flexmoe.numerics import Tensor
from flexmoe.rng import stream

SHARED_ATTENTION = "SHARED_ATTENTION"
LOCAL_EXPERT = "LOCAL_EXPERT"
LOCAL_GATE = "LOCAL_GATE"
GROUPS = (SHARED_ATTENTION, LOCAL_EXPERT, LOCAL_GATE)

ATTN_PROJ = ("q", "k", "v", "o")
FFN_MATS = ("gate", "up", "down")

A_INIT_STD = 0.01


@dataclass
class LoraAdapter:
    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    group: str = SHARED_ATTENTION

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    def delta(self) -> np.ndarray:
        """Effective weight delta in the target's ``[in, out]`` layout."""
        return self.scaling * (self.B.data @ self.A.data).T

    def tensors(self) -> dict[str, Tensor]:
        return {f"{self.target}.lora_A": self.A, f"{self.target}.lora_B": self.B}


@dataclass
class GateLinear:
    """Scalar side-expert router: ``x @ weight + bias`` with ``weight: [d]``."""

    target: str
    weight: Tensor
    bias: Tensor
    group: str = LOCAL_GATE

    def tensors(self) -> dict[str, Tensor]:
        return {f"{self.target}.weight": self.weight, f"{self.target}.bias": self.bias}


@dataclass
class AdapterSet:
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    gates: dict[str, GateLinear] = field(default_factory=dict)

    def get(self, target: str) -> LoraAdapter | None:
        return self.adapters.get(target)

    def gate(self, target: str) -> GateLinear | None:
        return self.gates.get(target)

    def add(self, item: LoraAdapter | GateLinear) -> None:
        if item.target in self.adapters or item.target in self.gates:
            raise ConfigError(f"duplicate adapter target {item.target!r}")
        if isinstance(item, LoraAdapter):
            self.adapters[item.target] = item
        else:
            self.gates[item.target] = item

    def _items(self) -> Iterator[LoraAdapter | GateLinear]:
        yield from self.adapters.values()
        yield from self.gates.values()

    def tensors(self, group: str | None = None) -> dict[str, Tensor]:
        """Flat ``name -> Tensor`` map, sorted by name, optionally one group only."""
        out: dict[str, Tensor] = {}
        for item in self._items():
            if group is None or item.group == group:
                out.update(item.tensors())
        return dict(sorted(out.items()))

    def groups(self) -> dict[str, list[str]]:
        res: dict[str, list[str]] = {g: [] for g in GROUPS}
        for item in self._items():
            res[item.group].extend(item.tensors())
        return {g: sorted(v) for g, v in res.items()}

    def group_of(self, name: str) -> str:
        for item in self._items():
            if name in item.tensors():
                return item.group
        raise KeyError(name)

    def values(self, group: str | None = None) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors(group).items()}

    def load_values(self, values: dict[str, np.ndarray], group: str | None = None) -> None:
        """Overwrite tensors from ``values``; the keyset must equal the group's keyset."""
        tensors = self.tensors(group)
        if set(values) != set(tensors):
            missing = sorted(set(tensors) - set(values))[:3]
            extra = sorted(set(values) - set(tensors))[:3]
            raise ConfigError(f"adapter keyset mismatch (missing={missing}, extra={extra})")
        for k, t in tensors.items():
            v = np.asarray(values[k], dtype=nx.DTYPE)
            if v.shape != t.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {t.shape}")
            t.data = v.copy()

    def set_trainable(self, flag: bool = True) -> None:
        for t in self.tensors().values():
            t.requires_grad = flag


def lora_weight(base_w, adapter: LoraAdapter) -> Tensor:
    """Differentiable effective weight ``base_w + (alpha/r) * (B @ A).T``."""
    delta = nx.transpose(nx.matmul(nx.mul(adapter.B, adapter.scaling), adapter.A), (1, 0))
    return nx.add(base_w, delta)


def lora_apply(x, base_w, adapter: LoraAdapter | None = None) -> Tensor:
    """``x @ base_w`` plus the adapter's low-rank path when one is given.

    The delta is folded into the weight before the product, which costs
    O(in*out*r) instead of O(tokens*(in+out)*r) and keeps the B=0 output
    bitwise equal to the base path.
    """
    x = nx.as_tensor(x)
    base_w = nx.as_tensor(base_w)
    if adapter is None:
        return nx.matmul(x, base_w)
    if adapter.in_features != base_w.shape[-2] or adapter.out_features != base_w.shape[-1]:
        raise DimensionError(
            f"adapter {adapter.target} [{adapter.in_features}->{adapter.out_features}] "
            f"does not fit weight {base_w.shape}"
        )
    return nx.matmul(x, lora_weight(base_w, adapter))


# ---------------------------------------------------------------- target enumeration


@dataclass(frozen=True)
class AdapterSpec:
    """Shape-only description of a trainable block; lets us count without allocating."""

    target: str
    in_features: int
    out_features: int
    group: str
    kind: str = "lora"  # or "gate"

    def n_params(self, rank: int) -> int:
        if self.kind == "gate":
            return self.in_features + 1
        return rank * (self.in_features + self.out_features)


def attention_targets(config) -> list[AdapterSpec]:
    d = config.d_model
    return [
        AdapterSpec(f"layers.{l}.attn.{p}", d, d, SHARED_ATTENTION)
        for l in range(config.n_layers)
        for p in ATTN_PROJ
    ]


def _ffn_specs(prefix: str, d: int, f: int, group: str) -> list[AdapterSpec]:
    dims = {"gate": (d, f), "up": (d, f), "down": (f, d)}
    return [AdapterSpec(f"{prefix}.{m}", *dims[m], group) for m in FFN_MATS]


def expert_targets(config, include_shared: bool = True) -> list[AdapterSpec]:
    """All routed (and optionally shared) expert matrices; used by the dense baseline."""
    d, f = config.d_model, config.expert_hidden
    specs: list[AdapterSpec] = []
    for l in range(config.n_layers):
        for i in range(config.n_experts):
            specs += _ffn_specs(f"layers.{l}.moe.experts.{i}", d, f, SHARED_ATTENTION)
        if include_shared:
            for j in range(config.n_shared_experts):
                specs += _ffn_specs(f"layers.{l}.moe.shared.{j}", d, f, SHARED_ATTENTION)
    return specs


def side_targets(config) -> list[AdapterSpec]:
    d, f = config.d_model, config.expert_hidden
    specs: list[AdapterSpec] = []
    for l in range(config.n_layers):
        specs += _ffn_specs(f"layers.{l}.side", d, f, LOCAL_EXPERT)
        specs.append(AdapterSpec(f"layers.{l}.side_router", d, 1, LOCAL_GATE, kind="gate"))
    return specs


def targets_for_mode(config, mode: str) -> list[AdapterSpec]:
    if mode == "flex":
        return attention_targets(config) + side_targets(config)
    if mode in ("dense-baseline", "local-only"):
        return attention_targets(config) + expert_targets(config)
    if mode == "attention-only":
        return attention_targets(config)
    raise ConfigError(f"unknown mode {mode!r}")


def _valid_target_shapes(config) -> dict[str, tuple[int, int]]:
    specs = attention_targets(config) + expert_targets(config) + side_targets(config)
    return {s.target: (s.in_features, s.out_features) for s in specs}


def attach_adapters(
    config,
    targets: Iterable[AdapterSpec | str],
    rank: int = 32,
    alpha: float = 64.0,
    seed: int = 0,
    gate_bias: float = 0.0,
) -> AdapterSet:
    """Create adapters for each target; B and gate weights start at zero.

    String targets are resolved against the model's naming scheme; attention
    projections land in SHARED_ATTENTION, side-expert matrices in LOCAL_EXPERT
    and ``*.side_router`` in LOCAL_GATE.
    """
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    shapes = _valid_target_shapes(config)
    known = {s.target: s for s in attention_targets(config) + expert_targets(config) + side_targets(config)}
    out = AdapterSet()
    for t in targets:
        spec = known.get(t) if isinstance(t, str) else t
        if spec is None or spec.target not in shapes:
            raise ConfigError(f"unknown adapter target {t!r}")
        if spec.target in out.adapters or spec.target in out.gates:
            raise ConfigError(f"duplicate adapter target {spec.target!r}")
        if spec.kind == "gate":
            out.add(
                GateLinear(
                    spec.target,
                    Tensor(np.zeros(spec.in_features), requires_grad=True),
                    Tensor(np.asarray(float(gate_bias)), requires_grad=True),
                )
            )
            continue
        rng = stream(seed, "adapters", f"A/{spec.target}")
        A = rng.normal(0.0, A_INIT_STD, size=(rank, spec.in_features))
        B = np.zeros((spec.out_features, rank))
        out.add(
            LoraAdapter(
                spec.target,
                Tensor(A, requires_grad=True),
                Tensor(B, requires_grad=True),
                rank,
                float(alpha),
                spec.group,
            )
        )
    return out


def count_params(obj, rank: int | None = None, group: str | None = None) -> int:
    """Exact trainable-scalar count.

    Accepts an :class:`AdapterSet` (optionally restricted to ``group``) or an
    iterable of :class:`AdapterSpec` together with ``rank``.
    """
    if isinstance(obj, AdapterSet):
        return int(sum(t.data.size for t in obj.tensors(group).values()))
    total = 0
    for spec in obj:
        if group is not None and spec.group != group:
            continue
        if spec.kind == "lora" and rank is None:
            raise ConfigError("rank is required to count LoRA specs")
        total += spec.n_params(rank or 0)
    return total


# ---------------------------------------------------------------- serialization


def save_adapters(aset: AdapterSet) -> bytes:
    """Serialize to an ``.npz`` byte string (float64, lossless)."""
    meta = []
    arrays: dict[str, np.ndarray] = {}
    for a in aset.adapters.values():
        meta.append(["lora", a.target, a.group, a.rank, a.alpha])
        arrays[f"{a.target}.lora_A"] = a.A.data
        arrays[f"{a.target}.lora_B"] = a.B.data
    for g in aset.gates.values():
        meta.append(["gate", g.target, g.group, 0, 0.0])
        arrays[f"{g.target}.weight"] = g.weight.data
        arrays[f"{g.target}.bias"] = g.bias.data
    buf = io.BytesIO()
    header = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(buf, __meta__=header, **arrays)
    return buf.getvalue()


def load_adapters(blob: bytes) -> AdapterSet:
    z = np.load(io.BytesIO(blob))
    out = AdapterSet()
    for kind, target, group, rank, alpha in json.loads(z["__meta__"].tobytes().decode("utf-8")):
        if kind == "lora":
            out.add(
                LoraAdapter(
                    target,
                    Tensor(z[f"{target}.lora_A"], requires_grad=True),
                    Tensor(z[f"{target}.lora_B"], requires_grad=True),
                    int(rank),
                    float(alpha),
                    group,
                )
            )
        else:
            out.add(
                GateLinear(
                    target,
                    Tensor(z[f"{target}.weight"], requires_grad=True),
                    Tensor(z[f"{target}.bias"], requires_grad=True),
                    group,
                )
            )
    return out
