"""Per-client side-expert selection by reconstruction loss.

For each MoE layer independently, the routed-expert mixture ``F(u)`` of the
frozen model is compared against ``F_S(u)``, the same mixture with routing
restricted to a subset ``S``. Residual and shared-expert terms appear in both
and cancel, so they are left out. Only singleton subsets are searched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from flexmoe import numerics as nx
from flexmoe.adapters import AdapterSet, attach_adapters, side_targets
from flexmoe.data import Example, encode_example
from flexmoe.errors import CalibrationError, ConfigError, LifecycleError
from flexmoe.model import (
    ModelParams,
    PersonalizedLayerState,
    PersonalizedState,
    experts_forward,
    model_forward,
    router_scores,
    topk_indices,
)
from flexmoe.numerics import Tensor


@dataclass
class CalibrationBatch:
    """MoE-layer inputs of the frozen model, one ``[T_total, d]`` matrix per layer.

    Rows of sequence ``j`` are ``offsets[j]:offsets[j + 1]``.
    """

    inputs: dict[int, np.ndarray]
    offsets: np.ndarray

    @property
    def n_sequences(self) -> int:
        return len(self.offsets) - 1

    def sequence(self, layer: int, j: int) -> np.ndarray:
        return self.inputs[layer][self.offsets[j] : self.offsets[j + 1]]


def _as_token_arrays(data) -> list[np.ndarray]:
    seqs = []
    for item in data:
        if isinstance(item, Example):
            seqs.append(encode_example(item).input_ids)
        else:
            seqs.append(np.asarray(item, dtype=np.int64))
    return seqs


def record_moe_inputs(params: ModelParams, data: Sequence, batch_size: int = 8) -> CalibrationBatch:
    """Run the frozen model (no adapters) and capture each layer's MoE input."""
    seqs = _as_token_arrays(data)
    if not seqs or any(len(s) == 0 for s in seqs):
        raise CalibrationError("calibration needs at least one non-empty sequence")
    per_layer: dict[int, list[np.ndarray]] = {l: [] for l in range(params.config.n_layers)}
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        T = max(len(s) for s in chunk)
        ids = np.zeros((len(chunk), T), dtype=np.int64)  # any in-vocab id; never attended to
        for i, s in enumerate(chunk):
            ids[i, : len(s)] = s
        rec: dict[int, np.ndarray] = {}
        model_forward(ids, params, record=rec)
        for l, u in rec.items():
            for i, s in enumerate(chunk):
                # right padding never leaks into earlier positions under the causal mask
                per_layer[l].append(u[i, : len(s)])
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in seqs])])
    return CalibrationBatch({l: np.concatenate(v, axis=0) for l, v in per_layer.items()}, offsets)


def layer_expert_outputs(params: ModelParams, layer: int, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Router scores ``[M, N]`` and every routed expert's output ``[N, M, d]``."""
    x = nx.layer_norm(Tensor(u), params[f"layers.{layer}.moe_norm.weight"])
    s = router_scores(x, params[f"layers.{layer}.moe.router"]).data
    y = experts_forward(x, params, layer).data
    return s, y


def restricted_mixture(scores: np.ndarray, outputs: np.ndarray, subset: Sequence[int], k: int, renormalize: bool = False) -> np.ndarray:
    """Routed mixture when only experts in ``subset`` may be picked.

    The top ``min(k, |subset|)`` of the original softmax scores inside the
    subset keep their score as gate (no renormalisation unless asked).
    """
    n = scores.shape[-1]
    subset = sorted(set(int(i) for i in subset))
    if not subset:
        raise ConfigError("expert subset must be non-empty")
    if subset[0] < 0 or subset[-1] >= n:
        raise ConfigError(f"expert index outside [0, {n})")
    allowed = np.zeros(n, dtype=bool)
    allowed[subset] = True
    masked = np.where(allowed, scores, -np.inf)
    idx = topk_indices(masked, min(k, len(subset)))
    gates = np.zeros_like(scores)
    np.put_along_axis(gates, idx, np.take_along_axis(scores, idx, axis=-1), axis=-1)
    if renormalize:
        gates = gates / gates.sum(axis=-1, keepdims=True)
    return np.einsum("mn,nmd->md", gates, outputs)


def _mean_seq_norm(diff: np.ndarray, offsets: np.ndarray) -> float:
    sq = np.einsum("md,md->m", diff, diff)
    norms = [math.sqrt(math.fsum(sq[offsets[j] : offsets[j + 1]])) for j in range(len(offsets) - 1)]
    # fsum keeps the mean independent of sequence order
    return math.fsum(norms) / len(norms)


def reconstruction_loss(params: ModelParams, layer: int, subset: Sequence[int], calib: CalibrationBatch, _cache=None) -> float:
    """Mean over calibration sequences of ``||F_S(u) - F(u)||_F``."""
    cfg = params.config
    s, y = _cache if _cache is not None else layer_expert_outputs(params, layer, calib.inputs[layer])
    full = restricted_mixture(s, y, range(cfg.n_experts), cfg.top_k, cfg.renormalize_topk)
    part = restricted_mixture(s, y, subset, cfg.top_k, cfg.renormalize_topk)
    return _mean_seq_norm(part - full, calib.offsets)


@dataclass
class LayerSelection:
    layer: int
    losses: list[float]
    selected: int
    margin: float | None  # runner-up loss minus winner loss; None with a single expert


@dataclass
class PruneReport:
    layers: list[LayerSelection] = field(default_factory=list)

    def selected(self) -> dict[int, int]:
        return {ls.layer: ls.selected for ls in self.layers}

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"layer": ls.layer, "losses": ls.losses, "selected": ls.selected, "margin": ls.margin}
                for ls in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneReport":
        return cls([LayerSelection(x["layer"], list(x["losses"]), x["selected"], x["margin"]) for x in d["layers"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        lines = ["layer\texpert\tloss\tselected"]
        for ls in self.layers:
            for i, v in enumerate(ls.losses):
                lines.append(f"{ls.layer}\t{i}\t{v!r}\t{'*' if i == ls.selected else ''}")
        return "\n".join(lines) + "\n"


def select_personalized_experts(params: ModelParams, calib: CalibrationBatch, n: int = 1) -> PruneReport:
    """Pick, per layer, the single expert whose restricted mixture best matches the full one."""
    if n != 1:
        raise ConfigError("only single-expert selection (n=1) is supported")
    cfg = params.config
    report = PruneReport()
    for l in range(cfg.n_layers):
        cache = layer_expert_outputs(params, l, calib.inputs[l])
        losses = [reconstruction_loss(params, l, [i], calib, cache) for i in range(cfg.n_experts)]
        order = sorted(range(len(losses)), key=lambda i: (losses[i], i))
        best = order[0]
        margin = losses[order[1]] - losses[best] if len(order) > 1 else None
        report.layers.append(LayerSelection(l, losses, best, margin))
    return report


def build_personalized_layer(
    params: ModelParams,
    report: PruneReport,
    adapters: AdapterSet | None = None,
    rank: int = 32,
    alpha: float = 64.0,
    seed: int = 0,
    gate_bias: float = 0.0,
) -> tuple[PersonalizedState, AdapterSet]:
    """Copy each selected expert into a frozen side expert and attach its LOCAL adapters.

    Returns the personalized state and the adapter set (``adapters`` extended
    in place when given).
    """
    cfg = params.config
    pers = PersonalizedState()
    for ls in report.layers:
        if not 0 <= ls.selected < cfg.n_experts:
            raise LifecycleError(f"layer {ls.layer}: selected expert {ls.selected} out of range")
        src = f"layers.{ls.layer}.moe.experts.{ls.selected}"
        ffn = {m: Tensor(params[f"{src}.{m}"].data.copy()) for m in ("gate", "up", "down")}
        pers.layers[ls.layer] = PersonalizedLayerState(ls.layer, ls.selected, ffn)
    local = attach_adapters(cfg, side_targets(cfg), rank=rank, alpha=alpha, seed=seed, gate_bias=gate_bias)
    if adapters is None:
        return pers, local
    for item in list(local.adapters.values()) + list(local.gates.values()):
        adapters.add(item)
    return pers, adapters
