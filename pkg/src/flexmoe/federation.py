"""Federated orchestration: client sampling, local training, server aggregation.

Three modes share one loop:

* ``flex``: clients keep a pruned side expert (LOCAL) and upload only the
  attention LoRA (SHARED_ATTENTION).
* ``dense-baseline``: attention and every expert carry LoRA, all uploaded.
* ``local-only``: the dense-baseline trainables, never communicated.

Server updates are applied in value space. ``W_avg = sum_i (n_i / n) W_i``
is formed first and the strategy adds its correction on top, so a strategy
with neutral hyperparameters returns ``W_avg`` bit for bit.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from flexmoe import numerics as nx
from flexmoe.adapters import (
    LOCAL_EXPERT,
    LOCAL_GATE,
    SHARED_ATTENTION,
    AdapterSet,
    attach_adapters,
    count_params,
    targets_for_mode,
)
from flexmoe.data import ClientData, Example, collate, prepare_data
from flexmoe.errors import ConfigError, InvariantViolation, LifecycleError, ProtocolError
from flexmoe.evaluation import CommLedger, EvalConfig, eval_client, lm_loss, teacher_forced_loss
from flexmoe.model import ModelConfig, ModelParams, PersonalizedState, init_params, param_shapes
from flexmoe.numerics import AdamState, Tensor
from flexmoe.pruning import PruneReport, build_personalized_layer, record_moe_inputs, select_personalized_experts
from flexmoe.rng import stream

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedavgm", "fedprox", "scaffold", "fedadam", "fedadagrad", "fedyogi")
MODES = ("flex", "dense-baseline", "local-only")
METRIC_FIELDS = ("round", "client_id", "train_loss", "eval_loss", "uploaded_params", "downloaded_params", "wall_ms")


@dataclass
class FederationConfig:
    mode: str = "flex"
    strategy: str = "fedavg"
    n_clients: int = 4
    clients_per_round: int = 4
    rounds: int = 10
    local_steps: int = 10
    batch_size: int = 4
    lr: float = 4e-5
    lora_rank: int = 32
    lora_alpha: float = 64.0
    gate_bias: float = 0.0
    prox_mu: float = 0.0
    server_lr: float = 1.0
    server_momentum: float = 0.9
    server_beta1: float = 0.9
    server_beta2: float = 0.99
    server_tau: float = 1e-3
    scaffold_pin_controls: bool = False
    calib_size: int = 16
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 8
    workers: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"federation.mode must be one of {MODES}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"federation.strategy must be one of {STRATEGIES}")
        if self.n_clients < 1 or self.clients_per_round < 1:
            raise ConfigError("federation.n_clients and federation.clients_per_round must be >= 1")
        if self.clients_per_round > self.n_clients:
            raise ConfigError(
                f"federation.clients_per_round ({self.clients_per_round}) exceeds federation.n_clients ({self.n_clients})"
            )
        if self.rounds < 0 or self.local_steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("federation.rounds, local_steps and pretrain_steps must be >= 0")
        if self.batch_size < 1 or self.calib_size < 1 or self.workers < 1 or self.pretrain_batch_size < 1:
            raise ConfigError("federation.batch_size, pretrain_batch_size, calib_size and workers must be >= 1")
        if self.lora_rank < 1:
            raise ConfigError("federation.lora_rank must be >= 1")
        if not self.lr > 0 or not self.server_lr > 0:
            raise ConfigError("federation.lr and federation.server_lr must be > 0")
        if self.prox_mu < 0:
            raise ConfigError("federation.prox_mu must be >= 0")
        if not 0 <= self.server_momentum < 1 or not 0 <= self.server_beta1 < 1 or not 0 <= self.server_beta2 < 1:
            raise ConfigError("server momentum and beta coefficients must lie in [0, 1)")
        if not self.server_tau > 0:
            raise ConfigError("federation.server_tau must be > 0")


# ---------------------------------------------------------------- state


@dataclass
class ClientState:
    client_id: int
    examples: list[Example]
    eval_examples: list[Example]
    adapters: AdapterSet
    pers: PersonalizedState | None = None
    report: PruneReport | None = None
    adam: AdamState = field(default_factory=AdamState)
    control: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.examples)

    def shared_keys(self) -> list[str]:
        return sorted(self.adapters.tensors(SHARED_ATTENTION))


@dataclass
class ServerState:
    strategy: str
    global_values: dict[str, np.ndarray]
    server_lr: float = 1.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    n_clients_total: int = 1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    control: dict[str, np.ndarray] = field(default_factory=dict)
    round: int = 0

    @classmethod
    def create(cls, cfg: FederationConfig, global_values: dict[str, np.ndarray]) -> "ServerState":
        zeros = {k: np.zeros_like(v) for k, v in global_values.items()}
        return cls(
            cfg.strategy,
            {k: v.copy() for k, v in global_values.items()},
            cfg.server_lr,
            cfg.server_momentum,
            cfg.server_beta1,
            cfg.server_beta2,
            cfg.server_tau,
            cfg.n_clients,
            control={k: v.copy() for k, v in zeros.items()},
        )


@dataclass
class Update:
    client_id: int
    delta: dict[str, np.ndarray]  # local_after - broadcast
    n: int
    values: dict[str, np.ndarray]  # local_after
    control_delta: dict[str, np.ndarray] | None = None
    train_loss: float | None = None


class ClientSkip(Exception):
    """Raised by local training when a client has no data."""


# ---------------------------------------------------------------- local training


def _batch_plan(client: ClientState, round_idx: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    rng = stream(seed, "federation", f"batches/{round_idx}/{client.client_id}")
    n = client.n
    return [rng.choice(n, size=batch_size, replace=n < batch_size) for _ in range(steps)]


def local_train_round(
    client: ClientState,
    broadcast: dict[str, np.ndarray],
    params: ModelParams,
    cfg: FederationConfig,
    round_idx: int,
    seed: int,
    server_control: dict[str, np.ndarray] | None = None,
    max_len: int | None = None,
) -> Update:
    """Load ``broadcast`` into the client's SHARED adapters and run ``local_steps`` Adam steps."""
    if client.n == 0:
        raise ClientSkip(f"client {client.client_id} has no training data")
    shared = client.adapters.tensors(SHARED_ATTENTION)
    if set(broadcast) != set(shared):
        raise ProtocolError(f"client {client.client_id}: broadcast keyset does not match SHARED parameters")
    client.adapters.load_values(broadcast, SHARED_ATTENTION)
    anchor = {k: v.copy() for k, v in broadcast.items()}
    trainable = client.adapters.tensors()
    use_prox = cfg.strategy == "fedprox" and cfg.prox_mu > 0
    use_scaffold = cfg.strategy == "scaffold" and not cfg.scaffold_pin_controls
    if use_scaffold:
        if server_control is None:
            raise ProtocolError("SCAFFOLD round without a server control variate")
        for k in shared:
            client.control.setdefault(k, np.zeros_like(anchor[k]))
        correction = {k: server_control[k] - client.control[k] for k in shared}

    losses = []
    for idx in _batch_plan(client, round_idx, cfg.local_steps, cfg.batch_size, seed):
        batch = collate([client.examples[i] for i in idx], max_len)
        with nx.Tape():
            loss = lm_loss(params, batch, client.adapters, client.pers)
            nx.backward(loss)
        losses.append(loss.item())
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in trainable.items()}
        if use_prox:
            for k in shared:
                grads[k] = grads[k] + cfg.prox_mu * (trainable[k].data - anchor[k])
        if use_scaffold:
            for k in shared:
                grads[k] = grads[k] + correction[k]
        nx.adam_step(trainable, grads, client.adam, cfg.lr)
        nx.zero_grads(trainable.values())

    values = client.adapters.values(SHARED_ATTENTION)
    delta = {k: values[k] - anchor[k] for k in values}
    cdelta = None
    if cfg.strategy == "scaffold":
        cdelta = {k: np.zeros_like(v) for k, v in values.items()}
        if use_scaffold and cfg.local_steps > 0:
            scale = 1.0 / (cfg.local_steps * cfg.lr)
            for k in values:
                new_c = client.control[k] - server_control[k] + (anchor[k] - values[k]) * scale
                cdelta[k] = new_c - client.control[k]
                client.control[k] = new_c
    train_loss = math.fsum(losses) / len(losses) if losses else None
    return Update(client.client_id, delta, client.n, values, cdelta, train_loss)


def selective_payload(client: ClientState, update: Update) -> Update:
    """Check that an upload carries exactly the client's SHARED_ATTENTION tensors."""
    groups = client.adapters.groups()
    local = set(groups[LOCAL_EXPERT]) | set(groups[LOCAL_GATE])
    leaked = sorted(local & set(update.values))
    if leaked:
        raise InvariantViolation(f"client {client.client_id} tried to upload LOCAL tensors {leaked[:3]}")
    if set(update.values) != set(groups[SHARED_ATTENTION]):
        raise InvariantViolation(f"client {client.client_id}: upload keyset differs from SHARED_ATTENTION")
    return update


# ---------------------------------------------------------------- aggregation


def _pairwise(terms: list[np.ndarray]) -> np.ndarray:
    if len(terms) == 1:
        return terms[0]
    mid = len(terms) // 2
    return _pairwise(terms[:mid]) + _pairwise(terms[mid:])


def aggregation_weights(updates: Sequence[Update]) -> list[float]:
    n = sum(u.n for u in updates)
    if n <= 0:
        raise ProtocolError("aggregation needs a positive total sample count")
    return [u.n / n for u in updates]


def aggregate(server: ServerState, updates: Sequence[Update]) -> dict[str, np.ndarray]:
    """Apply one server step and return the new global SHARED values."""
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    keys = set(server.global_values)
    for u in updates:
        if set(u.values) != keys or set(u.delta) != keys:
            raise ProtocolError(f"update from client {u.client_id} has a mismatched keyset")
    updates = sorted(updates, key=lambda u: u.client_id)
    w = aggregation_weights(updates)
    if abs(math.fsum(w) - 1.0) > 1e-12:
        raise InvariantViolation(f"aggregation weights sum to {math.fsum(w)!r}")
    eta = server.server_lr
    strat = server.strategy
    new: dict[str, np.ndarray] = {}
    for k in sorted(keys):
        old = server.global_values[k]
        avg = _pairwise([wi * u.values[k] for wi, u in zip(w, updates)])
        delta = avg - old  # pseudo-gradient
        if strat in ("fedavg", "fedprox", "scaffold"):
            val = avg
            if eta != 1.0:
                val = val + (eta - 1.0) * delta
        elif strat == "fedavgm":
            beta = server.momentum
            m_old = server.m.get(k, np.zeros_like(old))
            val = avg
            if eta != 1.0:
                val = val + (eta - 1.0) * delta
            if beta != 0.0:
                val = val + (eta * beta) * m_old
            server.m[k] = beta * m_old + delta
        else:
            b1, b2 = server.beta1, server.beta2
            m = b1 * server.m.get(k, np.zeros_like(old)) + (1.0 - b1) * delta
            v_old = server.v.get(k, np.zeros_like(old))
            d2 = delta * delta
            if strat == "fedadam":
                v = b2 * v_old + (1.0 - b2) * d2
            elif strat == "fedyogi":
                v = v_old - (1.0 - b2) * d2 * np.sign(v_old - d2)
            elif strat == "fedadagrad":
                v = v_old + d2
            else:  # pragma: no cover - guarded by config validation
                raise ConfigError(f"unknown strategy {strat!r}")
            server.m[k], server.v[k] = m, v
            val = old + eta * m / (np.sqrt(v) + server.tau)
        new[k] = val
    if strat == "scaffold":
        for k in sorted(keys):
            deltas = [u.control_delta[k] for u in updates if u.control_delta is not None]
            if deltas:
                server.control[k] = server.control[k] + _pairwise(deltas) / server.n_clients_total
    server.global_values = new
    server.round += 1
    return {k: v.copy() for k, v in new.items()}


# ---------------------------------------------------------------- orchestration


def _round_f32(arrays: dict[str, np.ndarray]) -> None:
    for k, v in arrays.items():
        arrays[k] = v.astype(np.float32).astype(np.float64)


def _client_seed(seed: int, cid: int) -> int:
    return int(stream(seed, "federation", f"client-seed/{cid}").integers(0, 2**62))


def pretrain_base(params: ModelParams, examples: Sequence[Example], steps: int, lr: float, batch_size: int, seed: int, max_len=None) -> list[float]:
    """Full-parameter Adam on pooled data, standing in for a pretrained backbone."""
    tensors = params.tensors
    for t in tensors.values():
        t.requires_grad = True
    state = AdamState()
    rng = stream(seed, "federation", "pretrain")
    losses = []
    try:
        for _ in range(steps):
            idx = rng.choice(len(examples), size=batch_size, replace=len(examples) < batch_size)
            batch = collate([examples[i] for i in idx], max_len)
            with nx.Tape():
                loss = lm_loss(params, batch)
                nx.backward(loss)
            losses.append(loss.item())
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
            nx.adam_step(tensors, grads, state, lr)
            nx.zero_grads(tensors.values())
    finally:
        for t in tensors.values():
            t.requires_grad = False
    return losses


def build_backbone(mcfg: ModelConfig, cfg: FederationConfig, data: ClientData, seed: int, max_len=None) -> ModelParams:
    """Seeded init plus optional pretraining, snapped to the f32 grid used on disk."""
    params = init_params(mcfg, seed)
    if cfg.pretrain_steps:
        corpus = data.pretrain if data.pretrain is not None else data.train
        pretrain_base(params, corpus.examples, cfg.pretrain_steps, cfg.pretrain_lr, cfg.pretrain_batch_size, seed, max_len)
    for t in params.tensors.values():
        t.data = t.data.astype(np.float32).astype(np.float64)
    return params


class Federation:
    """One federated run. Call :meth:`setup` once, then :meth:`run_round` per round."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        cfg: FederationConfig,
        data: ClientData,
        seed: int = 0,
        eval_cfg: EvalConfig | None = None,
        max_len: int | None = None,
    ):
        cfg.validate()
        if len(data.parts) != cfg.n_clients:
            raise ConfigError(f"data has {len(data.parts)} partitions for {cfg.n_clients} clients")
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.data = data
        self.seed = seed
        self.eval_cfg = eval_cfg or EvalConfig()
        self.max_len = max_len
        self.params: ModelParams | None = None
        self.server: ServerState | None = None
        self.clients: list[ClientState] = []
        self.ledger = CommLedger()
        self.metrics: list[dict] = []
        self.round0: dict[int, float] = {}

    # -- setup

    def _shared_targets(self):
        return [s for s in targets_for_mode(self.model_cfg, self.cfg.mode) if s.group == SHARED_ATTENTION]

    def setup(self, evaluate_round0: bool = True, base_params: ModelParams | None = None) -> None:
        """Build the backbone, the server and every client (pruning included for FLEx).

        ``base_params`` reuses an already built backbone (copied, never shared).
        """
        cfg, mcfg = self.cfg, self.model_cfg
        if base_params is not None:
            if param_shapes(base_params.config) != param_shapes(mcfg):
                raise ConfigError("base_params do not fit this model config")
            params = ModelParams(mcfg, {k: Tensor(t.data.copy()) for k, t in base_params.tensors.items()})
        else:
            params = build_backbone(mcfg, cfg, self.data, self.seed, self.max_len)
        self.params = params
        init_global = attach_adapters(mcfg, self._shared_targets(), cfg.lora_rank, cfg.lora_alpha, self.seed).values()
        self.server = ServerState.create(cfg, init_global)
        self.clients = [self._make_client(cid, init_global) for cid in range(cfg.n_clients)]
        if evaluate_round0:
            self.round0 = {c.client_id: self._eval_loss(c) for c in self.clients}

    def _make_client(self, cid: int, init_global: dict[str, np.ndarray], report: PruneReport | None = None) -> ClientState:
        cfg, mcfg = self.cfg, self.model_cfg
        examples = [self.data.train.examples[i] for i in self.data.parts[cid]]
        evals = list(self.data.evals[cid])[: self.eval_cfg.max_examples]
        cseed = _client_seed(self.seed, cid)
        adapters = attach_adapters(mcfg, self._shared_targets(), cfg.lora_rank, cfg.lora_alpha, self.seed)
        adapters.load_values(init_global, SHARED_ATTENTION)
        client = ClientState(cid, examples, evals, adapters)
        if cfg.mode == "flex":
            if report is None:
                if not examples:
                    raise LifecycleError(f"client {cid} has no data for expert selection")
                pick = stream(self.seed, "pruning", f"calib/{cid}").permutation(len(examples))[: cfg.calib_size]
                calib = record_moe_inputs(self.params, [examples[i] for i in sorted(pick)])
                report = select_personalized_experts(self.params, calib)
            client.pers, _ = build_personalized_layer(
                self.params, report, adapters, cfg.lora_rank, cfg.lora_alpha, cseed, cfg.gate_bias
            )
            client.report = report
        if cfg.strategy == "scaffold":
            client.control = {k: np.zeros_like(v) for k, v in init_global.items()}
        return client

    # -- rounds

    def sample_clients(self, round_idx: int) -> list[int]:
        rng = stream(self.seed, "federation", f"sample/{round_idx}")
        picked = rng.choice(self.cfg.n_clients, size=self.cfg.clients_per_round, replace=False)
        return sorted(int(c) for c in picked)

    def _eval_loss(self, client: ClientState) -> float | None:
        if not client.eval_examples:
            return None
        return teacher_forced_loss(self.params, client.eval_examples, client.adapters, client.pers, self.eval_cfg.batch_size, self.max_len)

    def _train_one(self, cid: int, broadcast: dict[str, np.ndarray], round_idx: int):
        client = self.clients[cid]
        t0 = time.perf_counter()
        try:
            upd = local_train_round(
                client, broadcast, self.params, self.cfg, round_idx, self.seed, self.server.control, self.max_len
            )
        except ClientSkip as e:
            log.warning("%s", e)
            upd = None
        return upd, (time.perf_counter() - t0) * 1000.0

    def run_round(self) -> list[dict]:
        if self.server is None:
            raise LifecycleError("call setup() before run_round()")
        cfg = self.cfg
        r = self.server.round + 1
        sampled = self.sample_clients(r)
        local_only = cfg.mode == "local-only"
        n_shared = count_params(self.clients[0].adapters, group=SHARED_ATTENTION)

        broadcasts = {}
        for cid in sampled:
            if local_only:
                broadcasts[cid] = self.clients[cid].adapters.values(SHARED_ATTENTION)
            else:
                broadcasts[cid] = {k: v.copy() for k, v in self.server.global_values.items()}
                self.ledger.record(r, "down", cid, SHARED_ATTENTION, n_shared)

        if cfg.workers > 1 and len(sampled) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda c: self._train_one(c, broadcasts[c], r), sampled))
        else:
            results = [self._train_one(c, broadcasts[c], r) for c in sampled]

        updates = []
        for cid, (upd, _) in zip(sampled, results):
            if upd is None:
                continue
            if not local_only:
                selective_payload(self.clients[cid], upd)
                self.ledger.record(r, "up", cid, SHARED_ATTENTION, count_params(self.clients[cid].adapters, group=SHARED_ATTENTION))
            updates.append(upd)

        if local_only:
            self.server.round += 1
        elif updates:
            new = aggregate(self.server, updates)
            for cid in sampled:
                self.clients[cid].adapters.load_values(new, SHARED_ATTENTION)
        else:
            self.server.round += 1

        do_eval = r % self.eval_cfg.every_n_rounds == 0 or r == cfg.rounds
        rows = []
        for cid, (upd, ms) in zip(sampled, results):
            rows.append(
                {
                    "round": r,
                    "client_id": cid,
                    "train_loss": upd.train_loss if upd is not None else None,
                    "eval_loss": self._eval_loss(self.clients[cid]) if do_eval else None,
                    "uploaded_params": 0 if (local_only or upd is None) else n_shared,
                    "downloaded_params": 0 if local_only else n_shared,
                    "wall_ms": round(ms, 3) if self.eval_cfg.record_wall_time else 0,
                }
            )
        self.metrics.extend(rows)
        return rows

    def run(self, rounds: int | None = None, on_round: Callable[["Federation", int], None] | None = None) -> list[dict]:
        target = self.cfg.rounds if rounds is None else rounds
        while self.server.round < target:
            self.run_round()
            if on_round is not None:
                on_round(self, self.server.round)
        return self.metrics

    def install_global(self) -> None:
        """Give every client the current global SHARED values (no-op for local-only)."""
        if self.cfg.mode == "local-only":
            return
        for c in self.clients:
            c.adapters.load_values(self.server.global_values, SHARED_ATTENTION)

    def final_eval(self) -> dict[int, dict]:
        self.install_global()
        out = {}
        for c in self.clients:
            if not c.eval_examples:
                continue
            ev = eval_client(
                self.params,
                c.eval_examples,
                c.adapters,
                c.pers,
                self.eval_cfg.max_new_tokens,
                self.eval_cfg.rouge_beta,
                self.eval_cfg.batch_size,
            )
            out[c.client_id] = {"eval_loss": ev.eval_loss, "rouge_l_f1": ev.rouge_l_f1}
        return out

    # -- persistence

    def round_to_f32(self) -> None:
        """Snap all mutable state to the f32 grid used on disk."""
        for c in self.clients:
            for t in c.adapters.tensors().values():
                t.data = t.data.astype(np.float32).astype(np.float64)
            _round_f32(c.adam.m)
            _round_f32(c.adam.v)
            _round_f32(c.control)
        for d in (self.server.global_values, self.server.m, self.server.v, self.server.control):
            _round_f32(d)

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        tensors: dict[str, np.ndarray] = {}
        for k, t in self.params.tensors.items():
            tensors[f"base/{k}"] = t.data
        for name, d in (("global", self.server.global_values), ("server_m", self.server.m), ("server_v", self.server.v), ("server_c", self.server.control)):
            for k, v in d.items():
                tensors[f"{name}/{k}"] = v
        clients = []
        for c in self.clients:
            p = f"client/{c.client_id}"
            for k, v in c.adapters.values().items():
                tensors[f"{p}/adapters/{k}"] = v
            for k, v in c.adam.m.items():
                tensors[f"{p}/adam_m/{k}"] = v
            for k, v in c.adam.v.items():
                tensors[f"{p}/adam_v/{k}"] = v
            for k, v in c.control.items():
                tensors[f"{p}/control/{k}"] = v
            clients.append(
                {"client_id": c.client_id, "n": c.n, "adam_t": c.adam.t, "report": c.report.to_dict() if c.report else None}
            )
        header = {
            "round": self.server.round,
            "rng_cursor": self.server.round,
            "seed": self.seed,
            "model": self.model_cfg.to_dict(),
            "federation": asdict(self.cfg),
            "clients": clients,
            "metrics": [dict(r) for r in self.metrics],
            "ledger": self.ledger.to_dicts(),
            "round0": {str(k): v for k, v in self.round0.items()},
        }
        return header, tensors

    def load_state_dict(self, header: dict, tensors: dict[str, np.ndarray]) -> None:
        """Restore a run saved by :meth:`state_dict`; data must come from the same config."""
        if header["model"] != self.model_cfg.to_dict():
            raise ConfigError("checkpoint model config differs from the current one")
        params = ModelParams(self.model_cfg, {})
        for name in param_shapes(self.model_cfg):
            key = f"base/{name}"
            if key not in tensors:
                raise ConfigError(f"checkpoint lacks base tensor {name}")
            params.tensors[name] = Tensor(np.array(tensors[key], dtype=np.float64))
        self.params = params

        def section(prefix: str) -> dict[str, np.ndarray]:
            n = len(prefix)
            return {k[n:]: np.array(v, dtype=np.float64) for k, v in tensors.items() if k.startswith(prefix)}

        glob = section("global/")
        self.server = ServerState.create(self.cfg, glob)
        self.server.m = section("server_m/")
        self.server.v = section("server_v/")
        ctrl = section("server_c/")
        if ctrl:
            self.server.control = ctrl
        self.server.round = int(header["round"])
        self.clients = []
        for meta in header["clients"]:
            cid = int(meta["client_id"])
            report = PruneReport.from_dict(meta["report"]) if meta.get("report") else None
            c = self._make_client(cid, glob, report)
            p = f"client/{cid}/"
            c.adapters.load_values(section(p + "adapters/"))
            c.adam = AdamState(section(p + "adam_m/"), section(p + "adam_v/"), int(meta["adam_t"]))
            c.control = section(p + "control/") or c.control
            self.clients.append(c)
        self.metrics = [dict(r) for r in header.get("metrics", [])]
        self.ledger = CommLedger.from_dicts(header.get("ledger", []))
        self.round0 = {int(k): v for k, v in header.get("round0", {}).items()}


def run_federation(exp, on_round=None) -> Federation:
    """Build data and clients from an experiment config and run every round."""
    fed = Federation(exp.model, exp.federation, prepare_data(exp.data, exp.federation.n_clients, exp.seed), exp.seed, exp.eval, exp.data.max_len)
    fed.setup()
    fed.run(on_round=on_round)
    return fed
