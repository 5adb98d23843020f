import dataclasses

import numpy as np
import pytest

from flexmoe import federation as fedmod
from flexmoe.adapters import LOCAL_EXPERT, LOCAL_GATE, SHARED_ATTENTION
from flexmoe.data import DataConfig, prepare_data
from flexmoe.errors import ConfigError, InvariantViolation, ProtocolError
from flexmoe.evaluation import EvalConfig
from flexmoe.federation import (
    Federation,
    FederationConfig,
    ServerState,
    Update,
    aggregate,
    build_backbone,
    local_train_round,
    selective_payload,
)
from flexmoe.model import ModelConfig

MODEL = ModelConfig(n_layers=1, d_model=16, n_heads=2, n_experts=4, top_k=2)


def fed_config(**kw):
    base = dict(mode="flex", strategy="fedavg", n_clients=2, clients_per_round=2, rounds=3, local_steps=3,
                batch_size=2, lr=3e-3, lora_rank=4, lora_alpha=8, calib_size=4)
    base.update(kw)
    return FederationConfig(**base)


def make_fed(n_tasks=2, seed=0, model=MODEL, **kw):
    cfg = fed_config(**kw)
    data = prepare_data(DataConfig(n_tasks=n_tasks, per_task=6, eval_per_task=2), cfg.n_clients, seed)
    fed = Federation(model, cfg, data, seed, EvalConfig(max_examples=2))
    fed.setup(evaluate_round0=False)
    return fed


def run_values(**kw):
    fed = make_fed(**kw)
    fed.run()
    return fed


def assert_same_run(a, b):
    assert a.metrics == b.metrics
    for k, v in a.server.global_values.items():
        assert np.array_equal(v, b.server.global_values[k]), k
    for ca, cb in zip(a.clients, b.clients):
        for k, v in ca.adapters.values().items():
            assert np.array_equal(v, cb.adapters.values()[k]), k


def _server(strategy, values, **kw):
    cfg = FederationConfig(strategy=strategy, n_clients=2, clients_per_round=2, **kw)
    return ServerState.create(cfg, values)


def _upd(cid, n, new, old):
    return Update(cid, {k: new[k] - old[k] for k in new}, n, new)


# ---------------------------------------------------------------- aggregation arithmetic


def test_weighted_mean_example():
    old = {"w": np.array([0.0])}
    server = _server("fedavg", old)
    new = aggregate(server, [_upd(0, 1, {"w": np.array([1.0])}, old), _upd(1, 3, {"w": np.array([3.0])}, old)])
    assert new["w"][0] == 2.5


def test_aggregation_is_order_independent(rng):
    old = {"w": np.zeros(5)}
    ups = [_upd(c, int(rng.integers(1, 9)), {"w": rng.normal(size=5)}, old) for c in range(5)]
    a = aggregate(_server("fedavg", old), ups)
    b = aggregate(_server("fedavg", old), ups[::-1])
    assert np.array_equal(a["w"], b["w"])


def test_fedavgm_momentum_by_hand():
    old = {"w": np.array([0.0])}
    server = _server("fedavgm", old, server_momentum=0.5, server_lr=1.0)
    w1 = aggregate(server, [_upd(0, 1, {"w": np.array([1.0])}, old)])["w"][0]
    assert w1 == 1.0  # no momentum yet
    w2 = aggregate(server, [_upd(0, 1, {"w": np.array([3.0])}, {"w": np.array([1.0])})])["w"][0]
    # m after round 1 = 1; round 2 = w_avg + eta*beta*m_old = 3 + 0.5
    assert w2 == pytest.approx(3.5, abs=1e-15)


@pytest.mark.parametrize("strategy", ["fedadam", "fedyogi", "fedadagrad"])
def test_adaptive_first_step_by_hand(strategy):
    b1, b2, tau, eta = 0.9, 0.99, 1e-3, 0.1
    old = {"w": np.array([0.5])}
    server = _server(strategy, old, server_beta1=b1, server_beta2=b2, server_tau=tau, server_lr=eta)
    new = aggregate(server, [_upd(0, 1, {"w": np.array([0.7])}, old)])["w"][0]
    d = 0.7 - 0.5
    m = (1 - b1) * d
    v = {"fedadam": (1 - b2) * d * d, "fedyogi": (1 - b2) * d * d, "fedadagrad": d * d}[strategy]
    assert new == pytest.approx(0.5 + eta * m / (np.sqrt(v) + tau), rel=1e-12)


def test_fedyogi_second_step_by_hand():
    b1, b2, tau, eta = 0.9, 0.99, 1e-3, 0.1
    server = _server("fedyogi", {"w": np.array([0.0])}, server_beta1=b1, server_beta2=b2, server_tau=tau, server_lr=eta)
    w = np.array([0.0])
    m = v = 0.0
    for target in (1.0, -0.5):
        w_new = aggregate(server, [_upd(0, 1, {"w": np.array([target])}, {"w": w})])["w"]
        d = target - w[0]
        m = b1 * m + (1 - b1) * d
        v = v - (1 - b2) * d * d * np.sign(v - d * d)
        assert w_new[0] == pytest.approx(w[0] + eta * m / (np.sqrt(v) + tau), rel=1e-12)
        w = w_new


def test_server_lr_scales_fedavg_step():
    old = {"w": np.array([1.0])}
    new = aggregate(_server("fedavg", old, server_lr=2.0), [_upd(0, 1, {"w": np.array([2.0])}, old)])
    assert new["w"][0] == 3.0


def test_aggregate_protocol_errors():
    old = {"w": np.zeros(1)}
    with pytest.raises(ProtocolError):
        aggregate(_server("fedavg", old), [])
    with pytest.raises(ProtocolError):
        aggregate(_server("fedavg", old), [_upd(0, 1, {"v": np.zeros(1)}, {"v": np.zeros(1)})])
    with pytest.raises(ProtocolError):
        aggregate(_server("fedavg", old), [_upd(0, 0, {"w": np.zeros(1)}, old)])


# ---------------------------------------------------------------- degeneracies (bitwise)


def test_single_client_fedavg_equals_local_training():
    fed = make_fed(n_clients=1, clients_per_round=1, rounds=1, n_tasks=1)
    client = fed.clients[0]
    # an independent replica of the same client trains without any server in the loop
    solo = make_fed(n_clients=1, clients_per_round=1, rounds=1, n_tasks=1).clients[0]
    upd = local_train_round(solo, dict(fed.server.global_values), fed.params, fed.cfg, 1, fed.seed)
    fed.run()
    for k, v in upd.values.items():
        assert np.array_equal(fed.server.global_values[k], v)
        assert np.array_equal(client.adapters.values()[k], v)


def test_fedprox_mu0_is_fedavg():
    assert_same_run(run_values(strategy="fedprox", prox_mu=0.0), run_values(strategy="fedavg"))


def test_fedprox_positive_mu_differs():
    a = run_values(strategy="fedprox", prox_mu=10.0)
    b = run_values(strategy="fedavg")
    assert any(not np.array_equal(v, b.server.global_values[k]) for k, v in a.server.global_values.items())


def test_fedavgm_beta0_eta1_is_fedavg():
    assert_same_run(run_values(strategy="fedavgm", server_momentum=0.0, server_lr=1.0), run_values(strategy="fedavg"))


def test_scaffold_zero_controls_is_fedavg():
    assert_same_run(run_values(strategy="scaffold", scaffold_pin_controls=True), run_values(strategy="fedavg"))


def test_scaffold_controls_move():
    fed = run_values(strategy="scaffold")
    assert any(np.abs(v).max() > 0 for v in fed.server.control.values())


@pytest.mark.parametrize("strategy", fedmod.STRATEGIES)
def test_every_strategy_runs(strategy):
    fed = run_values(strategy=strategy, rounds=2)
    assert fed.server.round == 2
    assert all(np.isfinite(v).all() for v in fed.server.global_values.values())


# ---------------------------------------------------------------- selective aggregation


def test_selective_protocol(monkeypatch):
    seen = []
    real = fedmod.aggregate

    def spy(server, updates):
        seen.append([set(u.values) for u in updates])
        return real(server, updates)

    monkeypatch.setattr(fedmod, "aggregate", spy)
    fed = make_fed(rounds=10, local_steps=2)
    shared = set(fed.clients[0].adapters.groups()[SHARED_ATTENTION])
    for _ in range(10):
        fed.run_round()
        ref = fed.clients[0].adapters.values(SHARED_ATTENTION)
        for c in fed.clients[1:]:
            for k, v in c.adapters.values(SHARED_ATTENTION).items():
                assert np.array_equal(v, ref[k])
    assert len(seen) == 10
    assert all(keys == shared for rnd in seen for keys in rnd)
    a, b = (c.adapters.values() for c in fed.clients[:2])
    local = fed.clients[0].adapters.groups()[LOCAL_EXPERT] + fed.clients[0].adapters.groups()[LOCAL_GATE]
    assert any(not np.array_equal(a[k], b[k]) for k in local)


def test_upload_with_local_tensor_is_rejected():
    fed = make_fed()
    c = fed.clients[0]
    values = c.adapters.values()
    with pytest.raises(InvariantViolation):
        selective_payload(c, Update(0, values, c.n, values))


def test_ledger_counts():
    fed = run_values(rounds=3)
    rows = fed.ledger.rows
    assert len(rows) == 2 * 3 * 2
    assert {r.direction for r in rows} == {"up", "down"}
    local = run_values(mode="local-only", rounds=2)
    assert local.ledger.rows == []


def test_dense_baseline_uploads_expert_adapters():
    fed = make_fed(mode="dense-baseline")
    shared = fed.clients[0].shared_keys()
    assert any(".moe.experts." in k for k in shared)
    assert fed.clients[0].pers is None


def test_local_only_never_shares():
    fed = run_values(mode="local-only", rounds=2)
    a, b = (c.adapters.values(SHARED_ATTENTION) for c in fed.clients)
    assert any(not np.array_equal(a[k], b[k]) for k in a)


def test_frozen_base_after_training():
    fed = make_fed()
    before = {k: v.copy() for k, v in fed.params.values().items()}
    fed.run()
    for k, v in fed.params.values().items():
        assert np.array_equal(v, before[k])


# ---------------------------------------------------------------- orchestration


def test_determinism_and_state_roundtrip():
    a = run_values(rounds=2)
    b = run_values(rounds=2)
    assert_same_run(a, b)
    header, tensors = a.state_dict()
    c = Federation(a.model_cfg, a.cfg, a.data, a.seed, a.eval_cfg)
    c.load_state_dict(header, tensors)
    assert c.server.round == 2 and c.metrics == a.metrics


def test_resume_is_bitwise():
    full = make_fed(rounds=4)
    full.run(2)
    full.round_to_f32()
    header, tensors = full.state_dict()
    full.run(4)
    resumed = Federation(full.model_cfg, full.cfg, full.data, full.seed, full.eval_cfg)
    resumed.load_state_dict(header, {k: v.astype(np.float32).astype(np.float64) for k, v in tensors.items()})
    resumed.run(4)
    assert_same_run(full, resumed)


def test_sampling_partial_participation():
    fed = make_fed(n_clients=4, clients_per_round=2, n_tasks=4, rounds=3)
    picks = [fed.sample_clients(r) for r in range(1, 4)]
    assert all(len(p) == 2 and len(set(p)) == 2 for p in picks)
    assert picks == [fed.sample_clients(r) for r in range(1, 4)]


def test_config_errors():
    with pytest.raises(ConfigError):
        FederationConfig(n_clients=2, clients_per_round=3).validate()
    with pytest.raises(ConfigError):
        FederationConfig(strategy="fedfancy").validate()
    with pytest.raises(ConfigError):
        FederationConfig(mode="central").validate()


def test_workers_do_not_change_results():
    assert_same_run(run_values(workers=2, rounds=2), run_values(workers=1, rounds=2))


def test_backbone_pretraining_reduces_loss():
    cfg = fed_config(pretrain_steps=30, pretrain_lr=3e-3)
    data = prepare_data(DataConfig(n_tasks=2, per_task=6, eval_per_task=2), 2, 0)
    losses = fedmod.pretrain_base(fedmod.init_params(MODEL, 0), data.train.examples, 30, 3e-3, 4, 0)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    params = build_backbone(MODEL, cfg, data, 0)
    assert all(np.array_equal(t.data, t.data.astype(np.float32)) for t in params.tensors.values())
    assert not any(t.requires_grad for t in params.tensors.values())


def test_base_params_are_copied():
    fed = make_fed()
    other = Federation(MODEL, dataclasses.replace(fed.cfg), fed.data, 0, EvalConfig(max_examples=2))
    other.setup(evaluate_round0=False, base_params=fed.params)
    assert other.params.tensors["embed.tokens"] is not fed.params.tensors["embed.tokens"]
    assert np.array_equal(other.params["embed.tokens"].data, fed.params["embed.tokens"].data)
