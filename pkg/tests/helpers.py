"""Shared oracles for the test suite: finite differences, op registry, tiny models."""

from __future__ import annotations

import numpy as np

from flexmoe import numerics as nx
from flexmoe.adapters import attach_adapters, targets_for_mode
from flexmoe.model import ModelConfig, RoutingTrace, init_params, model_forward
from flexmoe.numerics import Tensor
from flexmoe.pruning import PruneReport, LayerSelection, build_personalized_layer

H = 1e-4
TOL = 1e-4


def num_grad(f, arr, h=H):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-7):
    """Elementwise relative error, with an absolute floor for near-zero gradients."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=1, d_model=8, n_heads=2, vocab_size=11, n_experts=4, top_k=2, max_seq_len=8)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- op registry
#
# Each entry builds (inputs, fn) from a generator: ``inputs`` are float arrays
# that receive gradients, ``fn`` maps the matching Tensors to an output Tensor.


def _shape(rng, nd=2, lo=1, hi=8):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(nd))


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_add(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=(1, s[1]))], lambda a, b: nx.add(a, b)


def _op_sub(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=s)], lambda a, b: nx.sub(a, b)


def _op_mul(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=(s[0], 1))], lambda a, b: nx.mul(a, b)


def _op_div(rng):
    s = _shape(rng)
    return [rng.normal(size=s), _away_from_zero(rng, s)], lambda a, b: nx.div(a, b)


def _op_exp(rng):
    return [rng.normal(size=_shape(rng))], nx.exp


def _op_log(rng):
    return [rng.uniform(0.3, 3.0, size=_shape(rng))], nx.log


def _act(kind):
    def build(rng):
        s = _shape(rng)
        x = _away_from_zero(rng, s) if kind == "relu" else rng.normal(size=s)
        return [x], lambda t: nx.activation(kind, t)

    return build


def _op_matmul(rng):
    m, k, n = _shape(rng, 3)
    return [rng.normal(size=(m, k)), rng.normal(size=(k, n))], nx.matmul


def _op_matmul_batched(rng):
    b, m, k, n = _shape(rng, 4, hi=4)
    return [rng.normal(size=(b, m, k)), rng.normal(size=(k, n))], nx.matmul


def _op_sum(rng):
    s = _shape(rng)
    axis = int(rng.integers(0, 2))
    keep = bool(rng.integers(0, 2))
    return [rng.normal(size=s)], lambda t: nx.sum(t, axis=axis, keepdims=keep)


def _op_mean(rng):
    s = _shape(rng)
    return [rng.normal(size=s)], lambda t: nx.mean(t, axis=-1)


def _op_reshape(rng):
    a, b = _shape(rng)
    return [rng.normal(size=(a, b))], lambda t: nx.reshape(t, (b, a))


def _op_transpose(rng):
    s = _shape(rng, 3, hi=4)
    return [rng.normal(size=s)], lambda t: nx.transpose(t, (2, 0, 1))


def _op_stack(rng):
    s = _shape(rng)
    return [rng.normal(size=s), rng.normal(size=s)], lambda a, b: nx.stack([a, b], axis=1)


def _op_concat(rng):
    r, c1 = _shape(rng)
    c2 = int(rng.integers(1, 8))
    return [rng.normal(size=(r, c1)), rng.normal(size=(r, c2))], lambda a, b: nx.concat([a, b], axis=-1)


def _op_narrow(rng):
    r, c = _shape(rng, lo=2)
    start = int(rng.integers(0, c - 1))
    stop = int(rng.integers(start + 1, c + 1))
    return [rng.normal(size=(r, c))], lambda t: nx.narrow(t, start, stop, axis=-1)


def _op_embedding(rng):
    V, d = _shape(rng)
    ids = rng.integers(0, V, size=int(rng.integers(1, 9)))
    return [rng.normal(size=(V, d))], lambda t: nx.embedding(t, ids)


def _op_softmax(rng):
    return [rng.normal(size=_shape(rng)) * 2], lambda t: nx.softmax(t, axis=-1)


def _op_layer_norm(rng):
    r, d = _shape(rng, lo=2)
    return [rng.normal(size=(r, d)), rng.normal(size=(d,))], lambda x, w: nx.layer_norm(x, w)


def _op_cross_entropy(rng):
    T, V = _shape(rng, lo=2)
    tgt = rng.integers(0, V, size=T)
    tgt[0] = -100  # ignored position
    return [rng.normal(size=(T, V))], lambda t: nx.cross_entropy(t, tgt)


OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "div": _op_div,
    "exp": _op_exp,
    "log": _op_log,
    "sigmoid": _act("sigmoid"),
    "relu": _act("relu"),
    "tanh": _act("tanh"),
    "silu": _act("silu"),
    "gelu": _act("gelu"),
    "matmul": _op_matmul,
    "matmul_batched": _op_matmul_batched,
    "sum": _op_sum,
    "mean": _op_mean,
    "reshape": _op_reshape,
    "transpose": _op_transpose,
    "stack": _op_stack,
    "concat": _op_concat,
    "narrow": _op_narrow,
    "embedding": _op_embedding,
    "softmax": _op_softmax,
    "layer_norm": _op_layer_norm,
    "cross_entropy": _op_cross_entropy,
}


def check_op(name: str, seed: int) -> float:
    """Max relative error between tape and finite-difference gradients for one draw."""
    rng = np.random.default_rng(seed)
    arrays, fn = OPS[name](rng)
    # a fixed random projection turns any output into a scalar with generic gradients
    probe_rng = np.random.default_rng(seed + 10_000)
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = probe_rng.normal(size=out_shape)

    def scalar(ts):
        return nx.sum(nx.mul(fn(*ts), w))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with nx.Tape():
        loss = scalar(leaves)
        nx.backward(loss)
    worst = 0.0
    for k, a in enumerate(arrays):
        work = [x.copy() for x in arrays]
        numeric = num_grad(lambda: scalar([Tensor(x) for x in work]).item(), work[k])
        worst = max(worst, rel_err(leaves[k].grad, numeric))
    return worst


# ---------------------------------------------------------------- full-model check


def random_model_case(seed: int):
    """A small FLEx model with every parameter trainable and non-trivial adapters."""
    rng = np.random.default_rng(seed)
    n_experts = int(rng.integers(2, 5))
    cfg = ModelConfig(
        n_layers=int(rng.integers(1, 3)),
        d_model=4,
        n_heads=int(rng.choice([1, 2])),
        vocab_size=7,
        n_experts=n_experts,
        top_k=int(rng.integers(1, n_experts + 1)),
        n_shared_experts=int(rng.integers(0, 2)),
        max_seq_len=5,
        gate_activation=str(rng.choice(["sigmoid", "tanh", "relu"])),
        renormalize_topk=bool(rng.integers(0, 2)),
        hidden_act=str(rng.choice(["silu", "gelu"])),
        init_std=0.5,  # O(1) activations: exercises the nonlinearities, keeps layer norm well conditioned
    )
    params = init_params(cfg, seed)
    report = PruneReport([LayerSelection(l, [0.0] * n_experts, int(rng.integers(0, n_experts)), None) for l in range(cfg.n_layers)])
    adapters = attach_adapters(cfg, targets_for_mode(cfg, "attention-only"), rank=2, alpha=4, seed=seed)
    pers, adapters = build_personalized_layer(params, report, adapters, rank=2, alpha=4, seed=seed, gate_bias=0.5)
    for t in adapters.tensors().values():
        t.data = np.asarray(t.data + rng.normal(0.0, 0.3, size=t.shape))
    ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(2, cfg.max_seq_len + 1)))
    targets = np.roll(ids, -1)
    targets[-1] = -100
    return params, adapters, pers, ids, targets


def check_model(seed: int) -> tuple[float, int, int]:
    """Compare every scalar gradient of the full LM loss against central differences.

    Coordinates whose perturbation changes the discrete top-K routing or flips
    a relu side gate sit on a kink and are skipped. Returns
    ``(max_rel_err, n_checked, n_skipped)``.
    """
    params, adapters, pers, ids, targets = random_model_case(seed)
    leaves = {**{f"base/{k}": t for k, t in params.tensors.items()}, **adapters.tensors()}
    for t in leaves.values():
        t.requires_grad = True

    def loss_and_route():
        tr = RoutingTrace()
        loss = nx.cross_entropy(model_forward(ids, params, adapters, pers, trace=tr), targets)
        gates = np.concatenate([tr.side_gates[l] > 0 for l in sorted(tr.side_gates)])
        return loss.item(), [tr.layers[l].copy() for l in sorted(tr.layers)], gates

    with nx.Tape():
        loss = nx.cross_entropy(model_forward(ids, params, adapters, pers), targets)
        nx.backward(loss)
    analytic = {k: t.grad.copy() for k, t in leaves.items()}
    for t in leaves.values():
        t.requires_grad = False

    _, route0, gates0 = loss_and_route()
    worst, checked, skipped = 0.0, 0, 0
    for k, t in leaves.items():
        arr = t.data
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + H
            fp, rp, gp = loss_and_route()
            arr[i] = old - H
            fm, rm, gm = loss_and_route()
            arr[i] = old
            same = all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(route0, rp, rm))
            if not same or not (np.array_equal(gates0, gp) and np.array_equal(gates0, gm)):
                skipped += 1
                continue
            worst = max(worst, rel_err(analytic[k][i], (fp - fm) / (2 * H)))
            checked += 1
    return worst, checked, skipped
