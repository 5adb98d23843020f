"""ROUGE-L, the communication ledger, expert load statistics and per-client evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from flexmoe import numerics as nx
from flexmoe.adapters import AdapterSet
from flexmoe.data import EOS, Example, collate, detokenize, render_alpaca_prompt, tokenize
from flexmoe.errors import ConfigError, EmptyCorpusError, InputError
from flexmoe.model import ModelParams, PersonalizedState, RoutingTrace, model_forward

SIDE_ACTIVE_THRESHOLD = 0.5


@dataclass
class EvalConfig:
    every_n_rounds: int = 1
    max_examples: int = 16  # per client, for the per-round loss
    max_new_tokens: int = 0  # greedy ROUGE-L at the end of a run; 0 disables it
    rouge_beta: float = 1.0
    batch_size: int = 8
    record_wall_time: bool = False

    def validate(self) -> None:
        if self.every_n_rounds < 1:
            raise ConfigError("eval.every_n_rounds must be >= 1")
        if self.max_examples < 1 or self.batch_size < 1:
            raise ConfigError("eval.max_examples and eval.batch_size must be >= 1")
        if self.max_new_tokens < 0:
            raise ConfigError("eval.max_new_tokens must be >= 0")
        if not self.rouge_beta > 0:
            raise ConfigError("eval.rouge_beta must be > 0")


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.0) -> tuple[float, float, float]:
    """(precision, recall, F-beta) over lower-cased whitespace tokens.

    Two empty strings score 1; one empty side scores 0.
    """
    c = candidate.lower().split()
    r = reference.lower().split()
    if not c and not r:
        return 1.0, 1.0, 1.0
    if not c or not r:
        return 0.0, 0.0, 0.0
    ell = lcs_length(c, r)
    if ell == 0:
        return 0.0, 0.0, 0.0
    p = ell / len(c)
    rec = ell / len(r)
    b2 = beta * beta
    f = (1 + b2) * p * rec / (rec + b2 * p)
    return p, rec, f


# ---------------------------------------------------------------- communication ledger


BYTES_PER_PARAM = 4  # f32 on the wire

LEDGER_FIELDS = ("round", "direction", "client_id", "group", "param_count", "byte_count")


@dataclass(frozen=True)
class LedgerRow:
    round: int
    direction: str
    client_id: int
    group: str
    param_count: int

    @property
    def byte_count(self) -> int:
        return BYTES_PER_PARAM * self.param_count


@dataclass
class CommLedger:
    rows: list[LedgerRow] = field(default_factory=list)

    def record(self, round: int, direction: str, client_id: int, group: str, param_count: int) -> LedgerRow:
        if direction not in ("up", "down"):
            raise InputError(f"ledger direction must be 'up' or 'down', got {direction!r}")
        if param_count < 0:
            raise InputError("negative parameter count")
        row = LedgerRow(int(round), direction, int(client_id), group, int(param_count))
        self.rows.append(row)
        return row

    def summary(self) -> dict:
        out = {"rows": len(self.rows), "params": {"up": 0, "down": 0}, "bytes": {"up": 0, "down": 0}, "by_group": {}}
        for r in self.rows:
            out["params"][r.direction] += r.param_count
            out["bytes"][r.direction] += r.byte_count
            g = out["by_group"].setdefault(r.group, {"up": 0, "down": 0})
            g[r.direction] += r.param_count
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for r in self.rows:
            w.writerow([r.round, r.direction, r.client_id, r.group, r.param_count, r.byte_count])
        return buf.getvalue()

    def to_dicts(self) -> list[dict]:
        return [
            {"round": r.round, "direction": r.direction, "client_id": r.client_id, "group": r.group, "param_count": r.param_count}
            for r in self.rows
        ]

    @classmethod
    def from_dicts(cls, rows: list[dict]) -> "CommLedger":
        return cls([LedgerRow(d["round"], d["direction"], d["client_id"], d["group"], d["param_count"]) for d in rows])


def ledger_ratio(dense: CommLedger, flex: CommLedger) -> float:
    """Total parameters moved by the dense baseline over those moved by FLEx."""
    a = dense.summary()["params"]
    b = flex.summary()["params"]
    denom = b["up"] + b["down"]
    return (a["up"] + a["down"]) / denom if denom else 0.0


# ---------------------------------------------------------------- expert load


@dataclass
class ActivationStats:
    counts: np.ndarray  # [L, N] routed (token, expert) selections
    side_counts: np.ndarray  # [L] tokens with side gate above threshold
    n_tokens: int
    top_k: int

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def summary(self) -> dict:
        t = self.totals.astype(float)
        ratio = float(t.max() / t.min()) if t.min() > 0 else math.inf
        return {"mean": float(t.mean()), "std": float(t.std()), "max_min_ratio": ratio}

    def to_json(self) -> str:
        s = self.summary()
        return json.dumps(
            {
                "experts": {str(i): int(c) for i, c in enumerate(self.totals)},
                "per_layer": self.counts.astype(int).tolist(),
                "side": self.side_counts.astype(int).tolist(),
                "tokens": self.n_tokens,
                "mean": s["mean"],
                "std": s["std"],
                "max_min_ratio": s["max_min_ratio"] if math.isfinite(s["max_min_ratio"]) else None,
            },
            indent=1,
        )


def expert_activation_stats(
    params: ModelParams,
    sequences: Sequence,
    adapters: AdapterSet | None = None,
    pers: PersonalizedState | None = None,
) -> ActivationStats:
    """Count routed selections per expert over every token of ``sequences``."""
    cfg = params.config
    seqs = [tokenize(render_alpaca_prompt(s) + s.output) if isinstance(s, Example) else list(s) for s in sequences]
    seqs = [s for s in seqs if len(s)]
    if not seqs:
        raise EmptyCorpusError("activation statistics need a non-empty corpus")
    counts = np.zeros((cfg.n_layers, cfg.n_experts), dtype=np.int64)
    side = np.zeros(cfg.n_layers, dtype=np.int64)
    n_tok = 0
    for s in seqs:
        tr = RoutingTrace()
        model_forward(np.asarray(s, dtype=np.int64), params, adapters, pers, trace=tr)
        n_tok += len(s)
        for l in range(cfg.n_layers):
            counts[l] += np.bincount(tr.flat(l), minlength=cfg.n_experts)
            if l in tr.side_gates:
                side[l] += int((tr.side_gates[l] > SIDE_ACTIVE_THRESHOLD).sum())
    return ActivationStats(counts, side, n_tok, cfg.top_k)


# ---------------------------------------------------------------- client evaluation


def lm_loss(params: ModelParams, batch, adapters=None, pers=None) -> nx.Tensor:
    """Mean next-token cross-entropy over the response positions of ``batch``."""
    pos = batch.target_positions()
    logits = model_forward(batch.input_ids, params, adapters, pers, positions=pos)
    return nx.cross_entropy(logits, batch.labels.reshape(-1)[pos])


def teacher_forced_loss(params, examples: Sequence[Example], adapters=None, pers=None, batch_size: int = 8, max_len=None) -> float:
    """Token-weighted mean loss over ``examples``."""
    if not examples:
        raise EmptyCorpusError("evaluation set is empty")
    total = 0.0
    n = 0
    for i in range(0, len(examples), batch_size):
        b = collate(examples[i : i + batch_size], max_len)
        k = b.n_targets
        total += lm_loss(params, b, adapters, pers).item() * k
        n += k
    return total / n


def greedy_decode(params, prompt_ids: Sequence[int], max_new_tokens: int, adapters=None, pers=None) -> list[int]:
    """Argmax decoding until EOS or the token budget; EOS is not returned."""
    ids = list(prompt_ids)
    out: list[int] = []
    limit = params.config.max_seq_len
    for _ in range(max_new_tokens):
        if len(ids) >= limit:
            break
        logits = model_forward(np.asarray(ids, dtype=np.int64), params, adapters, pers, positions=[len(ids) - 1])
        nxt = int(np.argmax(logits.data[0]))
        if nxt == EOS:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


@dataclass
class ClientEval:
    eval_loss: float
    rouge_l_f1: float | None
    generations: list[str] = field(default_factory=list)


def eval_client(
    params,
    examples: Sequence[Example],
    adapters=None,
    pers=None,
    max_new_tokens: int = 0,
    beta: float = 1.0,
    batch_size: int = 8,
    decoder: Callable[[Example], str] | None = None,
) -> ClientEval:
    """Teacher-forced loss and, when ``max_new_tokens > 0`` (or a decoder is given), mean ROUGE-L F."""
    loss = teacher_forced_loss(params, examples, adapters, pers, batch_size)
    if decoder is None and max_new_tokens <= 0:
        return ClientEval(loss, None)
    gens = []
    scores = []
    for ex in examples:
        if decoder is not None:
            text = decoder(ex)
        else:
            prompt = tokenize(render_alpaca_prompt(ex), bos=True, eos=False)
            text = detokenize(greedy_decode(params, prompt, max_new_tokens, adapters, pers))
        gens.append(text)
        scores.append(rouge_l(text, ex.output, beta)[2])
    return ClientEval(loss, math.fsum(scores) / len(scores), gens)
