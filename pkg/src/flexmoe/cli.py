"""Command-line entry point: ``flexmoe {run,prune,eval,inspect-checkpoint}``.

Set ``FLEXMOE_LOG`` (DEBUG, INFO, WARNING, ...) to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

from flexmoe import __version__, checkpoint
from flexmoe.config import ExperimentConfig, load_config
from flexmoe.data import load_jsonl, prepare_data
from flexmoe.errors import CheckpointError, ConfigError, FlexError, NumericError
from flexmoe.evaluation import eval_client, teacher_forced_loss
from flexmoe.federation import METRIC_FIELDS, MODES, Federation

log = logging.getLogger("flexmoe")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _setup_logging() -> None:
    level = os.environ.get("FLEXMOE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _manifest(exp: ExperimentConfig, config_path: Path | None) -> dict:
    inputs = {}
    if config_path is not None:
        inputs[str(config_path)] = git_blob_hash(config_path.read_bytes())
    if exp.data.source != "synth":
        inputs[exp.data.source] = git_blob_hash(Path(exp.data.source).read_bytes())
    canonical = json.dumps({"config": exp.to_dict(), "inputs": inputs}, sort_keys=True).encode()
    return {"version": __version__, "config": exp.to_dict(), "inputs": inputs, "content_hash": git_blob_hash(canonical)}


def _ckpt_path(out: Path, r: int) -> Path:
    return out / "checkpoints" / f"round_{r:04d}.ckpt"


def save_run_checkpoint(fed: Federation, exp: ExperimentConfig, path: Path) -> None:
    fed.round_to_f32()
    header, tensors = fed.state_dict()
    header["experiment"] = exp.to_dict()
    checkpoint.save(path, header, tensors)


def restore_federation(header: dict, tensors: dict) -> tuple[Federation, ExperimentConfig]:
    if "experiment" not in header:
        raise CheckpointError("checkpoint lacks the experiment config echo")
    exp = ExperimentConfig.from_dict(header["experiment"])
    data = prepare_data(exp.data, exp.federation.n_clients, exp.seed)
    fed = Federation(exp.model, exp.federation, data, exp.seed, exp.eval, exp.data.max_len)
    fed.load_state_dict(header, tensors)
    return fed, exp


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


# ---------------------------------------------------------------- subcommands


def _load_exp(args) -> tuple[ExperimentConfig, Path | None]:
    path = Path(args.config) if args.config else None
    if path is None:
        raise ConfigError("--config is required")
    exp = load_config(path)
    if getattr(args, "seed", None) is not None:
        exp.run.seed = args.seed
    if getattr(args, "mode", None) is not None:
        exp.federation.mode = args.mode
    exp.validate()
    return exp, path


def cmd_run(args) -> int:
    out = Path(args.out)
    if args.resume:
        header, tensors = checkpoint.load(args.resume)
        fed, exp = restore_federation(header, tensors)
        cfg_path = Path(args.config) if args.config else None
        log.info("resumed from %s at round %d", args.resume, fed.server.round)
    else:
        exp, cfg_path = _load_exp(args)
        data = prepare_data(exp.data, exp.federation.n_clients, exp.seed)
        fed = Federation(exp.model, exp.federation, data, exp.seed, exp.eval, exp.data.max_len)
        fed.setup()
        if exp.run.checkpoint_every:
            save_run_checkpoint(fed, exp, _ckpt_path(out, 0))
    _write(out / "run-manifest.json", json.dumps(_manifest(exp, cfg_path), indent=1, sort_keys=True))
    every = exp.run.checkpoint_every
    total = exp.federation.rounds

    def on_round(f: Federation, r: int) -> None:
        if (every and r % every == 0) or r == total:
            save_run_checkpoint(f, exp, _ckpt_path(out, r))
        _write(out / "metrics.csv", metrics_csv(f.metrics))
        log.info("round %d done", r)

    try:
        fed.run(on_round=on_round)
    except NumericError as e:
        _write(out / "metrics.csv", metrics_csv(fed.metrics))
        print(f"error: {e}; last good checkpoint kept under {out / 'checkpoints'}", file=sys.stderr)
        return EXIT_RUNTIME
    if total == 0:
        save_run_checkpoint(fed, exp, _ckpt_path(out, 0))
    final = fed.final_eval()
    _write(out / "metrics.csv", metrics_csv(fed.metrics))
    _write(out / "ledger.csv", fed.ledger.to_csv())
    report = {
        "mode": exp.federation.mode,
        "strategy": exp.federation.strategy,
        "seed": exp.seed,
        "rounds": fed.server.round,
        "round0_eval_loss": {str(k): v for k, v in fed.round0.items()},
        "final": {str(k): v for k, v in final.items()},
        "mean_final_eval_loss": _mean(v["eval_loss"] for v in final.values()),
        "ledger": fed.ledger.summary(),
        "prune": {str(c.client_id): c.report.to_dict() for c in fed.clients if c.report is not None},
    }
    _write(out / "report.json", json.dumps(report, indent=1, sort_keys=True))
    print(f"wrote {out}")
    return 0


def cmd_prune(args) -> int:
    exp, _ = _load_exp(args)
    exp.federation.mode = "flex"
    data = prepare_data(exp.data, exp.federation.n_clients, exp.seed)
    fed = Federation(exp.model, exp.federation, data, exp.seed, exp.eval, exp.data.max_len)
    fed.setup(evaluate_round0=False)
    out = Path(args.out)
    reports = {str(c.client_id): c.report.to_dict() for c in fed.clients}
    _write(out / "report.json", json.dumps({"clients": reports}, indent=1, sort_keys=True))
    text = "".join(f"# client {c.client_id}\n{c.report.to_text()}" for c in fed.clients)
    _write(out / "prune.txt", text)
    print(text, end="")
    return 0


def cmd_eval(args) -> int:
    header, tensors = checkpoint.load(args.checkpoint)
    fed, exp = restore_federation(header, tensors)
    fed.install_global()
    extra = load_jsonl(args.data).examples if args.data else None
    res = {"round": fed.server.round, "clients": {}}
    for c in fed.clients:
        evals = extra if extra is not None else c.eval_examples
        row = {}
        if evals:
            ev = eval_client(fed.params, evals, c.adapters, c.pers, exp.eval.max_new_tokens, exp.eval.rouge_beta, exp.eval.batch_size)
            row.update(eval_loss=ev.eval_loss, rouge_l_f1=ev.rouge_l_f1)
        train = c.examples[: exp.eval.max_examples]
        if train:
            row["train_loss"] = teacher_forced_loss(fed.params, train, c.adapters, c.pers, exp.eval.batch_size, exp.data.max_len)
        res["clients"][str(c.client_id)] = row
    res["mean_eval_loss"] = _mean(r.get("eval_loss") for r in res["clients"].values())
    res["mean_train_loss"] = _mean(r.get("train_loss") for r in res["clients"].values())
    out = Path(args.out)
    name = f"eval_round_{fed.server.round:04d}.json" if out.suffix != ".json" else out.name
    target = out / name if out.suffix != ".json" else out
    _write(target, json.dumps(res, indent=1, sort_keys=True))
    print(json.dumps({"round": res["round"], "mean_eval_loss": res["mean_eval_loss"], "mean_train_loss": res["mean_train_loss"]}))
    return 0


def cmd_inspect(args) -> int:
    header, tensors = checkpoint.load(args.checkpoint)
    info = {
        "format_version": checkpoint.VERSION,
        "round": header.get("round"),
        "seed": header.get("seed"),
        "model": header.get("model"),
        "mode": header.get("federation", {}).get("mode"),
        "strategy": header.get("federation", {}).get("strategy"),
        "n_tensors": len(tensors),
        "n_params": int(sum(t.size for t in tensors.values())),
        "clients": [
            {"client_id": c["client_id"], "n": c["n"], "selected": (c["report"] or {}).get("layers") and [x["selected"] for x in c["report"]["layers"]]}
            for c in header.get("clients", [])
        ],
    }
    print(json.dumps(info, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexmoe", description="Federated MoE fine-tuning with personalized side experts.")
    p.add_argument("--version", action="version", version=f"flexmoe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a federated experiment")
    r.add_argument("--config", help="experiment .cfg file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override run.seed")
    r.add_argument("--mode", choices=MODES, help="override federation.mode")
    r.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("prune", help="expert selection only; writes per-layer losses")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="evaluate every client of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="JSONL file to evaluate on instead of the run's held-out sets")
    e.add_argument("--out", required=True, help="output directory or .json file")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FlexError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
