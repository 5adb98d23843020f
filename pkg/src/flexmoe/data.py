"""Byte tokenizer, Alpaca prompt rendering, corpora and non-IID partitioners."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from flexmoe.errors import ConfigError, DecodeError, EmptyCorpusError, InputError
from flexmoe.rng import stream

log = logging.getLogger(__name__)

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
IGNORE_INDEX = -100

ALPACA_HEADER = (
    "Below is an instruction that describes a task. "
    "Write a response that appropriately completes the request."
)
ALPACA_TEMPLATE = ALPACA_HEADER + "\n\n### Instruction:\n{} \n\n### Response: \n{}"


def tokenize(text: str | bytes, bos: bool = True, eos: bool = True) -> list[int]:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = list(raw)
    if bos:
        ids.insert(0, BOS)
    if eos:
        ids.append(EOS)
    return ids


def detokenize(ids: Iterable[int]) -> str:
    """Drop specials and decode the bytes (invalid UTF-8 is replaced, not raised)."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= VOCAB_SIZE:
            raise DecodeError(f"token id {i} outside [0, {VOCAB_SIZE})")
        if i < 256:
            out.append(i)
    return out.decode("utf-8", errors="replace")


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= VOCAB_SIZE:
            raise DecodeError(f"token id {i} outside [0, {VOCAB_SIZE})")
        if i < 256:
            out.append(i)
    return bytes(out)


@dataclass(frozen=True)
class Example:
    instruction: str
    output: str
    input: str = ""
    task_label: int = 0
    category: str = ""

    def __post_init__(self):
        if not self.output:
            raise InputError("example output must be non-empty")


@dataclass
class Corpus:
    examples: list[Example] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)  # task_label -> category name
    rejected_lines: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.examples[i] for i in indices], list(self.labels))

    def label_array(self) -> np.ndarray:
        return np.array([e.task_label for e in self.examples], dtype=np.int64)


def render_alpaca_prompt(example: Example) -> str:
    """Prompt part of the template, ending right where the response starts.

    ``input`` has no slot of its own in this template; when present it is
    appended to the instruction on a new line.
    """
    instruction = example.instruction
    if example.input:
        instruction = f"{instruction}\n{example.input}"
    return ALPACA_TEMPLATE.format(instruction, "")


def render_alpaca(example: Example) -> str:
    return render_alpaca_prompt(example) + example.output


@dataclass
class EncodedExample:
    input_ids: np.ndarray  # [T]
    labels: np.ndarray  # [T], IGNORE_INDEX outside the response
    prompt_len: int
    response_len: int


def encode_example(example: Example, max_len: int | None = None) -> EncodedExample:
    """BOS + prompt + response + EOS, shifted for next-token prediction.

    Only response bytes and the closing EOS are scored. Over-long prompts are
    truncated from the left so the response always survives.
    """
    prompt = tokenize(render_alpaca_prompt(example), bos=True, eos=False)
    response = tokenize(example.output, bos=False, eos=True)
    if max_len is not None and len(prompt) + len(response) - 1 > max_len:
        keep = max_len + 1 - len(response)
        if keep < 1:
            raise InputError(f"response of {len(response)} tokens does not fit max_len={max_len}")
        prompt = prompt[len(prompt) - keep :]
    ids = np.array(prompt + response, dtype=np.int64)
    labels = ids.copy()
    labels[: len(prompt)] = IGNORE_INDEX
    return EncodedExample(ids[:-1], labels[1:], len(prompt), len(response))


def loss_mask(example: Example) -> np.ndarray:
    enc = encode_example(example)
    return enc.labels != IGNORE_INDEX


@dataclass
class Batch:
    input_ids: np.ndarray  # [B, T] right-padded with PAD
    labels: np.ndarray  # [B, T]
    lengths: np.ndarray  # [B]

    @property
    def n_targets(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())

    def target_positions(self) -> np.ndarray:
        return np.flatnonzero(self.labels.reshape(-1) != IGNORE_INDEX)


def collate(examples: Sequence[Example], max_len: int | None = None) -> Batch:
    encs = [encode_example(e, max_len) for e in examples]
    T = max(len(e.input_ids) for e in encs)
    ids = np.full((len(encs), T), PAD, dtype=np.int64)
    labels = np.full((len(encs), T), IGNORE_INDEX, dtype=np.int64)
    for i, e in enumerate(encs):
        ids[i, : len(e.input_ids)] = e.input_ids
        labels[i, : len(e.labels)] = e.labels
    return Batch(ids, labels, np.array([len(e.input_ids) for e in encs]))


# ---------------------------------------------------------------- JSONL


def load_jsonl(path: str | Path) -> Corpus:
    """Read instruction/input/output(/category) records; bad lines are logged and skipped."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise OSError(f"cannot read corpus {path}: {e}") from e
    examples: list[Example] = []
    categories: dict[str, int] = {}
    rejected: list[int] = []
    raw = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("not an object")
            instr = rec.get("instruction")
            out = rec.get("output")
            if not isinstance(instr, str) or not isinstance(out, str) or not out:
                raise ValueError("missing instruction/output")
            inp = rec.get("input") or ""
            cat = str(rec.get("category", ""))
            if not isinstance(inp, str):
                raise ValueError("input must be a string")
        except ValueError as e:
            rejected.append(lineno)
            log.warning("%s:%d rejected (%s)", path, lineno, e)
            continue
        raw.append((instr, inp, out, cat))
    for *_, cat in raw:
        categories.setdefault(cat, 0)
    names = sorted(categories)
    index = {c: i for i, c in enumerate(names)}
    for instr, inp, out, cat in raw:
        examples.append(Example(instr, out, inp, index[cat], cat))
    if not examples:
        raise EmptyCorpusError(f"{path}: no valid records ({len(rejected)} rejected)")
    return Corpus(examples, names, rejected)


def save_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in corpus.examples:
            cat = e.category or (corpus.labels[e.task_label] if corpus.labels else str(e.task_label))
            rec = {"instruction": e.instruction, "input": e.input, "output": e.output, "category": cat}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- synthetic tasks

SYNTH_TASKS = ("copy", "reverse", "uppercase", "count")
SHARED_ALPHABET = "abcdef"
_ALPHABETS = {
    # disjoint letter pools give each task its own surface statistics
    "copy": "abcdef",
    "reverse": "ghijkl",
    "uppercase": "mnopqr",
    "count": "stuvw",
}


def _instruction(task: str, letters: str) -> str:
    return {
        "copy": "Repeat the word.",
        "reverse": "Reverse the word.",
        "uppercase": "Uppercase the word.",
        "count": f"Count the {letters[0]} letters.",
    }[task]


def _synth_output(task: str, word: str, letters: str) -> str:
    if task == "copy":
        return word
    if task == "reverse":
        return word[::-1]
    if task == "uppercase":
        return word.upper()
    if task == "count":
        return str(word.count(letters[0]))
    raise ConfigError(f"unknown synthetic task {task!r}")


def synth_tasks(
    n_tasks: int, per_task: int, seed: int, min_len: int = 4, max_len: int = 4, shared_alphabet: bool = False
) -> Corpus:
    """Deterministic instruction tasks (copy / reverse / uppercase / count, cycling).

    A fixed word length keeps the prompt-to-response offset constant, which a
    two-layer toy model can pick up from absolute positions alone. With
    ``shared_alphabet`` every task draws words from the same letters, so only
    the instruction tells the tasks apart.
    """
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    examples = []
    labels = []
    for t in range(n_tasks):
        task = SYNTH_TASKS[t % len(SYNTH_TASKS)]
        name = task if t < len(SYNTH_TASKS) else f"{task}{t // len(SYNTH_TASKS)}"
        labels.append(name)
        rng = stream(seed, "data", f"synth/{t}")
        pool = SHARED_ALPHABET if shared_alphabet else _ALPHABETS[task]
        letters = np.array(list(pool))
        for _ in range(per_task):
            n = int(rng.integers(min_len, max_len + 1))
            word = "".join(rng.choice(letters, size=n))
            examples.append(Example(_instruction(task, pool), _synth_output(task, word, pool), word, t, name))
    return Corpus(examples, labels)


# ---------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "pathological"
    n_clients: int = 4
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("pathological", "dirichlet", "iid"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.n_clients < 1:
            raise ConfigError("partition needs at least one client")
        if not self.alpha > 0:
            raise ConfigError("dirichlet alpha must be > 0")


def partition_pathological(corpus: Corpus, n_clients: int) -> list[list[int]]:
    """Client i gets every example of label i; extra labels are dealt round-robin."""
    labels = sorted(set(corpus.label_array().tolist()))
    if len(labels) < n_clients:
        raise ConfigError(f"{len(labels)} task labels cannot cover {n_clients} clients pathologically")
    owner = {lab: i % n_clients for i, lab in enumerate(labels)}
    parts: list[list[int]] = [[] for _ in range(n_clients)]
    for idx, e in enumerate(corpus.examples):
        parts[owner[e.task_label]].append(idx)
    return parts


def partition_dirichlet(corpus: Corpus, n_clients: int, alpha: float, seed: int) -> list[list[int]]:
    """Per label, split its examples by proportions drawn from Dir(alpha * 1_K)."""
    if not alpha > 0:
        raise ConfigError("dirichlet alpha must be > 0")
    if len(corpus) < n_clients:
        raise ConfigError(f"corpus of {len(corpus)} examples cannot fill {n_clients} clients")
    y = corpus.label_array()
    parts: list[list[int]] = [[] for _ in range(n_clients)]
    for lab in sorted(set(y.tolist())):
        rng = stream(seed, "data", f"dirichlet/{n_clients}/{alpha!r}/{lab}")
        idx = np.flatnonzero(y == lab)
        rng.shuffle(idx)
        g = rng.gamma(alpha, 1.0, size=n_clients)
        total = g.sum()
        p = g / total if total > 0 else np.full(n_clients, 1.0 / n_clients)
        cuts = (np.cumsum(p) * len(idx)).astype(int)[:-1]
        for c, chunk in enumerate(np.split(idx, cuts)):
            parts[c].extend(chunk.tolist())
    for c in range(n_clients):
        if not parts[c]:
            donor = max(range(n_clients), key=lambda k: (len(parts[k]), -k))
            parts[c].append(parts[donor].pop())
    return [sorted(p) for p in parts]


def partition_iid(corpus: Corpus, n_clients: int, seed: int) -> list[list[int]]:
    if len(corpus) < n_clients:
        raise ConfigError(f"corpus of {len(corpus)} examples cannot fill {n_clients} clients")
    perm = stream(seed, "data", f"iid/{n_clients}").permutation(len(corpus))
    return [sorted(chunk.tolist()) for chunk in np.array_split(perm, n_clients)]


def partition(corpus: Corpus, spec: PartitionSpec) -> list[list[int]]:
    if spec.mode == "pathological":
        return partition_pathological(corpus, spec.n_clients)
    if spec.mode == "dirichlet":
        return partition_dirichlet(corpus, spec.n_clients, spec.alpha, spec.seed)
    return partition_iid(corpus, spec.n_clients, spec.seed)


def label_distribution(corpus: Corpus, part: Sequence[int], n_labels: int | None = None) -> np.ndarray:
    y = corpus.label_array()[np.asarray(part, dtype=np.int64)]
    n = n_labels if n_labels is not None else len(corpus.labels) or int(corpus.label_array().max()) + 1
    counts = np.bincount(y, minlength=n).astype(float)
    return counts / max(counts.sum(), 1.0)


def match_tasks_to_clients(corpus: Corpus, parts: Sequence[Sequence[int]]) -> dict[int, int]:
    """For each task label, the client holding the largest share of that label's examples."""
    y = corpus.label_array()
    out = {}
    for lab in sorted(set(y.tolist())):
        counts = [int((y[np.asarray(p, dtype=np.int64)] == lab).sum()) if len(p) else 0 for p in parts]
        out[lab] = int(np.argmax(counts))
    return out


def partition_manifest(parts: Sequence[Sequence[int]]) -> str:
    return json.dumps({str(c): list(map(int, p)) for c, p in enumerate(parts)}, indent=1)


# ---------------------------------------------------------------- experiment data


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or a JSONL path
    n_tasks: int = 4
    per_task: int = 32
    eval_per_task: int = 8
    word_len: int = 4
    shared_alphabet: bool = False
    pretrain_tasks: int = 0  # backbone corpus covers the first k synthetic tasks; 0 means all
    eval_fraction: float = 0.2  # held-out share per label for JSONL sources
    partition: str = "pathological"
    alpha: float = 1.0
    max_len: int | None = None

    def validate(self) -> None:
        if self.source != "synth" and not Path(self.source).is_file():
            raise ConfigError(f"data.source: file not found: {self.source}")
        if self.n_tasks < 1 or self.per_task < 1 or self.eval_per_task < 1:
            raise ConfigError("data.n_tasks, data.per_task and data.eval_per_task must be >= 1")
        if not 0 <= self.pretrain_tasks <= self.n_tasks:
            raise ConfigError("data.pretrain_tasks must lie in [0, data.n_tasks]")
        if self.word_len < 1:
            raise ConfigError("data.word_len must be >= 1")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("data.eval_fraction must lie in (0, 1)")
        PartitionSpec(self.partition, 1, self.alpha, 0)


@dataclass
class ClientData:
    train: Corpus
    parts: list[list[int]]
    evals: list[list[Example]]  # per client
    test: Corpus
    pretrain: Corpus | None = None  # backbone pretraining data, disjoint from client data


def _holdout_split(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    y = corpus.label_array()
    test_idx: list[int] = []
    for lab in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == lab)
        stream(seed, "data", f"holdout/{lab}").shuffle(idx)
        k = max(1, int(round(fraction * len(idx)))) if len(idx) > 1 else 0
        test_idx.extend(idx[:k].tolist())
    held = set(test_idx)
    train = [i for i in range(len(corpus)) if i not in held]
    return corpus.subset(train), corpus.subset(sorted(test_idx))


def client_eval_sets(train: Corpus, parts: Sequence[Sequence[int]], test: Corpus) -> list[list[Example]]:
    """Each evaluation task goes to the client holding most of it; clients left
    without a task are evaluated on their own majority label."""
    owner = match_tasks_to_clients(train, parts)
    n_labels = max(len(train.labels), int(train.label_array().max()) + 1)
    out = []
    for c, p in enumerate(parts):
        labs = {lab for lab, o in owner.items() if o == c}
        if not labs:
            labs = {int(np.argmax(label_distribution(train, p, n_labels)))}
        out.append([e for e in test.examples if e.task_label in labs])
    return out


def prepare_data(cfg: DataConfig, n_clients: int, seed: int) -> ClientData:
    if cfg.source == "synth":
        train = synth_tasks(cfg.n_tasks, cfg.per_task, seed, cfg.word_len, cfg.word_len, cfg.shared_alphabet)
        test = synth_tasks(cfg.n_tasks, cfg.eval_per_task, seed + 1, cfg.word_len, cfg.word_len, cfg.shared_alphabet)
        k = cfg.pretrain_tasks or cfg.n_tasks
        pre = synth_tasks(k, cfg.per_task * cfg.n_tasks // k, seed + 2, cfg.word_len, cfg.word_len, cfg.shared_alphabet)
    else:
        train, test = _holdout_split(load_jsonl(cfg.source), cfg.eval_fraction, seed)
        pre = train
    parts = partition(train, PartitionSpec(cfg.partition, n_clients, cfg.alpha, seed))
    return ClientData(train, parts, client_eval_sets(train, parts, test), test, pre)
