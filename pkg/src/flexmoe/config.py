"""Experiment configuration read from INI-style ``.cfg`` files.

Sections mirror the modules: ``[model]``, ``[federation]``, ``[data]``,
``[eval]`` and ``[run]``. Every key must be a known field; values are coerced
to the field's declared type.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from flexmoe.data import DataConfig
from flexmoe.errors import ConfigError
from flexmoe.evaluation import EvalConfig
from flexmoe.federation import FederationConfig
from flexmoe.model import ModelConfig


@dataclass
class RunConfig:
    seed: int = 0
    checkpoint_every: int = 1  # rounds between checkpoints; 0 keeps only the final one
    name: str = "run"

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("run.seed must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("run.checkpoint_every must be >= 0")


SECTIONS = {
    "model": ModelConfig,
    "federation": FederationConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "run": RunConfig,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def validate(self) -> None:
        self.model.validate()
        self.federation.validate()
        self.data.validate()
        self.eval.validate()
        self.run.validate()
        if self.data.partition == "pathological" and self.data.n_tasks < self.federation.n_clients and self.data.source == "synth":
            raise ConfigError(
                f"data.n_tasks ({self.data.n_tasks}) must be >= federation.n_clients ({self.federation.n_clients}) "
                "for a pathological partition"
            )
        if self.data.max_len is not None and self.data.max_len > self.model.max_seq_len:
            raise ConfigError("data.max_len exceeds model.max_seq_len")

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        parts = {}
        for name, klass in SECTIONS.items():
            vals = dict(d.get(name, {}))
            unknown = sorted(set(vals) - {f.name for f in dataclasses.fields(klass)})
            if unknown:
                raise ConfigError(f"unknown key {name}.{unknown[0]}")
            parts[name] = _build(klass, name, vals)
        exp = cls(**parts)
        exp.validate()
        return exp

    def to_cfg(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                if v is not None:
                    lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(typ: str, raw: str, where: str):
    typ = typ.replace(" ", "")
    optional = typ.endswith("|None")
    base = typ[: -len("|None")] if optional else typ
    text = raw.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base == "str":
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {base}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")  # pragma: no cover


def _build(klass, section: str, values: dict):
    types = {f.name: f.type for f in dataclasses.fields(klass)}
    kwargs = {}
    for k, v in values.items():
        kwargs[k] = _coerce(types[k], v, f"{section}.{k}") if isinstance(v, str) else v
    try:
        return klass(**kwargs)
    except TypeError as e:
        raise ConfigError(f"[{section}]: {e}") from None


def parse_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Parse ``.cfg`` text; a relative ``data.source`` path resolves against ``base_dir``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    raw: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        known = {f.name for f in dataclasses.fields(SECTIONS[sec])}
        for key in cp[sec]:
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
        raw[sec] = dict(cp[sec])
    data = raw.get("data", {})
    src = data.get("source", "synth").strip()
    if src != "synth" and base_dir is not None and not Path(src).is_absolute():
        data["source"] = str(Path(base_dir) / src)
    return ExperimentConfig.from_dict(raw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, path.parent)


def bundled_config(name: str = "smoke") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.cfg"
