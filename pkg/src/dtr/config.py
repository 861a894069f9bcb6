"""Pipeline configuration: JSON files, environment overrides, derived seeds.

A run is fully described by one PipelineConfig. All randomness anywhere in
the pipeline flows from the single global seed through derive_seed, so the
config hash plus the seed pins every artifact byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .corpus import DEFAULT_STYLES
from .rl import RlConfig
from .seq2seq import ModelConfig, TrainHyper

ENV_PREFIX = "DTR_"


class ConfigError(Exception):
    """Configuration is malformed, references missing files, or out of range."""


@dataclass
class ModelSection:
    """Architecture knobs for one model role (vocab size comes from data)."""

    hidden: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 256
    dropout: float = 0.1
    max_len: int = 64

    def build(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            hidden=self.hidden,
            layers=self.layers,
            heads=self.heads,
            ff=self.ff,
            dropout=self.dropout,
            max_len=self.max_len,
        )


@dataclass
class TrainSection:
    """Optimization knobs for one training stage (seed comes from the run)."""

    lr: float = 5e-4
    token_batch: int = 4096
    max_epochs: int = 30
    patience: int = 3
    clip: float = 1.0
    val_fraction: float = 0.1

    def build(self, seed: int) -> TrainHyper:
        return TrainHyper(
            lr=self.lr,
            token_batch=self.token_batch,
            max_epochs=self.max_epochs,
            patience=self.patience,
            clip=self.clip,
            seed=seed,
            val_fraction=self.val_fraction,
        )


@dataclass
class StageSection:
    """Model plus training knobs for one pipeline role."""

    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)


@dataclass
class RlSection:
    """Policy-training knobs (mirrors RlConfig plus the validation slice)."""

    steps: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    entropy_bonus: float = 0.01
    eval_every: int = 10
    sim_weight: float = 1.0
    cls_weight: float = 1.0
    val_fraction: float = 0.1
    max_examples: int = 128

    def build(self, generation_beam: int) -> RlConfig:
        return RlConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            entropy_bonus=self.entropy_bonus,
            eval_every=self.eval_every,
            sim_weight=self.sim_weight,
            cls_weight=self.cls_weight,
            generation_beam=generation_beam,
        )


@dataclass
class CorpusSection:
    """Where corpora come from: files, or the synthetic generator when unset."""

    dialogue_path: str | None = None
    style_paths: dict[str, str] = field(default_factory=dict)
    select_top1: bool = False
    min_count: int = 1
    n_dialogues: int = 360
    n_style: int = 400

    @property
    def synthetic(self) -> bool:
        return self.dialogue_path is None


@dataclass
class PipelineConfig:
    """Everything one pipeline run needs."""

    seed: int = 0
    run_dir: str = "runs/default"
    styles: list[str] = field(default_factory=lambda: list(DEFAULT_STYLES))
    pr: float = 25.0
    z: int = 10
    mu: float = 0.2
    beam: int = 5
    classifier_min_accuracy: float = 0.8
    embeddings_path: str | None = None
    corpus: CorpusSection = field(default_factory=CorpusSection)
    generator: StageSection = field(default_factory=StageSection)
    dae: StageSection = field(default_factory=StageSection)
    disentangler: StageSection = field(default_factory=StageSection)
    grounded: ModelSection = field(default_factory=lambda: ModelSection(max_len=128))
    rewriter: StageSection = field(default_factory=StageSection)
    classifier: StageSection = field(default_factory=StageSection)
    rl: RlSection = field(default_factory=RlSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if not 0.0 < self.pr < 100.0:
            raise ConfigError(f"pr must be in (0, 100), got {self.pr}")
        if self.z < 1:
            raise ConfigError(f"z must be >= 1, got {self.z}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.beam < 1:
            raise ConfigError(f"beam must be >= 1, got {self.beam}")
        if not self.styles:
            raise ConfigError("styles must be non-empty")
        if len(set(self.styles)) != len(self.styles):
            raise ConfigError("styles contains duplicates")
        for key, path in self._input_paths():
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{key}: file not found: {path}")
        if not self.corpus.synthetic:
            missing = [s for s in self.styles if s not in self.corpus.style_paths]
            if missing:
                raise ConfigError(f"corpus.style_paths missing styles: {missing}")

    def _input_paths(self) -> list[tuple[str, str | None]]:
        pairs: list[tuple[str, str | None]] = [
            ("corpus.dialogue_path", self.corpus.dialogue_path),
            ("embeddings_path", self.embeddings_path),
        ]
        pairs.extend(
            (f"corpus.style_paths.{style}", path)
            for style, path in sorted(self.corpus.style_paths.items())
        )
        return pairs


_SECTION_TYPES = {
    "corpus": CorpusSection,
    "generator": StageSection,
    "dae": StageSection,
    "disentangler": StageSection,
    "rewriter": StageSection,
    "classifier": StageSection,
    "grounded": ModelSection,
    "rl": RlSection,
    "model": ModelSection,
    "train": TrainSection,
}


def _build_dataclass(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get(name)
        if sub is not None and name != "style_paths":
            kwargs[name] = _build_dataclass(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from err


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    cfg = _build_dataclass(PipelineConfig, data, "config")
    cfg.validate()
    return cfg


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(data: dict, env: Mapping[str, str] | None = None) -> dict:
    """Overlay DTR_-prefixed environment variables onto a config dict.

    Double underscores nest: DTR_RL__STEPS=50 sets rl.steps. Values parse
    as JSON literals, falling back to the raw string.
    """
    env = os.environ if env is None else env
    out = json.loads(json.dumps(data))
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX) :].split("__")]
        if not all(path):
            raise ConfigError(f"{name}: empty key segment")
        node = out
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{name}: {part} is not a section")
            node = nxt
        node[path[-1]] = _parse_env_value(env[name])
    return out


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> PipelineConfig:
    """Load a config file, then env overrides, then explicit overrides.

    Args:
        path: JSON config file; None starts from defaults.
        env: environment mapping (defaults to os.environ).
        overrides: top-level key/value pairs applied last (CLI flags).
    """
    if path is None:
        data: dict = {}
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: malformed JSON ({err.msg}, line {err.lineno})") from err
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = apply_env_overrides(data, env)
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                data[key] = value
    return config_from_dict(data)


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the full config (canonical JSON, sorted keys)."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def derive_seed(global_seed: int, *names: str) -> int:
    """Derive a named per-stage seed from the global seed.

    Seeds are independent across names and stable across runs and platforms.
    """
    tag = ":".join((str(global_seed), *names))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31)
