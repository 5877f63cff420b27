"""Pipeline configuration: a strict, fully validated config document.

Unknown keys are rejected so a typo cannot silently change a multi-week
run.  Credentials never live in the config, only the name of the
environment variable that holds them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import DEFAULT_BUDGETS


class ConfigError(Exception):
    pass


def _check_keys(payload: dict, cls, context: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys under {context}: {sorted(unknown)}")


@dataclass
class CorpusConfig:
    mumps_dir: str | None = None
    alc_dir: str | None = None
    human_partitions_dir: str | None = None

    @classmethod
    def from_dict(cls, payload: dict) -> "CorpusConfig":
        _check_keys(payload, cls, "corpus")
        return cls(**payload)


@dataclass
class TokenizerConfig:
    name: str = "quarter-char"
    vocab_path: str | None = None

    @classmethod
    def from_dict(cls, payload: dict) -> "TokenizerConfig":
        _check_keys(payload, cls, "tokenizer")
        config = cls(**payload)
        if config.name not in ("quarter-char", "external-vocab"):
            raise ConfigError(f"unknown tokenizer {config.name!r}")
        if config.name == "external-vocab" and not config.vocab_path:
            raise ConfigError("external-vocab tokenizer needs vocab_path")
        return config


@dataclass
class ProviderConfig:
    kind: str = "mock"
    base_url: str | None = None
    api_key_env: str = "CHUNKDOC_API_KEY"
    rate_limit_per_s: float | None = None
    max_attempts: int = 4
    max_in_flight: int = 8
    timeout_s: float = 120.0
    cache_dir: str = "cache"

    @classmethod
    def from_dict(cls, payload: dict) -> "ProviderConfig":
        _check_keys(payload, cls, "provider")
        config = cls(**payload)
        if config.kind not in ("mock", "openai"):
            raise ConfigError(f"provider kind must be mock or openai, got {config.kind!r}")
        if config.kind == "openai" and not config.base_url:
            raise ConfigError("openai provider needs base_url")
        if config.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        return config


@dataclass
class ModelsConfig:
    partitioner: str = "mock-partitioner"
    generators: list[str] = field(default_factory=lambda: ["mock-generator"])
    judges: list[str] = field(default_factory=lambda: ["mock-judge"])

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelsConfig":
        _check_keys(payload, cls, "models")
        config = cls(**payload)
        if not config.generators or not config.judges:
            raise ConfigError("need at least one generator and one judge model")
        return config


@dataclass
class TemperatureConfig:
    partition: float = 0.2
    docgen: float = 0.2
    judge: float = 0.7

    @classmethod
    def from_dict(cls, payload: dict) -> "TemperatureConfig":
        _check_keys(payload, cls, "temperatures")
        config = cls(**payload)
        for name in ("partition", "docgen", "judge"):
            if getattr(config, name) < 0:
                raise ConfigError(f"temperature {name} must be >= 0")
        return config


@dataclass
class MockConfig:
    judge_seed: int = 1234

    @classmethod
    def from_dict(cls, payload: dict) -> "MockConfig":
        _check_keys(payload, cls, "mock")
        return cls(**payload)


@dataclass
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    temperatures: TemperatureConfig = field(default_factory=TemperatureConfig)
    mock: MockConfig = field(default_factory=MockConfig)
    runs_dir: str = "runs"
    budgets: list[int] = field(default_factory=lambda: list(DEFAULT_BUDGETS))
    coverage: int = 10
    window_size: int = 5
    max_requery_rounds: int = 3
    max_judge_context_tokens: int | None = None
    seed: int = 7
    workers: int = 1

    _NESTED = {
        "corpus": CorpusConfig,
        "tokenizer": TokenizerConfig,
        "provider": ProviderConfig,
        "models": ModelsConfig,
        "temperatures": TemperatureConfig,
        "mock": MockConfig,
    }

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        _check_keys(payload, cls, "top level")
        kwargs = {}
        for key, value in payload.items():
            nested = cls._NESTED.get(key)
            kwargs[key] = nested.from_dict(value) if nested else value
        config = cls(**kwargs)
        config.validate()
        return config

    def validate(self) -> None:
        if not self.budgets or any(
            not isinstance(b, int) or b <= 0 for b in self.budgets
        ):
            raise ConfigError(f"budgets must be positive integers, got {self.budgets}")
        if sorted(set(self.budgets)) != sorted(self.budgets):
            raise ConfigError("budgets must be distinct")
        if self.coverage < 1:
            raise ConfigError("coverage must be >= 1")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.max_requery_rounds < 0:
            raise ConfigError("max_requery_rounds must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def as_dict(self) -> dict:
        payload = asdict(self)
        return payload

    def canonical_digest(self) -> str:
        import hashlib

        blob = json.dumps(self.as_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        payload = yaml.safe_load(text) or {}
    elif path.suffix == ".json":
        payload = json.loads(text)
    else:
        raise ConfigError(f"config must be .yaml, .yml, or .json, got {path.suffix}")
    if not isinstance(payload, dict):
        raise ConfigError("config document must be a mapping")
    config = PipelineConfig.from_dict(payload)
    # Paths in the config resolve relative to the config file's directory.
    base = path.parent
    for attr in ("mumps_dir", "alc_dir", "human_partitions_dir"):
        value = getattr(config.corpus, attr)
        if value is not None:
            setattr(config.corpus, attr, str((base / value).resolve()))
    config.runs_dir = str((base / config.runs_dir).resolve())
    if config.tokenizer.vocab_path:
        config.tokenizer.vocab_path = str((base / config.tokenizer.vocab_path).resolve())
    return config
