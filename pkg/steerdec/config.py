import dataclasses
import enum
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import check_disjoint
from .errors import ConfigError
from .models import (
    CorpusSpec,
    EngineConfig,
    ExperimentSpec,
    ModelConfig,
    Split,
    SyntheticSpec,
    TrainingConfig,
    to_dict,
)

SCHEMA_VERSION = 1


def _default_corpora() -> dict[str, CorpusSpec]:
    return {
        "train": CorpusSpec(split=Split.TRAIN, seed=0),
        "held_out": CorpusSpec(split=Split.HELD_OUT, seed=0, n_sequences=64),
        "ood": CorpusSpec(kind="pcfg", split=Split.OOD, seed=1, n_sequences=64),
    }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    hardware_tag: str = ""
    verifier: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=4, d_model=128, d_mlp=512, tap_layers=(1, 2, 3)))
    drafter: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=2, d_model=64, d_mlp=256))
    corpora: dict[str, CorpusSpec] = field(default_factory=_default_corpora)
    pretrain: TrainingConfig = field(default_factory=lambda: TrainingConfig(warmup_steps=100, epochs=2, lr_peak=3e-3))
    align: TrainingConfig = field(default_factory=TrainingConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    engine: EngineConfig = field(default_factory=EngineConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)

    @property
    def root(self) -> Path:
        return Path(self.out_dir)

    def checkpoint_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.sd2c"

    @property
    def trace_dir(self) -> Path:
        return self.root / "traces"

    @property
    def report_dir(self) -> Path:
        return self.root / "reports"

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": SCHEMA_VERSION, **to_dict(self)}

    def training(self, section: TrainingConfig) -> TrainingConfig:
        """A training section with its seed offset by the run seed."""
        return dataclasses.replace(section, seed=section.seed + self.seed)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        payload = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(value, option, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: {value!r} does not match {hint}")
    if origin is tuple:
        if not isinstance(value, list | tuple):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(args, value)))
    if origin is dict or hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return value
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError as e:
            choices = ", ".join(str(m.value) for m in hint)
            raise ConfigError(f"{path}: {value!r} is not one of {choices}") from e
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {_type_name(hint)}")


def _build(cls: type, data: Any, path: str, **fixed: Any) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {path}.{unknown[0]}")
    kwargs = {**fixed, **{key: _coerce(value, hints[key], f"{path}.{key}") for key, value in data.items()}}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


_SECTIONS: dict[str, type] = {
    "verifier": ModelConfig,
    "drafter": ModelConfig,
    "pretrain": TrainingConfig,
    "align": TrainingConfig,
    "synthetic": SyntheticSpec,
    "engine": EngineConfig,
    "experiment": ExperimentSpec,
}


def parse_config(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")

    kwargs: dict[str, Any] = {}
    for key in ("seed", "out_dir", "hardware_tag"):
        if key in data:
            kwargs[key] = _coerce(data[key], typing.get_type_hints(RunConfig)[key], key)
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs[key] = _build(cls, data[key], key)
    if "corpora" in data:
        corpora = data["corpora"]
        if not isinstance(corpora, dict):
            raise ConfigError("corpora: expected an object")
        extra = sorted(set(corpora) - {s.value for s in Split})
        if extra:
            raise ConfigError(f"unknown key corpora.{extra[0]}")
        merged = _default_corpora()
        for name, spec in corpora.items():
            fixed = {"split": Split(name)} if isinstance(spec, dict) and "split" not in spec else {}
            merged[name] = _build(CorpusSpec, spec, f"corpora.{name}", **fixed)
        kwargs["corpora"] = merged
    config = RunConfig(**kwargs)
    validate(config)
    return config


def validate(config: RunConfig) -> None:
    if config.verifier.vocab_size != config.drafter.vocab_size:
        raise ConfigError(
            f"verifier and drafter vocabularies differ: {config.verifier.vocab_size} != {config.drafter.vocab_size}"
        )
    config.verifier.resolved_taps()
    for name, spec in config.corpora.items():
        if spec.vocab_size > config.verifier.vocab_size:
            raise ConfigError(f"corpora.{name}.vocab_size exceeds the model vocabulary")
    check_disjoint(config.corpora["train"], config.corpora["ood"])


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(data)


def with_overrides(config: RunConfig, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if out_dir is not None:
        changes["out_dir"] = out_dir
    return dataclasses.replace(config, **changes) if changes else config
