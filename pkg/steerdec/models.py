import dataclasses
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any, TypedDict

from .errors import ConfigError


class Role(StrEnum):
    VERIFIER = "verifier"
    DRAFTER = "drafter"


class SteeringVariant(StrEnum):
    BIAS_IN_MLP = "bias_in_mlp"  # SD² proper: bias on the up-projection
    BIAS_AFTER_MLP = "bias_after_mlp"
    COND_BIAS_IN_MLP = "cond_bias_in_mlp"


class OffsetMode(StrEnum):
    PER_SEQUENCE_RANDOM = "per_sequence_random"
    BLOCKED = "blocked"


class DecodeMode(StrEnum):
    PRETRAINED = "pretrained"
    DISTILLED = "distilled"
    SD2 = "sd2"


class FinalSource(StrEnum):
    REJECTION_RESAMPLE = "rejection-resample"
    BONUS = "bonus"


class CorpusKind(StrEnum):
    MARKOV = "markov"
    PCFG = "pcfg"
    BYTES = "bytes"


class Split(StrEnum):
    TRAIN = "train"
    HELD_OUT = "held_out"
    OOD = "ood"


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return to_dict(value)
    if isinstance(value, StrEnum):
        return str(value)
    if isinstance(value, tuple | list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def to_dict(obj: Any) -> dict[str, Any]:
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    vocab_size: int = 64
    max_seq_len: int = 256
    tap_layers: tuple[int, int, int] | None = None  # (low, mid, high)
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_mlp", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary embeddings")
        if self.tap_layers is not None:
            object.__setattr__(self, "tap_layers", tuple(int(i) for i in self.tap_layers))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def resolved_taps(self) -> tuple[int, int, int]:
        L = self.n_layers
        if self.tap_layers is None:
            if L < 5:
                raise ConfigError(f"tap_layers must be given explicitly for n_layers={L} < 5")
            taps = (3, L // 2, L - 2)
        else:
            taps = self.tap_layers
        if len(taps) != 3 or any(not 0 <= t < L for t in taps):
            raise ConfigError(f"tap_layers {taps} must be three indices in [0, {L - 1}]")
        if L >= 5 and len(set(taps)) != 3:
            raise ConfigError(f"tap_layers {taps} must be distinct for n_layers={L}")
        return (taps[0], taps[1], taps[2])


@dataclass(frozen=True)
class EngineConfig:
    k: int = 8
    temperature: float = 1.0
    max_new_tokens: int = 128
    seed: int = 0
    steering_enabled: bool = True
    mode: DecodeMode = DecodeMode.PRETRAINED
    eos_token_id: int | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        object.__setattr__(self, "mode", DecodeMode(self.mode))


@dataclass(frozen=True)
class TrainingConfig:
    lr_peak: float = 5e-4
    warmup_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 0.5
    epochs: int = 6
    batch_size: int = 8
    seq_len: int = 64
    k: int = 8
    offset_mode: OffsetMode = OffsetMode.PER_SEQUENCE_RANDOM
    variant: SteeringVariant = SteeringVariant.BIAS_IN_MLP
    freeze_drafter: bool = False
    seed: int = 0
    log_every: int = 10
    eval_every: int = 0
    eval_prompts: int = 8
    eval_max_new_tokens: int = 32

    def __post_init__(self) -> None:
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.grad_clip_norm <= 0:
            raise ConfigError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("k and batch_size must be positive and epochs non-negative")
        object.__setattr__(self, "betas", (float(self.betas[0]), float(self.betas[1])))
        object.__setattr__(self, "offset_mode", OffsetMode(self.offset_mode))
        object.__setattr__(self, "variant", SteeringVariant(self.variant))

    @property
    def lr_floor(self) -> float:
        return self.lr_peak / 10


@dataclass(frozen=True)
class CorpusSpec:
    kind: CorpusKind = CorpusKind.MARKOV
    vocab_size: int = 64
    split: Split = Split.TRAIN
    seed: int = 0
    n_sequences: int = 256
    seq_len: int = 64
    order: int = 1
    concentration: float = 0.1
    rules: dict[str, list[list[str]]] | None = None
    path: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CorpusKind(self.kind))
        object.__setattr__(self, "split", Split(self.split))
        if self.kind is CorpusKind.BYTES and not self.path:
            raise ConfigError("bytes corpora need a path")
        if self.order < 1:
            raise ConfigError(f"markov order must be >= 1, got {self.order}")

    def generator_key(self) -> tuple[Any, ...]:
        return (str(self.kind), self.seed, self.order, self.concentration, self.rules, self.path)


@dataclass(frozen=True)
class SyntheticSpec:
    n_sequences: int = 256
    max_len: int = 64
    prompt_len: int = 4
    temperature: float = 1.0


@dataclass(frozen=True)
class ExperimentSpec:
    modes: tuple[str, ...] = ("pretrained", "distilled", "sd2")
    temperatures: tuple[float, ...] = (0.0, 1.0)
    corpora: tuple[str, ...] = ("held_out", "ood")
    seeds: tuple[int, ...] = (0, 1, 2)
    n_prompts: int = 16
    prompt_len: int = 8
    throughput: bool = True
    significance_unit: str = "seed"
    baseline: str = "pretrained"

    def __post_init__(self) -> None:
        for name in ("modes", "temperatures", "corpora", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.significance_unit not in ("seed", "block"):
            raise ConfigError(f"significance_unit must be 'seed' or 'block', got {self.significance_unit!r}")


def report_key(mode: str, corpus: str, temperature: float) -> str:
    return f"{mode}/{corpus}/T{temperature:g}"


class BlockRecord(TypedDict):
    block_index: int
    position: int
    accepted: int
    emitted: int
    drafted: int
    mode: str
    seed: int
    prompt_index: int
    corpus: str
    temperature: float


@dataclass(frozen=True)
class SignificanceResult:
    t_statistic: float
    p_value: float | None
    dof: float
    degenerate: bool = False
    alternative: str = "two-sided"


@dataclass
class RunReport:
    mode: str
    corpus: str
    temperature: float
    k: int
    seeds: list[int]
    accepted_counts: list[int]
    tau: float
    per_seed_tau: dict[int, float] = field(default_factory=dict)
    tokens_emitted: int = 0
    tokens_computed: int = 0
    max_new_tokens: int = 0
    tokens_per_second: float | None = None
    alpha: float | None = None
    baseline: str | None = None
    positional_profile: dict[int, tuple[float, int]] = field(default_factory=dict)
    acceptance_by_index: list[float] = field(default_factory=list)
    hardware_tag: str = ""
    prompts_hash: str = ""
    config_hash: str = ""

    @property
    def mean_accepted(self) -> float:
        return self.tau - 1.0

    @property
    def key(self) -> str:
        return report_key(self.mode, self.corpus, self.temperature)

    def to_dict(self) -> dict[str, Any]:
        d = to_dict(self)
        d["per_seed_tau"] = {str(s): v for s, v in self.per_seed_tau.items()}
        d["positional_profile"] = {str(c): list(v) for c, v in self.positional_profile.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunReport":
        data = dict(d)
        data["per_seed_tau"] = {int(s): float(v) for s, v in data.get("per_seed_tau", {}).items()}
        data["positional_profile"] = {
            int(c): (float(v[0]), int(v[1])) for c, v in data.get("positional_profile", {}).items()
        }
        return cls(**data)
