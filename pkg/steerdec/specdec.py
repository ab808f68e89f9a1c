"""Speculative decoding engine: steered drafting, rejection-sampling verification, rollback.

Randomness protocol (T > 0), all from one generator per stream and in this order per block:
one categorical draw per drafted token, then one uniform per verified position until the
first rejection, then one categorical draw for the residual or bonus token. T = 0 consumes
no randomness.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError
from .models import DecodeMode, EngineConfig, FinalSource
from .steering import SteeringState, SteeringVector, compute_steering, steering_hook
from .tensor import Tensor
from .transformer import (
    KVCache,
    MlpSteering,
    TransformerModel,
    UniformSource,
    forward,
    next_token_distribution,
    sample,
)

logger = logging.getLogger(__name__)


@dataclass
class DraftBlock:
    tokens: list[int]
    drafter_dists: np.ndarray  # [k, V]
    steering_used: int | None = None  # origin position of the steering vector

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class VerificationResult:
    accepted_count: int
    emitted_tokens: list[int]
    final_token_source: FinalSource
    next_steering: SteeringVector | None = None


@dataclass(frozen=True)
class BlockTrace:
    block_index: int
    position: int  # output position of the block's last emitted token
    accepted: int
    emitted: int
    drafted: int = 0


@dataclass
class GenerationResult:
    tokens: list[int]
    blocks: list[BlockTrace] = field(default_factory=list)
    elapsed: float = 0.0
    tokens_computed: int = 0
    truncated: bool = False

    @property
    def accepted_counts(self) -> list[int]:
        return [b.accepted for b in self.blocks]


def accept_probability(p_v: float, p_d: float) -> float:
    if p_d <= 0:
        raise ContractError(f"drafter probability must be positive for a sampled token, got {p_d}")
    return min(1.0, p_v / p_d)


def residual_distribution(p_v: np.ndarray | Sequence[float], p_d: np.ndarray | Sequence[float]) -> np.ndarray:
    pv = np.asarray(p_v, dtype=np.float64)
    pd = np.asarray(p_d, dtype=np.float64)
    if np.array_equal(pv, pd):
        return pv.copy()
    residual = np.maximum(pv - pd, 0.0)
    total = residual.sum()
    if total <= 0:
        return pv.copy()
    return residual / total


def rejection_walk(
    tokens: Sequence[int],
    drafter_dists: np.ndarray,
    verifier_dists: np.ndarray,
    temperature: float,
    rng: UniformSource,
) -> tuple[int, int, FinalSource]:
    """Accept drafted tokens left to right; returns (accepted, final token, its source).

    ``verifier_dists`` has one more row than there are drafted tokens: the last row is the
    bonus distribution.
    """
    for i, tok in enumerate(tokens):
        p_v = verifier_dists[i]
        if temperature == 0:
            target = int(np.argmax(p_v))
            if tok != target:
                return i, target, FinalSource.REJECTION_RESAMPLE
            continue
        if rng.random() >= accept_probability(p_v[tok], drafter_dists[i][tok]):
            return i, sample(residual_distribution(p_v, drafter_dists[i]), rng), FinalSource.REJECTION_RESAMPLE
    bonus = verifier_dists[len(tokens)]
    final = int(np.argmax(bonus)) if temperature == 0 else sample(bonus, rng)
    return len(tokens), final, FinalSource.BONUS


def _pick(dist: np.ndarray, temperature: float, rng: UniformSource) -> int:
    return int(np.argmax(dist)) if temperature == 0 else sample(dist, rng)


def draft(
    drafter: TransformerModel,
    prefix: Sequence[int],
    cache: KVCache,
    steer: MlpSteering | None,
    k: int,
    temperature: float,
    rng: UniformSource,
    steering_origin: int | None = None,
) -> DraftBlock:
    if cache.length >= len(prefix):
        raise ContractError(f"drafter cache ({cache.length}) must trail the prefix ({len(prefix)})")
    if len(prefix) + k - 1 > drafter.config.max_seq_len:
        raise CapacityError(f"drafting {k} tokens after {len(prefix)} overflows the drafter")
    feed = list(prefix[cache.length :])
    tokens: list[int] = []
    dists: list[np.ndarray] = []
    for i in range(k):
        dist = next_token_distribution(drafter, feed, cache, steer, temperature).astype(np.float64)
        tok = _pick(dist, temperature, rng)
        tokens.append(tok)
        dists.append(dist)
        feed = [tok]
    return DraftBlock(tokens, np.stack(dists), steering_origin)


def verify(
    verifier: TransformerModel,
    prefix: Sequence[int],
    cache: KVCache,
    block: DraftBlock,
    temperature: float,
    rng: UniformSource,
    steering: SteeringState | None = None,
) -> VerificationResult:
    if cache.length != len(prefix) - 1:
        raise ContractError(
            f"verifier cache holds {cache.length} positions, expected prefix length - 1 = {len(prefix) - 1}"
        )
    fed = [prefix[-1], *block.tokens]
    positions = list(range(len(fed))) if steering is not None else None
    out = forward(verifier, fed, cache, tap_positions=positions)
    verifier_dists = T.softmax(out.logits, temperature).data.astype(np.float64)
    accepted, final, source = rejection_walk(block.tokens, block.drafter_dists, verifier_dists, temperature, rng)
    next_steering = None
    if steering is not None and out.taps is not None:
        next_steering = compute_steering(
            steering, out.taps.rows([accepted]), origin_position=len(prefix) + accepted + 1
        )
    return VerificationResult(accepted, [*block.tokens[:accepted], final], source, next_steering)


class SpeculativeStream:
    """One generation stream: owns both caches, the rng and the current steering vector."""

    def __init__(
        self,
        config: EngineConfig,
        verifier: TransformerModel,
        drafter: TransformerModel,
        steering: SteeringState | None,
        prompt: Sequence[int],
        rng: np.random.Generator | None = None,
    ) -> None:
        if not prompt:
            raise ContractError("prompt must contain at least one token")
        if config.mode is DecodeMode.SD2 and steering is None:
            raise ContractError("sd2 decoding needs a steering state")
        self.config = config
        self.verifier = verifier
        self.drafter = drafter
        self.steering = steering if config.mode is DecodeMode.SD2 and config.steering_enabled else None
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.tokens = list(prompt)
        self.verifier_cache = verifier.new_cache()
        self.drafter_cache = drafter.new_cache()
        self.steering_vector: SteeringVector | None = None
        self.tokens_computed = 0
        self.last_block_size = 0
        if len(prompt) > 1:
            self._prefill(list(prompt[:-1]))

    def _prefill(self, context: list[int]) -> None:
        taps_at = [len(context) - 1] if self.steering is not None else None
        out = forward(self.verifier, context, self.verifier_cache, tap_positions=taps_at)
        if self.steering is not None and out.taps is not None:
            self.steering_vector = compute_steering(self.steering, out.taps, origin_position=len(context) + 1)
        forward(self.drafter, context, self.drafter_cache)

    def block_size(self) -> int:
        n = len(self.tokens)
        room = min(self.verifier.config.max_seq_len - n, self.drafter.config.max_seq_len - n + 1)
        return min(self.config.k, room)

    def step(self) -> VerificationResult:
        k = self.block_size()
        if k < 1:
            raise CapacityError(f"no room left to speculate after {len(self.tokens)} tokens")
        n = len(self.tokens)
        origin = self.steering_vector.origin_position if self.steering_vector is not None else None
        hook = steering_hook(self.steering, self.steering_vector)
        temperature = self.config.temperature
        block = draft(self.drafter, self.tokens, self.drafter_cache, hook, k, temperature, self.rng, origin)
        result = verify(self.verifier, self.tokens, self.verifier_cache, block, temperature, self.rng, self.steering)
        accepted = result.accepted_count
        # drop rejected drafter rows and speculative verifier rows
        self.verifier_cache.truncate(n + accepted)
        self.drafter_cache.truncate(min(self.drafter_cache.length, n + accepted))
        self.tokens.extend(result.emitted_tokens)
        self.steering_vector = result.next_steering
        self.tokens_computed += k + 1
        self.last_block_size = k
        return result


def generate(
    config: EngineConfig,
    verifier: TransformerModel,
    drafter: TransformerModel,
    steering: SteeringState | None,
    prompt: Sequence[int],
    rng: np.random.Generator | None = None,
) -> GenerationResult:
    limit = min(verifier.config.max_seq_len, drafter.config.max_seq_len)
    if len(prompt) + config.max_new_tokens > limit:
        logger.warning(
            "prompt (%d) + max_new_tokens (%d) exceeds max_seq_len %d; output may be truncated",
            len(prompt),
            config.max_new_tokens,
            limit,
        )
    start = time.perf_counter()
    stream = SpeculativeStream(config, verifier, drafter, steering, prompt, rng)
    result = GenerationResult(tokens=[])
    eos = config.eos_token_id
    while len(result.tokens) < config.max_new_tokens:
        try:
            step = stream.step()
        except CapacityError as e:
            logger.debug("stopping early: %s", e)
            result.truncated = True
            break
        emitted = step.emitted_tokens[: config.max_new_tokens - len(result.tokens)]
        stop = eos is not None and eos in emitted
        if stop:
            emitted = emitted[: emitted.index(eos) + 1]
        result.tokens.extend(emitted)
        trace = BlockTrace(
            len(result.blocks), len(result.tokens), step.accepted_count, len(emitted), stream.last_block_size
        )
        result.blocks.append(trace)
        logger.debug("block %d: accepted %d/%d", len(result.blocks) - 1, step.accepted_count, config.k)
        if stop:
            break
    result.elapsed = time.perf_counter() - start
    result.tokens_computed = stream.tokens_computed
    return result


def autoregressive_generate(
    model: TransformerModel,
    prompt: Sequence[int],
    max_new_tokens: int,
    temperature: float,
    rng: UniformSource | None = None,
    eos_token_id: int | None = None,
) -> list[int]:
    """Verifier-only decoding, the reference the speculative output must match."""
    if temperature > 0 and rng is None:
        raise ContractError("sampling needs an rng")
    cache = model.new_cache()
    out: list[int] = []
    feed = list(prompt)
    while len(out) < max_new_tokens and cache.length + len(feed) <= model.config.max_seq_len:
        logits = forward(model, feed, cache).logits
        dist = T.softmax(Tensor(logits.data[-1]), temperature).data.astype(np.float64)
        tok = int(np.argmax(dist)) if temperature == 0 else sample(dist, rng)  # type: ignore[arg-type]
        out.append(tok)
        if tok == eos_token_id:
            break
        feed = [tok]
    return out
