"""Losslessness checks: greedy identity with the verifier and the law of the first emitted token."""

import dataclasses
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .models import DecodeMode, EngineConfig
from .specdec import autoregressive_generate, generate, rejection_walk
from .steering import SteeringState, compute_steering, steering_hook
from .transformer import TransformerModel, forward, next_token_distribution, sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    counterexample: str = ""


def _first_divergence(a: Sequence[int], b: Sequence[int]) -> int:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return min(len(a), len(b))


def _wide(model: TransformerModel) -> TransformerModel:
    return model.clone(dtype=np.float64)


def _wide_steering(steering: SteeringState | None) -> SteeringState | None:
    return None if steering is None else steering.clone(dtype=np.float64)


def greedy_identity(
    verifier: TransformerModel,
    drafter: TransformerModel,
    steering: SteeringState | None,
    prompts: Sequence[Sequence[int]],
    engine: EngineConfig,
) -> CheckResult:
    """At T=0 speculative output must equal verifier-only argmax decoding token for token."""
    v, d, s = _wide(verifier), _wide(drafter), _wide_steering(steering)
    config = dataclasses.replace(engine, temperature=0.0)
    mismatches = 0
    counterexample = ""
    for i, prompt in enumerate(prompts):
        spec = generate(config, v, d, s, prompt).tokens
        ref = autoregressive_generate(v, prompt, len(spec), 0.0, eos_token_id=config.eos_token_id)
        if spec != ref:
            mismatches += 1
            logger.warning("prompt %d: speculative output diverges from greedy verifier decoding", i)
            if not counterexample:
                counterexample = (
                    f"prompt {i} {list(prompt)}: first divergence at index {_first_divergence(spec, ref)}\n"
                    f"  speculative: {list(spec)}\n"
                    f"  reference:   {list(ref)}"
                )
    detail = f"{len(prompts) - mismatches}/{len(prompts)} prompts match"
    return CheckResult("greedy-identity", mismatches == 0, float(mismatches), 0.0, detail, counterexample)


def first_token_laws(
    verifier: TransformerModel,
    drafter: TransformerModel,
    steering: SteeringState | None,
    prompt: Sequence[int],
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Verifier and (steered) drafter distributions for the first position after ``prompt``."""
    p_v = next_token_distribution(verifier, prompt, temperature=temperature).astype(np.float64)
    hook = None
    if steering is not None and len(prompt) > 1:
        context = list(prompt[:-1])
        taps = forward(verifier, context, tap_positions=[len(context) - 1]).taps
        assert taps is not None
        hook = steering_hook(steering, compute_steering(steering, taps, len(context) + 1))
    cache = drafter.new_cache()
    if len(prompt) > 1:
        forward(drafter, list(prompt[:-1]), cache)
    p_d = next_token_distribution(drafter, [prompt[-1]], cache, hook, temperature).astype(np.float64)
    return p_v, p_d


def first_token_histogram(
    p_v: np.ndarray, p_d: np.ndarray, rounds: int, rng: np.random.Generator
) -> np.ndarray:
    """Empirical law of the first emitted token over ``rounds`` independent draft/verify rounds."""
    counts = np.zeros(p_v.shape[0], dtype=np.int64)
    drafter_dists = p_d[None, :]
    verifier_dists = np.stack([p_v, p_v])
    for _ in range(rounds):
        token = sample(p_d, rng)
        accepted, final, _ = rejection_walk([token], drafter_dists, verifier_dists, 1.0, rng)
        counts[token if accepted else final] += 1
    return counts / rounds


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def sampling_law(
    verifier: TransformerModel,
    drafter: TransformerModel,
    steering: SteeringState | None,
    prompt: Sequence[int],
    rounds: int = 200_000,
    threshold: float = 0.01,
    seed: int = 0,
) -> CheckResult:
    p_v, p_d = first_token_laws(_wide(verifier), _wide(drafter), _wide_steering(steering), prompt)
    emp = first_token_histogram(p_v, p_d, rounds, np.random.default_rng(seed))
    tv = tv_distance(emp, p_v)
    logger.info("first-token TV distance %.5f over %d rounds", tv, rounds)
    return CheckResult("sampling-law", tv < threshold, tv, threshold, f"{rounds} rounds, V={p_v.shape[0]}")


def run_suite(
    verifier: TransformerModel,
    drafter: TransformerModel,
    steering: SteeringState | None,
    prompts: Sequence[Sequence[int]],
    engine: EngineConfig,
    rounds: int = 200_000,
    threshold: float = 0.01,
) -> list[CheckResult]:
    if steering is not None:
        engine = dataclasses.replace(engine, mode=DecodeMode.SD2)
    results = [greedy_identity(verifier, drafter, steering, prompts, engine)]
    if rounds > 0:
        results.append(sampling_law(verifier, drafter, steering, prompts[0], rounds, threshold, engine.seed))
    return results
