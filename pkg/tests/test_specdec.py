import numpy as np
import pytest

from steerdec import tensor as T
from steerdec.errors import ContractError
from steerdec.lossless import first_token_histogram, tv_distance
from steerdec.models import DecodeMode, EngineConfig, FinalSource, Role, SteeringVariant
from steerdec.specdec import (
    SpeculativeStream,
    accept_probability,
    autoregressive_generate,
    draft,
    generate,
    rejection_walk,
    residual_distribution,
)
from steerdec.steering import SteeringState, compute_steering, steering_hook
from steerdec.tensor import Tensor
from steerdec.transformer import forward, next_token_distribution, sample

PROMPT = [1, 2, 3, 4]


class NoRandom:
    def random(self):
        raise AssertionError("greedy decoding must not consume randomness")


def _steering(verifier, drafter, seed=5):
    state = SteeringState.init(SteeringVariant.BIAS_IN_MLP, verifier.config, drafter.config, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name in state.injector_names():
        state.params[name].data[:] = rng.standard_normal(state.params[name].shape) * 0.3
    return state


def test_accept_probability():
    assert accept_probability(0.3, 0.6) == pytest.approx(0.5)
    assert accept_probability(0.6, 0.3) == 1.0
    with pytest.raises(ContractError):
        accept_probability(0.5, 0.0)


def test_residual_distribution():
    assert residual_distribution([0.5, 0.3, 0.2], [0.2, 0.5, 0.3]) == pytest.approx([1.0, 0.0, 0.0])
    assert residual_distribution([0.4, 0.6], [0.4, 0.6]) == pytest.approx([0.4, 0.6])
    r = residual_distribution([0.5, 0.4, 0.1], [0.1, 0.2, 0.7])
    assert r == pytest.approx([0.4 / 0.6, 0.2 / 0.6, 0.0])


def test_greedy_walk_stops_at_first_mismatch():
    verifier_dists = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]])
    drafter_dists = np.full((2, 2), 0.5)
    assert rejection_walk([1, 1], drafter_dists, verifier_dists, 0.0, NoRandom()) == (
        1,
        0,
        FinalSource.REJECTION_RESAMPLE,
    )
    assert rejection_walk([1, 0], drafter_dists, verifier_dists, 0.0, NoRandom()) == (2, 1, FinalSource.BONUS)


def test_first_emitted_token_follows_the_verifier_law():
    p_v = np.array([0.5, 0.3, 0.2])
    p_d = np.array([0.2, 0.3, 0.5])
    emp = first_token_histogram(p_v, p_d, 100_000, np.random.default_rng(0))
    assert tv_distance(emp, p_v) < 0.01


def test_acceptance_rate_is_the_distribution_overlap():
    p_v = np.array([0.5, 0.3, 0.2])
    p_d = np.array([0.2, 0.3, 0.5])
    rng = np.random.default_rng(1)
    rounds = 20_000
    accepted = 0
    for _ in range(rounds):
        token = sample(p_d, rng)
        accepted += rejection_walk([token], p_d[None, :], np.stack([p_v, p_v]), 1.0, rng)[0]
    assert accepted / rounds == pytest.approx(0.7, abs=0.02)


def test_greedy_output_matches_the_verifier(verifier, drafter):
    config = EngineConfig(k=3, temperature=0.0, max_new_tokens=12)
    out = generate(config, verifier, drafter, None, PROMPT, NoRandom())
    assert out.tokens == autoregressive_generate(verifier, PROMPT, 12, 0.0)


def test_greedy_output_matches_the_verifier_with_steering(verifier, drafter):
    config = EngineConfig(k=4, temperature=0.0, max_new_tokens=15, mode=DecodeMode.SD2)
    out = generate(config, verifier, drafter, _steering(verifier, drafter), PROMPT, NoRandom())
    assert out.tokens == autoregressive_generate(verifier, PROMPT, 15, 0.0)


@pytest.mark.parametrize("temperature", [0.0, 1.0])
def test_self_drafting_accepts_every_token(verifier, temperature):
    config = EngineConfig(k=4, temperature=temperature, max_new_tokens=20)
    out = generate(config, verifier, verifier.clone(Role.DRAFTER), None, PROMPT)
    assert out.accepted_counts == [4] * len(out.blocks)
    assert len(out.tokens) == 20


def test_block_accounting(verifier, drafter):
    config = EngineConfig(k=3, temperature=1.0, max_new_tokens=16, seed=2)
    out = generate(config, verifier, drafter, None, PROMPT)
    assert len(out.tokens) == 16
    assert sum(b.emitted for b in out.blocks) == 16
    assert out.blocks[-1].position == 16
    assert all(0 <= b.accepted <= b.drafted == 3 for b in out.blocks)
    assert out.tokens_computed == sum(b.drafted + 1 for b in out.blocks)


def test_same_seed_same_output(verifier, drafter):
    config = EngineConfig(k=3, temperature=1.0, max_new_tokens=16, seed=4)
    a = generate(config, verifier, drafter, None, PROMPT)
    b = generate(config, verifier, drafter, None, PROMPT)
    assert a.tokens == b.tokens
    assert a.accepted_counts == b.accepted_counts


def test_rollback_keeps_caches_behind_the_prefix(verifier, drafter):
    config = EngineConfig(k=4, temperature=1.0, mode=DecodeMode.SD2)
    stream = SpeculativeStream(config, verifier, drafter, _steering(verifier, drafter), PROMPT)
    assert stream.steering_vector.origin_position == len(PROMPT)
    for _ in range(6):
        n = len(stream.tokens)
        result = stream.step()
        assert len(stream.tokens) == n + result.accepted_count + 1
        assert stream.verifier_cache.length == len(stream.tokens) - 1
        assert stream.drafter_cache.length <= len(stream.tokens) - 1
        assert stream.steering_vector.origin_position == n + result.accepted_count + 1


def test_eos_stops_generation(verifier, drafter):
    first = autoregressive_generate(verifier, PROMPT, 1, 0.0)[0]
    config = EngineConfig(k=3, temperature=0.0, max_new_tokens=12, eos_token_id=first)
    out = generate(config, verifier, drafter, None, PROMPT)
    assert out.tokens == [first]
    assert len(out.blocks) == 1


def test_generation_near_capacity_is_truncated(verifier, drafter):
    prompt = [i % 8 for i in range(46)]
    config = EngineConfig(k=8, temperature=0.0, max_new_tokens=10)
    out = generate(config, verifier, drafter, None, prompt)
    assert out.truncated
    assert out.tokens == autoregressive_generate(verifier, prompt, len(out.tokens), 0.0)
    assert len(prompt) + len(out.tokens) <= verifier.config.max_seq_len + 1


def test_single_token_prompt(verifier, drafter):
    config = EngineConfig(k=2, temperature=0.0, max_new_tokens=5, mode=DecodeMode.SD2)
    out = generate(config, verifier, drafter, _steering(verifier, drafter), [6])
    assert out.tokens == autoregressive_generate(verifier, [6], 5, 0.0)


def test_stream_contracts(verifier, drafter):
    with pytest.raises(ContractError):
        SpeculativeStream(EngineConfig(mode=DecodeMode.SD2), verifier, drafter, None, PROMPT)
    with pytest.raises(ContractError):
        SpeculativeStream(EngineConfig(), verifier, drafter, None, [])
    with pytest.raises(ContractError):
        autoregressive_generate(verifier, PROMPT, 4, 1.0)


class Scripted:
    def __init__(self, *values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def test_acceptance_rule_examples():
    assert accept_probability(0.5, 0.5) == 1.0
    assert accept_probability(0.2, 0.8) == pytest.approx(0.25)
    assert accept_probability(0.9, 0.3) == 1.0
    assert residual_distribution([0.6, 0.4], [0.2, 0.8]) == pytest.approx([1.0, 0.0])
    assert residual_distribution([0.5, 0.4, 0.1], [0.1, 0.3, 0.6]) == pytest.approx([0.8, 0.2, 0.0])


def test_acceptance_rule_matches_its_closed_form():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p_v, p_d = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        for x in range(6):
            assert accept_probability(p_v[x], p_d[x]) == min(1.0, p_v[x] / p_d[x])
        positive = np.maximum(p_v - p_d, 0.0)
        assert np.allclose(residual_distribution(p_v, p_d), positive / positive.sum(), atol=1e-15)
    same = rng.dirichlet(np.ones(6))
    assert np.array_equal(residual_distribution(same, same), same)


def test_scripted_rejection_resamples_from_the_residual():
    drafter_dists = np.array([[0.2, 0.8]])
    verifier_dists = np.array([[0.8, 0.2], [0.5, 0.5]])
    # u=0.9 rejects token 1 (acceptance 0.25); the residual [1, 0] gives token 0 for any draw
    assert rejection_walk([1], drafter_dists, verifier_dists, 1.0, Scripted(0.9, 0.99)) == (
        0,
        0,
        FinalSource.REJECTION_RESAMPLE,
    )


def _full_recompute_generate(verifier, drafter, prompt, k, max_new_tokens, seed):
    """Speculative sampling with every distribution recomputed from scratch, no caches."""
    rng = np.random.default_rng(seed)
    tokens, out, accepted_counts = list(prompt), [], []
    while len(out) < max_new_tokens:
        drafted, drafter_dists = [], []
        for _ in range(k):
            dist = next_token_distribution(drafter, tokens + drafted).astype(np.float64)
            drafted.append(sample(dist, rng))
            drafter_dists.append(dist)
        logits = forward(verifier, tokens + drafted).logits.data[len(tokens) - 1 :]
        verifier_dists = T.softmax(Tensor(logits)).data.astype(np.float64)
        accepted = 0
        final = None
        for i, tok in enumerate(drafted):
            if rng.random() >= accept_probability(verifier_dists[i][tok], drafter_dists[i][tok]):
                final = sample(residual_distribution(verifier_dists[i], drafter_dists[i]), rng)
                break
            accepted += 1
        if final is None:
            final = sample(verifier_dists[k], rng)
        emitted = [*drafted[:accepted], final]
        tokens += emitted
        out += emitted[: max_new_tokens - len(out)]
        accepted_counts.append(accepted)
    return out, accepted_counts


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sampled_generation_follows_the_reference_trace(verifier, drafter, seed):
    config = EngineConfig(k=3, temperature=1.0, max_new_tokens=14, seed=seed)
    out = generate(config, verifier, drafter, None, PROMPT)
    tokens, accepted_counts = _full_recompute_generate(verifier, drafter, PROMPT, 3, 14, seed)
    assert out.tokens == tokens
    assert out.accepted_counts == accepted_counts


def _copy_rng(rng):
    clone = np.random.default_rng()
    clone.bit_generator.state = rng.bit_generator.state
    return clone


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_continued_stream_matches_a_restart_from_the_accepted_prefix(verifier, drafter, steps):
    config = EngineConfig(k=4, temperature=1.0, seed=steps)
    stream = SpeculativeStream(config, verifier, drafter, None, PROMPT)
    for _ in range(steps):
        stream.step()
    restart = SpeculativeStream(config, verifier, drafter, None, list(stream.tokens), _copy_rng(stream.rng))
    for _ in range(3):
        a, b = stream.step(), restart.step()
        assert (a.accepted_count, a.emitted_tokens) == (b.accepted_count, b.emitted_tokens)
    assert stream.tokens == restart.tokens


def test_restart_recomputes_the_same_steering_vector(verifier, drafter):
    steering = _steering(verifier, drafter)
    config = EngineConfig(k=4, temperature=1.0, mode=DecodeMode.SD2, seed=6)
    stream = SpeculativeStream(config, verifier, drafter, steering, PROMPT)
    for _ in range(2):
        stream.step()
        restart = SpeculativeStream(config, verifier, drafter, steering, list(stream.tokens))
        assert restart.steering_vector.origin_position == stream.steering_vector.origin_position
        assert np.allclose(restart.steering_vector.g.data, stream.steering_vector.g.data, atol=1e-10)


@pytest.mark.parametrize("mode", [DecodeMode.SD2, DecodeMode.PRETRAINED])
def test_steered_drafter_rows_persist_in_the_cache(verifier, drafter, mode):
    config = EngineConfig(k=4, temperature=1.0, mode=mode, seed=8)
    stream = SpeculativeStream(config, verifier, drafter, _steering(verifier, drafter), PROMPT)
    stream.step()
    kept = stream.drafter_cache.clone()
    fresh = drafter.new_cache()
    forward(drafter, stream.tokens[: kept.length], fresh)
    rest = stream.tokens[kept.length :]
    from_stream = next_token_distribution(drafter, rest, kept)
    from_scratch = next_token_distribution(drafter, rest, fresh)
    if mode is DecodeMode.SD2:
        assert not np.allclose(from_stream, from_scratch)
    else:
        assert np.allclose(from_stream, from_scratch, atol=1e-10)


@pytest.mark.parametrize("steered", [False, True])
def test_cached_drafting_matches_full_recompute(verifier, drafter, steered):
    hook = None
    cache = drafter.new_cache()
    if steered:
        state = _steering(verifier, drafter)
        taps = forward(verifier, PROMPT, tap_positions=[len(PROMPT) - 1]).taps
        hook = steering_hook(state, compute_steering(state, taps))
    else:
        forward(drafter, PROMPT[:-1], cache)
    block = draft(drafter, PROMPT, cache, hook, 4, 1.0, np.random.default_rng(0))
    assert cache.length == len(PROMPT) + 3
    for i in range(4):
        full = next_token_distribution(drafter, PROMPT + block.tokens[:i], None, hook)
        assert np.allclose(block.drafter_dists[i], full, atol=1e-12)
