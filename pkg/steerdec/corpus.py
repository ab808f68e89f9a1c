import hashlib
import json
import logging
import re
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .models import CorpusKind, CorpusSpec, Split

logger = logging.getLogger(__name__)

_SPLIT_STREAM = {Split.TRAIN: 0, Split.HELD_OUT: 1, Split.OOD: 2}
_NONTERMINAL_RE = re.compile(r"^[A-Z]\w*$")
_MAX_MARKOV_STATES = 1 << 20
_MAX_PCFG_DEPTH = 32


def _sample_rng(spec: CorpusSpec) -> np.random.Generator:
    # generator parameters depend on the seed only; the split picks the sample stream
    return np.random.default_rng([spec.seed, _SPLIT_STREAM[spec.split], 1])


def markov_table(spec: CorpusSpec) -> np.ndarray:
    """Row-stochastic transition table over ``vocab_size ** order`` contexts."""
    states = spec.vocab_size**spec.order
    if states > _MAX_MARKOV_STATES:
        raise ConfigError(f"markov order {spec.order} over vocab {spec.vocab_size} needs {states} states")
    rng = np.random.default_rng([spec.seed, 0])
    alpha = np.full(spec.vocab_size, spec.concentration)
    return rng.dirichlet(alpha, size=states)


def markov_corpus(spec: CorpusSpec) -> list[list[int]]:
    table = markov_table(spec)
    cdf = np.cumsum(table, axis=1)
    rng = _sample_rng(spec)
    V = spec.vocab_size
    sequences = []
    for _ in range(spec.n_sequences):
        seq = [int(t) for t in rng.integers(0, V, size=spec.order)]
        state = 0
        for t in seq:
            state = state * V + t
        while len(seq) < spec.seq_len:
            row = cdf[state]
            nxt = min(int(np.searchsorted(row, rng.random() * row[-1], side="right")), V - 1)
            seq.append(nxt)
            state = (state * V + nxt) % (V**spec.order)
        sequences.append(seq[: spec.seq_len])
    return sequences


def random_grammar(vocab_size: int, seed: int, n_nonterminals: int = 8) -> dict[str, list[list[str]]]:
    rng = np.random.default_rng([seed, 0])
    names = ["S"] + [f"N{i}" for i in range(1, n_nonterminals)]
    terminals = rng.choice(vocab_size, size=min(vocab_size, 4 * n_nonterminals), replace=False)
    rules: dict[str, list[list[str]]] = {}
    for i, name in enumerate(names):
        productions = []
        for _ in range(int(rng.integers(2, 5))):
            body = []
            for _ in range(int(rng.integers(1, 4))):
                # only later nonterminals may be referenced, so every derivation terminates
                later = names[i + 1 :]
                if later and rng.random() < 0.4:
                    body.append(str(rng.choice(later)))
                else:
                    body.append(str(int(rng.choice(terminals))))
            productions.append(body)
        rules[name] = productions
    return rules


def _check_grammar(rules: dict[str, list[list[str]]], vocab_size: int) -> None:
    if "S" not in rules:
        raise ConfigError("pcfg rules need a start symbol 'S'")
    for name, productions in rules.items():
        if not productions:
            raise ConfigError(f"pcfg nonterminal {name!r} has no productions")
        for body in productions:
            for symbol in body:
                if _NONTERMINAL_RE.match(symbol):
                    if symbol not in rules:
                        raise ConfigError(f"pcfg symbol {symbol!r} in {name!r} is undefined")
                elif not symbol.isdigit() or int(symbol) >= vocab_size:
                    raise ConfigError(f"pcfg terminal {symbol!r} is not a token id below {vocab_size}")


def _expand(rules: dict[str, list[list[str]]], symbol: str, rng: np.random.Generator, depth: int, out: list[int]) -> None:
    if not _NONTERMINAL_RE.match(symbol):
        out.append(int(symbol))
        return
    if depth > _MAX_PCFG_DEPTH:
        # fall back to the shortest production so recursive grammars terminate
        body = min(rules[symbol], key=len)
    else:
        productions = rules[symbol]
        body = productions[int(rng.integers(len(productions)))]
    for s in body:
        _expand(rules, s, rng, depth + 1, out)


def pcfg_corpus(spec: CorpusSpec) -> list[list[int]]:
    rules = spec.rules if spec.rules is not None else random_grammar(spec.vocab_size, spec.seed)
    _check_grammar(rules, spec.vocab_size)
    rng = _sample_rng(spec)
    sequences = []
    for _ in range(spec.n_sequences):
        seq: list[int] = []
        while len(seq) < spec.seq_len:
            _expand(rules, "S", rng, 0, seq)
        sequences.append(seq[: spec.seq_len])
    return sequences


def bytes_corpus(spec: CorpusSpec) -> list[list[int]]:
    assert spec.path is not None
    path = Path(spec.path)
    if not path.exists():
        raise ConfigError(f"bytes corpus file not found: {path}")
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64) % spec.vocab_size
    n_chunks = data.shape[0] // spec.seq_len
    if n_chunks == 0:
        raise DomainError(f"{path} is shorter than one sequence of {spec.seq_len} bytes")
    chunks = np.arange(n_chunks)
    if spec.split is Split.TRAIN:
        chunks = chunks[chunks % 10 != 9]
    elif spec.split is Split.HELD_OUT:
        chunks = chunks[chunks % 10 == 9]
    if chunks.size == 0:
        raise DomainError(f"{path} has no chunks for split {spec.split}")
    picked = _sample_rng(spec).permutation(chunks)[: spec.n_sequences]
    return [data[c * spec.seq_len : (c + 1) * spec.seq_len].tolist() for c in picked]


def build_corpus(spec: CorpusSpec) -> list[list[int]]:
    builders = {
        CorpusKind.MARKOV: markov_corpus,
        CorpusKind.PCFG: pcfg_corpus,
        CorpusKind.BYTES: bytes_corpus,
    }
    sequences = builders[spec.kind](spec)
    logger.debug("corpus %s/%s: %d sequences", spec.kind, spec.split, len(sequences))
    return sequences


def extract_prompts(
    sequences: Sequence[Sequence[int]], n_prompts: int, prompt_len: int, seed: int = 0
) -> list[list[int]]:
    eligible = [i for i, s in enumerate(sequences) if len(s) >= prompt_len]
    if len(eligible) < n_prompts:
        raise DomainError(f"only {len(eligible)} sequences can supply {prompt_len}-token prompts, need {n_prompts}")
    picked = np.random.default_rng(seed).choice(eligible, size=n_prompts, replace=False)
    return [list(sequences[int(i)][:prompt_len]) for i in picked]


def prompts_hash(prompts: Sequence[Sequence[int]]) -> str:
    payload = json.dumps([list(map(int, p)) for p in prompts], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def check_disjoint(train: CorpusSpec, ood: CorpusSpec) -> None:
    if train.generator_key() == ood.generator_key():
        raise ConfigError("ood corpus must use generator parameters disjoint from the train corpus")
