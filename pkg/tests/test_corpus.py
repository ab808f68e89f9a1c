import numpy as np
import pytest

from steerdec.corpus import (
    build_corpus,
    check_disjoint,
    extract_prompts,
    markov_table,
    prompts_hash,
    random_grammar,
)
from steerdec.errors import ConfigError, DomainError
from steerdec.models import CorpusSpec, Split


def test_markov_table_is_row_stochastic():
    table = markov_table(CorpusSpec(vocab_size=6, order=2, seed=1))
    assert table.shape == (36, 6)
    assert np.allclose(table.sum(axis=1), 1.0)


def test_corpora_are_deterministic_and_in_vocabulary():
    spec = CorpusSpec(vocab_size=12, seed=4, n_sequences=10, seq_len=20, order=2)
    seqs = build_corpus(spec)
    assert seqs == build_corpus(spec)
    assert len(seqs) == 10 and all(len(s) == 20 for s in seqs)
    assert max(max(s) for s in seqs) < 12


def test_splits_share_the_generator_but_not_the_samples():
    train = CorpusSpec(vocab_size=12, seed=4, n_sequences=10, seq_len=20)
    held = CorpusSpec(vocab_size=12, seed=4, n_sequences=10, seq_len=20, split=Split.HELD_OUT)
    assert build_corpus(train) != build_corpus(held)
    assert train.generator_key() == held.generator_key()


def test_pcfg_with_explicit_rules():
    rules = {"S": [["1", "A"], ["2"]], "A": [["3", "A"], ["4"]]}
    seqs = build_corpus(CorpusSpec(kind="pcfg", vocab_size=8, split=Split.OOD, n_sequences=5, seq_len=12, rules=rules))
    assert all(len(s) == 12 and set(s) <= {1, 2, 3, 4} for s in seqs)


def test_pcfg_rejects_bad_grammars():
    for rules in ({"A": [["1"]]}, {"S": [["B"]]}, {"S": [["99"]]}, {"S": []}):
        with pytest.raises(ConfigError):
            build_corpus(CorpusSpec(kind="pcfg", vocab_size=8, split=Split.OOD, rules=rules))


def test_random_grammar_only_references_later_nonterminals():
    rules = random_grammar(16, seed=3)
    names = list(rules)
    for i, name in enumerate(names):
        for body in rules[name]:
            for symbol in body:
                assert symbol.isdigit() or names.index(symbol) > i


def test_bytes_corpus_splits_chunks(tmp_path):
    path = tmp_path / "data.bin"
    path.write_bytes(bytes(range(256)) * 4)
    train = build_corpus(CorpusSpec(kind="bytes", vocab_size=64, path=str(path), seq_len=32, n_sequences=100))
    held = build_corpus(
        CorpusSpec(kind="bytes", vocab_size=64, path=str(path), seq_len=32, n_sequences=100, split=Split.HELD_OUT)
    )
    assert len(train) == 29 and len(held) == 3
    assert all(max(s) < 64 for s in train)
    with pytest.raises(ConfigError):
        CorpusSpec(kind="bytes")


def test_ood_must_use_other_generator_parameters():
    train = CorpusSpec(seed=1)
    with pytest.raises(ConfigError):
        check_disjoint(train, CorpusSpec(seed=1, split=Split.OOD))
    check_disjoint(train, CorpusSpec(kind="pcfg", seed=1, split=Split.OOD))


def test_extract_prompts():
    seqs = [[i] * 6 for i in range(10)]
    prompts = extract_prompts(seqs, 4, 3, seed=0)
    assert prompts == extract_prompts(seqs, 4, 3, seed=0)
    assert len({p[0] for p in prompts}) == 4 and all(len(p) == 3 for p in prompts)
    with pytest.raises(DomainError):
        extract_prompts(seqs, 11, 3)


def test_prompts_hash_is_order_sensitive():
    assert prompts_hash([[1, 2], [3]]) == prompts_hash([[1, 2], [3]])
    assert prompts_hash([[1, 2], [3]]) != prompts_hash([[3], [1, 2]])
