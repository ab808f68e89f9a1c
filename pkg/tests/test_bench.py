import json

import numpy as np
import pytest

from steerdec.bench import (
    DraftSetup,
    acceptance_by_index,
    block_efficiency,
    bucket_center,
    build_reports,
    comparison_table,
    load_traces,
    positional_profile,
    run_experiment,
    speedup,
    welch_t_test,
    worker_count,
    write_reports,
    write_traces,
)
from steerdec.errors import ContractError, DomainError, MissingArtifactError
from steerdec.models import DecodeMode, EngineConfig, ExperimentSpec, RunReport


def _record(mode, seed, accepted, position=8, prompt_index=0, block_index=0, drafted=3):
    return {
        "block_index": block_index,
        "position": position,
        "accepted": accepted,
        "emitted": accepted + 1,
        "drafted": drafted,
        "mode": mode,
        "seed": seed,
        "prompt_index": prompt_index,
        "corpus": "held_out",
        "temperature": 1.0,
    }


def _report(**changes):
    base = dict(
        mode="sd2",
        corpus="held_out",
        temperature=1.0,
        k=3,
        seeds=[0],
        accepted_counts=[1],
        tau=2.0,
        max_new_tokens=16,
        tokens_per_second=300.0,
        hardware_tag="cpu",
        prompts_hash="abc",
    )
    base.update(changes)
    return RunReport(**base)


def test_block_efficiency():
    assert block_efficiency([2, 0, 5]) == pytest.approx(10 / 3)
    assert block_efficiency([3, 3], k=3) == 4.0
    with pytest.raises(DomainError):
        block_efficiency([])
    with pytest.raises(DomainError):
        block_efficiency([9], k=8)


def test_welch_reference_values():
    r = welch_t_test([1, 2, 3], [2, 3, 4])
    assert r.t_statistic == pytest.approx(-1.224745, abs=1e-6)
    assert r.dof == pytest.approx(4.0)
    assert r.p_value == pytest.approx(0.2879, abs=1e-3)
    assert not r.degenerate
    same = welch_t_test([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
    assert same.t_statistic == pytest.approx(0.0) and same.p_value == pytest.approx(1.0)
    unequal = welch_t_test([1.0, 2.0, 3.0, 4.0], [10.0, 30.0])
    assert unequal.dof == pytest.approx(1.00834, abs=1e-4)


def test_welch_symmetry_and_one_sided_tails():
    a, b = [4.1, 3.9, 4.4, 4.0], [3.0, 3.2, 2.9]
    ab, ba = welch_t_test(a, b), welch_t_test(b, a)
    assert ab.t_statistic == pytest.approx(-ba.t_statistic)
    assert ab.p_value == pytest.approx(ba.p_value)
    greater = welch_t_test(a, b, "greater")
    less = welch_t_test(a, b, "less")
    assert greater.p_value + less.p_value == pytest.approx(1.0)
    assert greater.p_value == pytest.approx(ab.p_value / 2)


def test_welch_degenerate_and_invalid():
    r = welch_t_test([2, 2], [1, 1])
    assert r.degenerate and r.p_value is None and r.t_statistic == np.inf
    with pytest.raises(DomainError):
        welch_t_test([1], [1, 2])
    with pytest.raises(DomainError):
        welch_t_test([1, 2], [1, 2], "sideways")


def test_positional_profile():
    assert bucket_center(10) == 8
    assert bucket_center(16) == 24
    records = [_record("sd2", 0, 2, position=10), _record("sd2", 0, 4, position=12), _record("sd2", 0, 1, position=20)]
    assert positional_profile(records) == {8: (3.0, 2), 24: (1.0, 1)}


def test_acceptance_by_index():
    assert acceptance_by_index([0, 2, 3], 3) == pytest.approx([2 / 3, 2 / 3, 1 / 3])
    assert acceptance_by_index([], 3) == []


def test_speedup():
    assert speedup(_report(), _report(mode="pretrained", tokens_per_second=150.0)) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        speedup(_report(), _report(prompts_hash="other"))
    with pytest.raises(ContractError):
        speedup(_report(), _report(hardware_tag="gpu"))
    with pytest.raises(ContractError):
        speedup(_report(), _report(tokens_per_second=None))


def test_build_reports_groups_and_counts():
    records = [
        _record("sd2", 0, 3, block_index=0),
        _record("sd2", 0, 1, block_index=1, drafted=2),
        _record("sd2", 1, 2),
        _record("pretrained", 0, 0),
        _record("pretrained", 1, 1),
    ]
    reports = {r.mode: r for r in build_reports(records, k=3, max_new_tokens=16, prompt_hashes={"held_out": "h"})}
    sd2 = reports["sd2"]
    assert sd2.tau == pytest.approx(3.0)
    assert sd2.per_seed_tau == {0: 3.0, 1: 3.0}
    assert sd2.tokens_emitted == 9
    assert sd2.tokens_computed == 4 + 3 + 4
    assert sd2.prompts_hash == "h"
    assert sd2.mean_accepted == pytest.approx(2.0)
    assert reports["pretrained"].tau == pytest.approx(1.5)


def test_build_reports_with_throughput_fills_speedup():
    records = [_record("sd2", 0, 2), _record("pretrained", 0, 0)]
    throughput = {"sd2/held_out/T1": 200.0, "pretrained/held_out/T1": 100.0}
    reports = {r.mode: r for r in build_reports(records, 3, throughput=throughput, baseline="pretrained")}
    assert reports["sd2"].alpha == pytest.approx(2.0)
    assert reports["pretrained"].alpha == pytest.approx(1.0)


def test_comparison_table_single_seed_has_no_std_columns():
    headers, rows = comparison_table([_report(), _report(corpus="ood", tau=1.5)])
    assert headers == ["mode", "temperature", "tau_held_out", "accepted_held_out", "tau_ood", "accepted_ood"]
    assert rows == [["sd2", 1.0, 2.0, 1.0, 1.5, 0.5]]


def test_comparison_table_std_columns_with_several_seeds():
    several = _report(seeds=[0, 1], per_seed_tau={0: 2.0, 1: 3.0}, tau=2.5)
    headers, rows = comparison_table([several, _report(mode="pretrained")], with_speedup=True)
    assert headers == ["mode", "temperature", "tau_held_out", "tau_std_held_out", "accepted_held_out", "alpha_held_out"]
    assert rows[1] == ["sd2", 1.0, 2.5, pytest.approx(0.707107), 1.5, None]
    assert all(len(row) == len(headers) for row in rows)


def test_digest_ignores_wall_clock(tmp_path):
    fast = [_report(tokens_per_second=900.0, alpha=3.0)]
    slow = [_report(tokens_per_second=100.0, alpha=0.5)]
    assert write_reports(fast, [], tmp_path / "a") == write_reports(slow, [], tmp_path / "b")
    assert write_reports([_report(tau=2.5)], [], tmp_path / "c") != write_reports(slow, [], tmp_path / "b")
    assert write_reports([_report(hardware_tag="gpu")], [], tmp_path / "d") != write_reports(slow, [], tmp_path / "b")
    runs = json.loads((tmp_path / "a" / "runs.json").read_text())
    assert "tokens_per_second" not in runs[0]
    assert json.loads((tmp_path / "a" / "throughput.json").read_text())["sd2/held_out/T1"]["tokens_per_second"] == 900.0


def test_traces_round_trip_through_jsonl(tmp_path):
    write_traces({"sd2__held_out__T1__s0": [_record("sd2", 0, 2)]}, tmp_path)
    assert load_traces(tmp_path) == [_record("sd2", 0, 2)]
    with pytest.raises(MissingArtifactError):
        load_traces(tmp_path / "empty")


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SD2_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("SD2_THREADS", "many")
    assert worker_count() >= 1


def test_run_experiment(verifier, drafter):
    spec = ExperimentSpec(
        modes=("pretrained", "self"), temperatures=(0.0,), corpora=("held",), seeds=(0, 1), throughput=False
    )
    drafters = {
        "pretrained": DraftSetup(drafter),
        "self": DraftSetup(verifier.clone(), None, DecodeMode.PRETRAINED),
    }
    prompts = {"held": [[1, 2, 3], [4, 5, 6]]}
    result = run_experiment(spec, EngineConfig(k=3, max_new_tokens=6), verifier, drafters, prompts, "cpu", workers=2)
    reports = {r.mode: r for r in result.reports}
    assert reports["self"].tau == 4.0
    assert 1.0 <= reports["pretrained"].tau <= 4.0
    assert len(result.traces) == 4
    # greedy cells ignore the seed, so both seeds agree exactly
    assert reports["pretrained"].per_seed_tau[0] == reports["pretrained"].per_seed_tau[1]
    [row] = result.significance
    assert row.mode == "self" and row.baseline == "pretrained"
    assert row.two_sided.degenerate
    assert reports["self"].prompts_hash == reports["pretrained"].prompts_hash != ""


def test_run_experiment_reports_missing_cells(verifier, drafter):
    spec = ExperimentSpec(modes=("pretrained", "sd2"), temperatures=(0.0,), corpora=("held",), seeds=(0,))
    with pytest.raises(MissingArtifactError) as e:
        run_experiment(spec, EngineConfig(k=3), verifier, {"pretrained": DraftSetup(drafter)}, {"held": [[1]]})
    assert e.value.missing == ["sd2__held__T0__s0"]
