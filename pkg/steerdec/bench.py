"""Metrics, significance tests and the experiment matrix runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from .corpus import prompts_hash
from .errors import ContractError, DomainError, MissingArtifactError
from .jsonl import read_jsonl, write_jsonl
from .models import (
    BlockRecord,
    DecodeMode,
    EngineConfig,
    ExperimentSpec,
    RunReport,
    SignificanceResult,
    report_key,
)
from .specdec import generate
from .steering import SteeringState
from .transformer import TransformerModel

logger = logging.getLogger(__name__)

BUCKET_WIDTH = 16
SELF_MODE = "self"
_WALL_CLOCK_FIELDS = ("tokens_per_second", "alpha")


def block_efficiency(accepted_counts: Sequence[int], k: int | None = None) -> float:
    if len(accepted_counts) == 0:
        raise DomainError("block efficiency of an empty run is undefined")
    counts = np.asarray(accepted_counts, dtype=np.float64)
    if k is not None and ((counts < 0) | (counts > k)).any():
        raise DomainError(f"accepted counts must lie in [0, {k}]")
    return float(counts.mean()) + 1.0


def speedup(candidate: RunReport, baseline: RunReport) -> float:
    for name in ("prompts_hash", "hardware_tag", "max_new_tokens", "temperature", "corpus"):
        if getattr(candidate, name) != getattr(baseline, name):
            raise ContractError(
                f"speedup needs matching {name}: {getattr(candidate, name)!r} != {getattr(baseline, name)!r}"
            )
    if not candidate.tokens_per_second or not baseline.tokens_per_second:
        raise ContractError("speedup needs throughput on both runs")
    return candidate.tokens_per_second / baseline.tokens_per_second


def welch_t_test(
    group_a: Sequence[float], group_b: Sequence[float], alternative: str = "two-sided"
) -> SignificanceResult:
    """Welch's unequal-variance t-test; ``alternative`` refers to mean(a) - mean(b)."""
    if alternative not in ("two-sided", "greater", "less"):
        raise DomainError(f"unknown alternative {alternative!r}")
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DomainError(f"welch test needs at least two samples per group, got {a.size} and {b.size}")
    if a.var(ddof=1) == 0 and b.var(ddof=1) == 0:
        diff = a.mean() - b.mean()
        t = 0.0 if diff == 0 else float(np.copysign(np.inf, diff))
        return SignificanceResult(t, None, float(a.size + b.size - 2), degenerate=True, alternative=alternative)
    res = stats.ttest_ind(a, b, equal_var=False, alternative=alternative)
    return SignificanceResult(float(res.statistic), float(min(1.0, res.pvalue)), float(res.df), alternative=alternative)


def bucket_center(position: int) -> int:
    return BUCKET_WIDTH * (position // BUCKET_WIDTH) + BUCKET_WIDTH // 2


def positional_profile(traces: Iterable[Mapping[str, Any]]) -> dict[int, tuple[float, int]]:
    sums: dict[int, float] = defaultdict(float)
    counts: dict[int, int] = defaultdict(int)
    for record in traces:
        center = bucket_center(int(record["position"]))
        sums[center] += record["accepted"]
        counts[center] += 1
    return {c: (sums[c] / counts[c], counts[c]) for c in sorted(counts)}


def acceptance_by_index(accepted_counts: Sequence[int], k: int) -> list[float]:
    """Fraction of blocks whose i-th drafted token (1-based) was accepted, for i in [1, k]."""
    if not accepted_counts:
        return []
    counts = np.asarray(accepted_counts)
    return [float((counts >= i).mean()) for i in range(1, k + 1)]


@dataclass
class DraftSetup:
    model: TransformerModel
    steering: SteeringState | None = None
    mode: DecodeMode = DecodeMode.PRETRAINED


@dataclass(frozen=True)
class Cell:
    mode: str
    corpus: str
    temperature: float
    seed: int

    @property
    def name(self) -> str:
        return f"{self.mode}__{self.corpus}__T{self.temperature:g}__s{self.seed}"


@dataclass(frozen=True)
class SignificanceRow:
    mode: str
    corpus: str
    temperature: float
    baseline: str
    two_sided: SignificanceResult
    greater: SignificanceResult


@dataclass
class ExperimentResult:
    reports: list[RunReport]
    significance: list[SignificanceRow] = field(default_factory=list)
    traces: dict[str, list[BlockRecord]] = field(default_factory=dict)


def worker_count() -> int:
    value = os.environ.get("SD2_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("ignoring non-integer SD2_THREADS=%r", value)
    return os.cpu_count() or 1


def matrix_cells(spec: ExperimentSpec) -> list[Cell]:
    return [
        Cell(mode, corpus, float(t), int(seed))
        for mode in spec.modes
        for corpus in spec.corpora
        for t in spec.temperatures
        for seed in spec.seeds
    ]


def _engine_for(engine: EngineConfig, setup: DraftSetup, temperature: float, seed: int) -> EngineConfig:
    return dataclasses.replace(engine, temperature=temperature, seed=seed, mode=setup.mode)


def run_cell(
    cell: Cell,
    engine: EngineConfig,
    verifier: TransformerModel,
    setup: DraftSetup,
    prompts: Sequence[Sequence[int]],
) -> list[BlockRecord]:
    config = _engine_for(engine, setup, cell.temperature, cell.seed)
    records: list[BlockRecord] = []
    for i, prompt in enumerate(prompts):
        out = generate(config, verifier, setup.model, setup.steering, prompt, np.random.default_rng([cell.seed, i]))
        for b in out.blocks:
            records.append(
                BlockRecord(
                    block_index=b.block_index,
                    position=b.position,
                    accepted=b.accepted,
                    emitted=b.emitted,
                    drafted=b.drafted,
                    mode=cell.mode,
                    seed=cell.seed,
                    prompt_index=i,
                    corpus=cell.corpus,
                    temperature=cell.temperature,
                )
            )
    logger.debug("cell %s: %d blocks", cell.name, len(records))
    return records


def measure_throughput(
    engine: EngineConfig,
    verifier: TransformerModel,
    setup: DraftSetup,
    prompts: Sequence[Sequence[int]],
    temperature: float,
    seed: int,
) -> float:
    config = _engine_for(engine, setup, temperature, seed)
    generate(config, verifier, setup.model, setup.steering, prompts[0], np.random.default_rng([seed, 0]))  # warmup
    emitted = 0
    start = time.perf_counter()
    for i, prompt in enumerate(prompts):
        out = generate(config, verifier, setup.model, setup.steering, prompt, np.random.default_rng([seed, i]))
        emitted += len(out.tokens)
    elapsed = time.perf_counter() - start
    return emitted / elapsed if elapsed > 0 else 0.0


def evaluate_tau(
    verifier: TransformerModel,
    drafter: TransformerModel,
    steering: SteeringState | None,
    prompts: Sequence[Sequence[int]],
    engine: EngineConfig,
) -> float:
    setup = DraftSetup(drafter, steering, DecodeMode.SD2 if steering is not None else DecodeMode.PRETRAINED)
    cell = Cell(str(setup.mode), "validation", engine.temperature, engine.seed)
    counts = [r["accepted"] for r in run_cell(cell, engine, verifier, setup, prompts)]
    return block_efficiency(counts)


def _tau_std(per_seed: Mapping[int, float]) -> float:
    values = list(per_seed.values())
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def build_reports(
    records: Iterable[Mapping[str, Any]],
    k: int,
    max_new_tokens: int = 0,
    hardware_tag: str = "",
    prompt_hashes: Mapping[str, str] | None = None,
    config_hash: str = "",
    throughput: Mapping[str, float] | None = None,
    baseline: str | None = None,
) -> list[RunReport]:
    """Aggregate block records into one report per (mode, corpus, temperature)."""
    groups: dict[tuple[str, str, float], list[Mapping[str, Any]]] = defaultdict(list)
    for r in records:
        groups[(r["mode"], r["corpus"], float(r["temperature"]))].append(r)
    reports = []
    for (mode, corpus, temperature), rows in sorted(groups.items()):
        rows.sort(key=lambda r: (r["seed"], r["prompt_index"], r["block_index"]))
        counts = [int(r["accepted"]) for r in rows]
        by_seed: dict[int, list[int]] = defaultdict(list)
        for r in rows:
            by_seed[int(r["seed"])].append(int(r["accepted"]))
        report = RunReport(
            mode=mode,
            corpus=corpus,
            temperature=temperature,
            k=k,
            seeds=sorted(by_seed),
            accepted_counts=counts,
            tau=block_efficiency(counts, k),
            per_seed_tau={s: block_efficiency(c) for s, c in sorted(by_seed.items())},
            tokens_emitted=sum(int(r["emitted"]) for r in rows),
            tokens_computed=sum(int(r.get("drafted", k)) + 1 for r in rows),
            max_new_tokens=max_new_tokens,
            baseline=baseline,
            positional_profile=positional_profile(rows),
            acceptance_by_index=acceptance_by_index(counts, k),
            hardware_tag=hardware_tag,
            prompts_hash=(prompt_hashes or {}).get(corpus, ""),
            config_hash=config_hash,
        )
        if throughput is not None:
            report.tokens_per_second = throughput.get(report.key)
        reports.append(report)
    if throughput is not None and baseline is not None:
        base = {(r.corpus, r.temperature): r for r in reports if r.mode == baseline}
        for r in reports:
            ref = base.get((r.corpus, r.temperature))
            if ref is not None and r.tokens_per_second and ref.tokens_per_second:
                r.alpha = speedup(r, ref)
    return reports


def significance(
    reports: Sequence[RunReport], baseline: str, unit: str = "seed"
) -> list[SignificanceRow]:
    base = {(r.corpus, r.temperature): r for r in reports if r.mode == baseline}
    rows = []
    for r in reports:
        ref = base.get((r.corpus, r.temperature))
        if r.mode == baseline or ref is None:
            continue
        if unit == "block":
            a, b = r.accepted_counts, ref.accepted_counts
        else:
            a, b = list(r.per_seed_tau.values()), list(ref.per_seed_tau.values())
        try:
            two_sided = welch_t_test(a, b)
            greater = welch_t_test(a, b, alternative="greater")
        except DomainError as e:
            logger.debug("no significance row for %s: %s", r.key, e)
            continue
        rows.append(SignificanceRow(r.mode, r.corpus, r.temperature, baseline, two_sided, greater))
    return rows


def run_experiment(
    spec: ExperimentSpec,
    engine: EngineConfig,
    verifier: TransformerModel,
    drafters: Mapping[str, DraftSetup],
    prompts: Mapping[str, Sequence[Sequence[int]]],
    hardware_tag: str = "",
    config_hash: str = "",
    workers: int | None = None,
) -> ExperimentResult:
    cells = matrix_cells(spec)
    missing = [c.name for c in cells if c.mode not in drafters or c.corpus not in prompts]
    if missing:
        raise MissingArtifactError(missing)

    workers = workers or worker_count()
    logger.info("running %d cells on %d workers", len(cells), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(
            pool.map(lambda c: run_cell(c, engine, verifier, drafters[c.mode], prompts[c.corpus]), cells)
        )
    traces = {c.name: records for c, records in zip(cells, results)}

    throughput: dict[str, float] | None = None
    if spec.throughput:
        # one cell at a time so timings do not contend
        throughput = {}
        for mode in spec.modes:
            for corpus in spec.corpora:
                for t in spec.temperatures:
                    throughput[report_key(mode, corpus, float(t))] = measure_throughput(
                        engine, verifier, drafters[mode], prompts[corpus], float(t), int(spec.seeds[0])
                    )

    baseline = spec.baseline if spec.baseline in spec.modes else None
    reports = build_reports(
        (r for records in results for r in records),
        engine.k,
        engine.max_new_tokens,
        hardware_tag,
        {name: prompts_hash(p) for name, p in prompts.items()},
        config_hash,
        throughput,
        baseline,
    )
    rows = significance(reports, baseline, spec.significance_unit) if baseline is not None else []
    return ExperimentResult(reports, rows, traces)


def comparison_table(reports: Sequence[RunReport], with_speedup: bool = False) -> tuple[list[str], list[list[Any]]]:
    """One row per (mode, temperature), tau (std when seeds > 1, alpha) columns per corpus."""
    corpora = sorted({r.corpus for r in reports})
    with_std = any(len(r.seeds) > 1 for r in reports)
    per_corpus = ["tau"] + (["tau_std"] if with_std else []) + ["accepted"] + (["alpha"] if with_speedup else [])
    headers = ["mode", "temperature"] + [f"{col}_{c}" for c in corpora for col in per_corpus]
    by_key = {(r.mode, r.temperature, r.corpus): r for r in reports}
    rows = []
    for mode, temperature in sorted({(r.mode, r.temperature) for r in reports}):
        row: list[Any] = [mode, temperature]
        for c in corpora:
            r = by_key.get((mode, temperature, c))
            if r is None:
                row += [None] * len(per_corpus)
                continue
            row.append(round(r.tau, 6))
            if with_std:
                row.append(round(_tau_std(r.per_seed_tau), 6))
            row.append(round(r.mean_accepted, 6))
            if with_speedup:
                row.append(None if r.alpha is None else round(r.alpha, 4))
        rows.append(row)
    return headers, rows


def significance_table(rows: Sequence[SignificanceRow]) -> tuple[list[str], list[list[Any]]]:
    headers = ["mode", "baseline", "corpus", "temperature", "t", "dof", "p_two_sided", "p_greater", "degenerate"]
    body = [
        [
            s.mode,
            s.baseline,
            s.corpus,
            s.temperature,
            round(s.two_sided.t_statistic, 6),
            round(s.two_sided.dof, 6),
            None if s.two_sided.p_value is None else round(s.two_sided.p_value, 6),
            None if s.greater.p_value is None else round(s.greater.p_value, 6),
            s.two_sided.degenerate,
        ]
        for s in rows
    ]
    return headers, body


def _csv(headers: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def _stable_report(r: RunReport) -> dict[str, Any]:
    d = r.to_dict()
    for name in _WALL_CLOCK_FIELDS:
        d.pop(name, None)
    return d


def write_reports(
    reports: Sequence[RunReport], rows: Sequence[SignificanceRow], out_dir: str | Path
) -> str:
    """Write tables under ``out_dir``; returns a digest of everything except wall-clock numbers."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profile_rows = [
        [r.mode, r.corpus, r.temperature, center, round(mean, 6), count]
        for r in reports
        for center, (mean, count) in r.positional_profile.items()
    ]
    files = {
        "runs.json": json.dumps([_stable_report(r) for r in reports], indent=2, sort_keys=True) + "\n",
        "comparison.csv": _csv(*comparison_table(reports)),
        "positional_profile.csv": _csv(["mode", "corpus", "temperature", "center", "mean_accepted", "count"], profile_rows),
        "significance.csv": _csv(*significance_table(rows)),
    }
    digest = hashlib.sha256()
    for name, content in files.items():
        (out / name).write_text(content, encoding="utf-8")
        digest.update(name.encode() + b"\0" + content.encode("utf-8"))
    throughput = {r.key: {"tokens_per_second": r.tokens_per_second, "alpha": r.alpha, "hardware_tag": r.hardware_tag} for r in reports}
    (out / "throughput.json").write_text(json.dumps(throughput, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    value = digest.hexdigest()
    (out / "digest.txt").write_text(value + "\n", encoding="utf-8")
    return value


def write_traces(traces: Mapping[str, Sequence[BlockRecord]], trace_dir: str | Path) -> None:
    for name, records in traces.items():
        write_jsonl(records, Path(trace_dir) / f"{name}.jsonl")


def load_traces(trace_dir: str | Path) -> list[dict[str, Any]]:
    path = Path(trace_dir)
    files = sorted(path.glob("*.jsonl"))
    if not files:
        raise MissingArtifactError([str(path / "*.jsonl")])
    return [record for f in files for record in read_jsonl(f)]


def load_throughput(report_dir: str | Path) -> dict[str, float]:
    path = Path(report_dir) / "throughput.json"
    if not path.exists():
        return {}
    data = json.loads(path.read_text(encoding="utf-8"))
    return {key: v["tokens_per_second"] for key, v in data.items() if v.get("tokens_per_second")}
