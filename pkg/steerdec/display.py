from collections.abc import Sequence
from typing import Any

from colorama import Fore, Style
from tabulate import tabulate

from .bench import SignificanceRow, comparison_table, significance_table
from .lossless import CheckResult
from .models import RunReport

SIGNIFICANCE_LEVEL = 0.05


def _col(color: str, s: Any) -> str:
    return f"{color}{s}{Style.RESET_ALL}" if color else str(s)


def _title(title: str | None) -> None:
    if title:
        print(f"\n{title}\n" + "-" * len(title))


def _fmt(value: Any, digits: int = 3) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def print_comparison(
    reports: Sequence[RunReport], significance: Sequence[SignificanceRow] = (), title: str | None = None
) -> None:
    reports = list(reports)
    if not reports:
        print(f"No runs found{f' for: {title}' if title else ''}.")
        return
    _title(title)
    headers, rows = comparison_table(reports, with_speedup=any(r.tokens_per_second for r in reports))
    better = {
        (s.mode, s.temperature)
        for s in significance
        if s.greater.p_value is not None and s.greater.p_value < SIGNIFICANCE_LEVEL
    }

    def row(values: list[Any]) -> list[str]:
        color = Fore.YELLOW + Style.BRIGHT if (values[0], values[1]) in better else ""
        cells = [values[0], f"{values[1]:g}"] + [_fmt(v) for v in values[2:]]
        return [_col(color, c) for c in cells]

    print(tabulate([row(r) for r in rows], headers=headers, tablefmt="simple"))


def print_significance(rows: Sequence[SignificanceRow], title: str | None = "Welch tests") -> None:
    if not rows:
        return
    _title(title)
    headers, body = significance_table(rows)

    def row(s: SignificanceRow, values: list[Any]) -> list[str]:
        if s.two_sided.degenerate:
            color = Fore.YELLOW
        elif s.two_sided.p_value is not None and s.two_sided.p_value < SIGNIFICANCE_LEVEL:
            color = Fore.GREEN
        else:
            color = ""
        return [_col(color, _fmt(v, 4)) for v in values]

    print(tabulate([row(s, v) for s, v in zip(rows, body)], headers=headers, tablefmt="simple"))


def print_profile(report: RunReport) -> None:
    _title(f"Accepted tokens by position: {report.key}")
    rows = [[f"{center}±8", f"{mean:.3f}", count] for center, (mean, count) in report.positional_profile.items()]
    print(tabulate(rows, headers=["Position", "Mean accepted", "Blocks"], tablefmt="github", stralign="center"))


def print_checks(results: Sequence[CheckResult], title: str | None = "Lossless checks") -> None:
    _title(title)
    rows = [
        [
            r.name,
            _col(Fore.GREEN if r.passed else Fore.RED, "PASS" if r.passed else "FAIL"),
            f"{r.value:.5g}",
            f"{r.threshold:g}",
            r.detail,
        ]
        for r in results
    ]
    print(tabulate(rows, headers=["Check", "Status", "Value", "Threshold", "Detail"], tablefmt="simple"))
    for r in results:
        if not r.passed and r.counterexample:
            print(f"\n{_col(Fore.RED, f'First counterexample ({r.name}):')}\n{r.counterexample}")


def print_training(name: str, curve: Sequence[dict[str, Any]]) -> None:
    if not curve:
        print(f"{name}: no optimisation steps run.")
        return
    first, last = curve[0], curve[-1]
    taus = [r["val_tau"] for r in curve if "val_tau" in r]
    rows = [
        ["steps", len(curve)],
        ["initial loss", f"{first['loss']:.5f}"],
        ["final loss", f"{last['loss']:.5f}"],
        ["final lr", f"{last['lr']:.2e}"],
    ]
    if taus:
        rows.append(["validation tau", f"{taus[-1]:.3f}"])
    _title(name)
    print(tabulate(rows, tablefmt="simple"))
