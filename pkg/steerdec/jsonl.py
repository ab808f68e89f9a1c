import json
from collections.abc import Iterable, Iterator, Mapping
from pathlib import Path
from typing import Any


def write_jsonl(records: Iterable[Mapping[str, Any]], output_file: str | Path) -> int:
    path = Path(output_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def append_jsonl(record: Mapping[str, Any], output_file: str | Path) -> None:
    path = Path(output_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(input_file: str | Path) -> Iterator[dict[str, Any]]:
    with Path(input_file).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)
