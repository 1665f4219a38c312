"""JSONL persistence with exact-key schema checks."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import SchemaViolation


def _check_keys(rec: dict, schema: tuple[str, ...], where: str) -> None:
    keys, want = set(rec), set(schema)
    if keys != want:
        missing = sorted(want - keys)
        extra = sorted(keys - want)
        raise SchemaViolation(
            f"{where}: record keys do not match schema"
            f" (missing={missing}, unknown={extra})"
        )


def write_jsonl(path: str | Path, records: list[dict], schema: tuple[str, ...] | None = None) -> None:
    """Write one compact JSON object per line; validates keys when a schema is given."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            if schema is not None:
                _check_keys(rec, schema, f"{path}:{i + 1}")
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")


def read_jsonl(path: str | Path, schema: tuple[str, ...] | None = None) -> list[dict]:
    """Read a JSONL file back into dicts; blank lines are skipped."""
    path = Path(path)
    records: list[dict] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if schema is not None:
                _check_keys(rec, schema, f"{path}:{lineno}")
            records.append(rec)
    return records
