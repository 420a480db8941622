"""Versioned headers, config digests and line-delimited JSON files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable


class SchemaError(ValueError):
    pass


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical(config).encode()).hexdigest()[:16]


def make_header(schema: str, seed: int, config: dict, **extra) -> dict:
    return {"schema": schema, "seed": seed, "config_digest": config_digest(config), **extra}


def write_jsonl(path: Path | str, header: dict, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")
            n += 1
    return n


def read_jsonl(path: Path | str, schema: str) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty file")
    check_schema(lines[0], schema, path)
    return lines[0], lines[1:]


def check_schema(header: dict, schema: str, source="input") -> None:
    if header.get("schema") != schema:
        raise SchemaError(f"{source}: expected schema {schema!r}, found {header.get('schema')!r}")


def write_json(path: Path | str, header: dict, body: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"header": header, **body}, indent=2) + "\n")


def read_json(path: Path | str, schema: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    check_schema(data.get("header", {}), schema, path)
    return data
