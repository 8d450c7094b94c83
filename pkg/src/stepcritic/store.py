"""Flat-file storage: line-delimited JSON records and the run config."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .types import Question, SearchConfig

SCHEMA_VERSION = 1
SAMPLES_SCHEMA = "stepcritic.samples/1"
TRACES_SCHEMA = "stepcritic.traces/1"
REPORT_SCHEMA = "stepcritic.report/1"


class InputError(Exception):
    """Unreadable or malformed input file."""


def header(schema: str, config: SearchConfig | None = None, **extra: Any) -> dict[str, Any]:
    rec = {"record": "header", "schema": schema, "schema_version": SCHEMA_VERSION,
           "config_hash": config.hash() if config else None}
    rec.update(extra)
    return rec


def dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False)


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    write_atomic(path, "".join(dumps(r) + "\n" for r in records))


@dataclass
class JsonlContents:
    header: dict[str, Any] | None
    rows: list[tuple[int, dict[str, Any]]]
    malformed: list[tuple[int, str]] = field(default_factory=list)


def read_jsonl(path: str | Path) -> JsonlContents:
    """Parse a record file.  A leading ``{"record": "header"}`` line is split
    off; undecodable lines are reported by 1-based line number."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    contents = JsonlContents(header=None, rows=[])
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            contents.malformed.append((lineno, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            contents.malformed.append((lineno, "record is not an object"))
            continue
        if obj.get("record") == "header" and contents.header is None and not contents.rows:
            contents.header = obj
            continue
        contents.rows.append((lineno, obj))
    return contents


def load_questions(path: str | Path) -> list[Question]:
    contents = read_jsonl(path)
    if contents.malformed:
        lineno, msg = contents.malformed[0]
        raise InputError(f"{path}:{lineno}: {msg}")
    questions, seen = [], set()
    for lineno, obj in contents.rows:
        try:
            q = Question.from_dict(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: bad question record ({exc})") from exc
        if q.id in seen:
            raise InputError(f"{path}:{lineno}: duplicate question id {q.id!r}")
        seen.add(q.id)
        questions.append(q)
    return questions


@dataclass
class BackendSettings:
    """Everything about *where* replies come from; none of it affects the
    config hash."""

    base_url: str | None = None
    model: str = "default"
    critic_model: str | None = None
    critic_base_url: str | None = None
    api_key_env: str = "STEPCRITIC_API_KEY"
    timeout: float = 120.0
    retries: int = 3
    backoff: float = 0.5
    score_fallback: float | None = None
    templates_dir: str | None = None
    parallelism: int = 1
    mock_script: str | None = None
    mock_default: str = "echo"
    synthetic: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BackendSettings:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown backend keys: {', '.join(unknown)}")
        return cls(**data)


def load_config(path: str | Path | None) -> tuple[SearchConfig, BackendSettings]:
    """Read a TOML config: search settings at top level, backend settings in
    a ``[backend]`` table.  ``None`` gives the defaults."""
    if path is None:
        return SearchConfig(), BackendSettings()
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"config {path} is not valid TOML: {exc}") from exc
    backend = data.pop("backend", {})
    try:
        config = SearchConfig.from_dict(data)
        settings = BackendSettings.from_dict(backend)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config {path}: {exc}") from exc
    base = path.parent
    for name in ("mock_script", "templates_dir"):
        value = getattr(settings, name)
        if value and not Path(value).is_absolute():
            setattr(settings, name, str(base / value))
    return config, settings
