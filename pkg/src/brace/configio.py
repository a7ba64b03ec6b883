"""Config files, run manifests, and newline-delimited JSON logs.

All run artifacts are written without timestamps so that reruns with the
same manifest produce byte-identical output.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from typing import Any, Iterable, Iterator


class ConfigError(Exception):
    """Raised when a config file cannot be parsed or a key has a bad value.

    ``line`` holds the 1-based line number when the failure is tied to one.
    """

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


def load_config(path: str) -> dict[str, dict[str, str]]:
    """Parse a sectioned key=value file into nested string dicts."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except (configparser.MissingSectionHeaderError, configparser.DuplicateOptionError,
            configparser.DuplicateSectionError) as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"config parse error in {path} at line {line}", line=line) from exc
    except configparser.ParsingError as exc:
        errors = getattr(exc, "errors", [])
        line = errors[0][0] if errors else None
        raise ConfigError(f"config parse error in {path} at line {line}", line=line) from exc
    return {section: dict(parser.items(section)) for section in parser.sections()}


def coerce(raw: dict[str, str], key: str, kind: type, default: Any = None) -> Any:
    """Fetch ``key`` from a section dict, converting to ``kind``.

    Booleans accept true/false/1/0/yes/no. A missing key returns ``default``.
    """
    if key not in raw:
        return default
    text = raw[key].strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} (expected {kind.__name__})") from exc


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dump_json_line(record: dict) -> str:
    """Serialize one record compactly; key order is the insertion order."""
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def write_ndjson(path: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dump_json_line(record))
            fh.write("\n")


def read_ndjson(path: str) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_manifest(out_dir: str, subcommand: str, seed: int | None,
                   config_path: str | None, args: dict | None = None) -> str:
    """Write manifest.json describing a run; must happen before other outputs.

    The config hash covers the file bytes, so a rerun against an edited
    config is distinguishable even when the path is unchanged.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "seed": seed,
        "config_path": config_path,
        "config_sha256": sha256_file(config_path) if config_path else None,
        "out_dir": os.path.abspath(out_dir),
        "args": args or {},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
