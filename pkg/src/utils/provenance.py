"""Provenance helpers: content hashing and deterministic artifact writers."""

import csv
import json
import hashlib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np


def canonical_json(payload: Any) -> str:
    """Serialise a JSON-compatible object with sorted keys and no whitespace noise."""
    return json.dumps(to_jsonable(payload), sort_keys=True, separators=(',', ':'))


def generate_content_hash(payload: Any) -> str:
    """Generate the SHA256 hash of a configuration or any JSON-compatible payload.

    Args:
        payload: Content to hash

    Returns:
        Hex digest of the canonical JSON form
    """
    return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()


def short_hash(payload: Any, length: int = 12) -> str:
    """Shortened content hash used in run identifiers."""
    return generate_content_hash(payload)[:length]


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and scalars into plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        x = float(value)
        if np.isnan(x):
            return 'nan'
        if np.isinf(x):
            return 'inf' if x > 0 else '-inf'
        return x
    if isinstance(value, Path):
        return str(value)
    return value


def format_float(x: float) -> str:
    """Round-trip exact float formatting for CSV output."""
    return format(float(x), '.17g')


def write_json(path: Path, payload: Dict[str, Any], config_hash: str) -> Path:
    """Write a JSON artifact stamped with the config hash.

    Args:
        path: Destination file
        payload: Document body
        config_hash: Hash of the experiment configuration

    Returns:
        Path of the written file
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {'_provenance': {'config_hash': config_hash}}
    document.update(to_jsonable(payload))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=False)
        f.write('\n')
    return path


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]], config_hash: str) -> Path:
    """Write a CSV artifact whose first line is a provenance comment.

    Args:
        path: Destination file
        columns: Header names
        rows: Row values; floats are written with 17 significant digits
        config_hash: Hash of the experiment configuration

    Returns:
        Path of the written file
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(list(columns))
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    """Read a CSV artifact written by `write_csv`, skipping the provenance comment."""
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line for line in f if not line.startswith('#')]
    return list(csv.DictReader(lines))
