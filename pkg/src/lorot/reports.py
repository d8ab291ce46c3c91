"""Report files: JSON metrics, CSV tables, raw score vectors.

Every report embeds the config hash and seeds. Checksums cover only the
deterministic content, so a rerun with the same seed reproduces them exactly
even though timestamps differ.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

# keys ignored by report_checksum (timing and environment, not results)
VOLATILE_KEYS = ("created_at", "started_at", "finished_at", "wall_time_s", "code_version")


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_report(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv_table(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("cannot write an empty table")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def save_scores(path: str | Path, scores: np.ndarray) -> None:
    """One score per line at full float64 precision, so stored vectors
    reproduce report numbers exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(scores, dtype=np.float64), fmt="%.17g")


def load_scores(path: str | Path) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(path, dtype=np.float64))


def _strip_volatile(value):
    if isinstance(value, dict):
        return {k: _strip_volatile(v) for k, v in value.items() if k not in VOLATILE_KEYS}
    if isinstance(value, list):
        return [_strip_volatile(v) for v in value]
    return value


def report_checksum(payload: dict) -> str:
    """Digest of the deterministic report content."""
    canonical = json.dumps(_strip_volatile(payload), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
