"""Output writers: canonical JSON payloads with reproducibility metadata and
CSV emitters for the plot-data products.  Payloads are byte-identical across
reruns of the same config except for the timestamp field, which lives at a
fixed key so consumers can strip it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

from . import __version__


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def wrap_payload(config: dict, body: dict) -> dict:
    return {
        "config": config,
        "config_hash": config_hash(config),
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        **body,
    }


def write_json(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def _jsonable(obj):
    try:
        import numpy as np

        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        if isinstance(obj, (np.bool_,)):
            return bool(obj)
    except ImportError:
        pass
    return str(obj)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(c) for c in row])
    return path


def _csv_cell(c):
    if isinstance(c, float):
        return format(c, ".17g")
    return c


def strip_timestamp(text: str) -> str:
    """Payload text minus the timestamp line, for byte-identity comparisons."""
    return "\n".join(
        line for line in text.splitlines() if '"timestamp"' not in line
    )
