"""Append-only line-delimited metrics stream with a fixed schema version."""

from __future__ import annotations

import json
import math
import os

SCHEMA_VERSION = 1


def _sanitize(obj):
    """JSON has no NaN/Inf literals; encode them as None."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


class MetricsWriter:
    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._f = open(path, "a", buffering=1)

    def write(self, kind: str, record: dict) -> None:
        payload = {"v": SCHEMA_VERSION, "kind": kind}
        payload.update(_sanitize(record))
        self._f.write(json.dumps(payload, sort_keys=True) + "\n")

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path: str, kind: str | None = None) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("v") != SCHEMA_VERSION:
                raise ValueError(f"unknown metrics schema version {rec.get('v')}")
            if kind is None or rec.get("kind") == kind:
                out.append(rec)
    return out
