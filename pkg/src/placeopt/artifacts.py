"""Deterministic artifact serialization.

Every artifact is canonical JSON (sorted keys, fixed separators, no
timestamps) carrying a schema tag and the hash of the configuration that
produced it, so identical inputs yield byte-identical files.
"""
from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def array_to_payload(arr: np.ndarray) -> dict:
    return {
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
    }


def array_from_payload(payload: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(payload["data"]), dtype=payload["dtype"])
    return arr.reshape(payload["shape"]).copy()


def write_artifact(path: str | Path, kind: str, payload: dict, config: dict) -> None:
    document = {
        "schema": {"kind": kind, "version": SCHEMA_VERSION},
        "config_hash": config_hash(config),
        "payload": payload,
    }
    Path(path).write_text(canonical_json(document) + "\n")


def read_artifact(path: str | Path, kind: str) -> dict:
    document = json.loads(Path(path).read_text())
    schema = document.get("schema", {})
    if schema.get("kind") != kind:
        raise ValueError(f"expected {kind!r} artifact, found {schema.get('kind')!r} in {path}")
    if schema.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported artifact version {schema.get('version')} in {path}")
    return document["payload"]
