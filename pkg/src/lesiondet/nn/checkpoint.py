"""Checkpoint serialization: a named-tensor archive plus a JSON manifest.

Format is a single .npz: every parameter stored as little-endian float32
under its dotted name, the manifest as utf-8 bytes under ``__manifest__``.
"""
from __future__ import annotations

import hashlib
import json
import zipfile

import numpy as np

MANIFEST_KEY = "__manifest__"


def save_checkpoint(path, named_arrays: dict[str, np.ndarray], manifest: dict) -> None:
    payload = {name: np.ascontiguousarray(a, dtype="<f4") for name, a in named_arrays.items()}
    if MANIFEST_KEY in payload:
        raise ValueError(f"parameter name {MANIFEST_KEY!r} is reserved")
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **{MANIFEST_KEY: blob}, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path) as z:
            if MANIFEST_KEY not in z:
                raise ValueError(f"{path}: not a checkpoint (missing manifest entry)")
            manifest = json.loads(bytes(z[MANIFEST_KEY].tobytes()).decode("utf-8"))
            arrays = {k: z[k] for k in z.files if k != MANIFEST_KEY}
    except (OSError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt or unreadable checkpoint: {e}") from e
    except ValueError as e:
        if "not a checkpoint" in str(e):
            raise
        raise ValueError(f"{path}: corrupt or unreadable checkpoint: {e}") from e
    return arrays, manifest


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
