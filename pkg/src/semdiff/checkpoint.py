"""Checkpoint directories: ``header.json`` plus one MSDT file per parameter."""

import json
import os
from pathlib import Path

from . import tensorio
from .exceptions import DatasetIOError

HEADER = "header.json"


def save_checkpoint(path, state, header, dtype="f64"):
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    names = list(state)
    for name in names:
        tensorio.save(path / "tensors" / f"{name}.msdt", state[name], dtype=dtype)
    payload = {**header, "parameters": names, "dtype": dtype}
    tmp = path / (HEADER + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path / HEADER)


def load_checkpoint(path):
    """Return ``(state, header)``."""
    path = Path(path)
    try:
        header = json.loads((path / HEADER).read_text())
    except FileNotFoundError as exc:
        raise DatasetIOError(f"no checkpoint header in {path}") from exc
    state = {name: tensorio.load(path / "tensors" / f"{name}.msdt") for name in header["parameters"]}
    return state, header
