"""On-disk formats for FOV corpora.

A corpus directory holds::

    images/<fov>.ppm     8-bit binary PPM (P6)
    cells/<fov>.pgm      16-bit binary PGM (P5), instance ids
    nuclei/<fov>.pgm     16-bit binary PGM (P5), instance ids
    metadata.jsonl       one record per FOV, at least fov/assay/indication

Netpbm stores 16-bit samples big-endian.
"""

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DatasetIOError

_HEADER = re.compile(rb"^(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def _atomic_write(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _read_netpbm(path, magic):
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetIOError(f"missing file {path}") from exc
    m = _HEADER.match(buf)
    if not m or m.group(1) != magic:
        raise DatasetIOError(f"{path}: not a binary {magic.decode()} file")
    width, height, maxval = (int(g) for g in m.group(2, 3, 4))
    return buf[m.end():], width, height, maxval


def write_pgm16(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DatasetIOError(f"instance map must be 2-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise DatasetIOError("instance ids must fit in 16 bits")
    h, w = labels.shape
    header = f"P5\n{w} {h}\n65535\n".encode()
    _atomic_write(path, header + labels.astype(">u2").tobytes())


def read_pgm16(path):
    body, w, h, maxval = _read_netpbm(path, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(body, dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(np.int64)


def write_ppm(path, image):
    """Write a ``(3, H, W)`` float image in [0, 1] as 8-bit PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DatasetIOError(f"RGB image must be (3, H, W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode()
    _atomic_write(path, header + pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    body, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval > 255:
        raise DatasetIOError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / maxval


def quantize(image):
    """Round a [0, 1] image onto the 8-bit grid used on disk."""
    return np.round(np.clip(image, 0.0, 1.0) * 255) / 255


def read_jsonl(path):
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError as exc:
        raise DatasetIOError(f"missing file {path}") from exc


def write_jsonl(path, records):
    payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _atomic_write(path, payload.encode())


@dataclass
class Fov:
    """One field of view: RGB image in [0, 1] plus cell and nucleus instance maps."""

    fov_id: str
    image: np.ndarray
    cells: np.ndarray
    nuclei: np.ndarray
    assay: str
    indication: str
    meta: dict = field(default_factory=dict)

    @property
    def group(self):
        return f"{self.assay}/{self.indication}"


def save_fov(root, fov):
    root = Path(root)
    write_ppm(root / "images" / f"{fov.fov_id}.ppm", fov.image)
    write_pgm16(root / "cells" / f"{fov.fov_id}.pgm", fov.cells)
    write_pgm16(root / "nuclei" / f"{fov.fov_id}.pgm", fov.nuclei)


def fov_record(fov):
    return {**fov.meta, "fov": fov.fov_id, "assay": fov.assay, "indication": fov.indication}


def save_corpus(root, fovs):
    root = Path(root)
    for fov in fovs:
        save_fov(root, fov)
    write_jsonl(root / "metadata.jsonl", [fov_record(f) for f in fovs])


def load_corpus(root, require_masks=True):
    """Load every FOV listed in ``root/metadata.jsonl``."""
    root = Path(root)
    fovs = []
    for rec in read_jsonl(root / "metadata.jsonl"):
        missing = {"fov", "assay", "indication"} - set(rec)
        if missing:
            raise DatasetIOError(f"{root / 'metadata.jsonl'}: record lacks {sorted(missing)}")
        fid = rec["fov"]
        image = read_ppm(root / "images" / f"{fid}.ppm")
        if require_masks or (root / "cells" / f"{fid}.pgm").exists():
            cells = read_pgm16(root / "cells" / f"{fid}.pgm")
            nuclei = read_pgm16(root / "nuclei" / f"{fid}.pgm")
        else:
            cells = nuclei = None
        meta = {k: v for k, v in rec.items() if k not in ("fov", "assay", "indication")}
        fovs.append(Fov(fid, image, cells, nuclei, rec["assay"], rec["indication"], meta))
    return fovs
