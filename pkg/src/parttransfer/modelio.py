"""Model files: one JSON header line, then an FVEC block with one row per weight vector."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .features import pack_fvec, unpack_fvec


def write_model(path: str | os.PathLike, header: dict[str, Any], rows: np.ndarray) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    if b"\n" in head:
        raise ValueError("model header must serialize to a single line")
    Path(path).write_bytes(head + b"\n" + pack_fvec(rows))


def read_model(path: str | os.PathLike, kind: str) -> tuple[dict[str, Any], np.ndarray]:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing model header")
    header = json.loads(buf[:nl].decode("utf-8"))
    if header.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} model, found {header.get('kind')!r}")
    rows, end = unpack_fvec(buf, nl + 1, source=str(path))
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after weights")
    return header, rows.astype(np.float64)
