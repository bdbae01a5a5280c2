"""Plain-text named-tensor files.

Each tensor is a header ``name ndim d1 d2 ...`` followed by one line of
space-separated values in shortest round-trip form.  Tensors are separated
by blank lines.  Order is preserved on read.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np


def dumps(tensors: Mapping[str, np.ndarray]) -> str:
    blocks = []
    for name, value in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"tensor name must be non-empty without whitespace: {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        header = " ".join([name, str(arr.ndim), *map(str, arr.shape)])
        body = " ".join(repr(float(x)) for x in arr.reshape(-1))
        blocks.append(f"{header}\n{body}\n")
    return "\n".join(blocks)


def loads(text: str) -> dict[str, np.ndarray]:
    lines = text.splitlines()
    out: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) < 2:
            raise ValueError(f"line {i + 1}: malformed header {lines[i]!r}")
        name, ndim = head[0], int(head[1])
        shape = tuple(int(x) for x in head[2:])
        if len(shape) != ndim:
            raise ValueError(f"line {i + 1}: header declares ndim={ndim} but lists {len(shape)} dims")
        body = lines[i + 1] if i + 1 < len(lines) else ""
        values = np.array([float(x) for x in body.split()], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise ValueError(f"tensor {name!r}: expected {expected} values, found {values.size}")
        if name in out:
            raise ValueError(f"duplicate tensor name {name!r}")
        out[name] = values.reshape(shape)
        i += 2
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(dumps(tensors), encoding="utf-8")


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_text(encoding="utf-8"))
