"""Checkpoint container: one line of JSON header, then DTNS tensors in order.

The header's ``tensors`` list names the payload tensors in declaration order.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import dtns


class CheckpointError(ValueError):
    pass


def write(path: str | os.PathLike, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header, tensors=list(tensors))
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in tensors.values():
            f.write(dtns.encode(arr))


def read(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    name = os.fspath(path)
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{name}: unreadable header ({exc})") from None
        if "tensors" not in header:
            raise CheckpointError(f"{name}: header lacks tensor list")
        tensors = {}
        for key in header["tensors"]:
            try:
                tensors[key] = dtns.read_from(f, f"{name}[{key}]")
            except dtns.DTNSError as exc:
                raise CheckpointError(str(exc)) from None
        if f.read(1):
            raise CheckpointError(f"{name}: trailing bytes after last tensor")
    return header, tensors
