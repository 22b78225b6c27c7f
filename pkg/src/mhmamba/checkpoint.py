"""Checkpoint file: text header of (name, shape, offset) rows, then float32 LE payload.

    mhmamba-checkpoint 1
    params <n>
    <name>\t<d0,d1,...>\t<offset in elements>      (n rows)
    payload <bytes>
    end
    <payload bytes>

Scalars are written with an empty shape field.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "mhmamba-checkpoint 1"
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    rows, chunks, offset = [], [], 0
    for name, arr in state.items():
        if any(c in name for c in "\t\n"):
            raise CheckpointError(f"parameter name {name!r} contains whitespace separators")
        a = np.require(np.asarray(arr, dtype=_F32), requirements="C")
        rows.append(f"{name}\t{','.join(str(n) for n in a.shape)}\t{offset}")
        chunks.append(a.tobytes())
        offset += a.size
    payload = b"".join(chunks)
    header = "\n".join([MAGIC, f"params {len(rows)}", *rows, f"payload {len(payload)}", "end"]) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.encode("utf-8") + payload)
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: header ends unexpectedly")
        text = blob[pos:end].decode("utf-8")
        pos = end + 1
        return text

    if line() != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    head = line().split()
    if len(head) != 2 or head[0] != "params":
        raise CheckpointError(f"{path}: expected 'params <n>'")
    entries = []
    for _ in range(int(head[1])):
        parts = line().split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"{path}: malformed parameter row {parts!r}")
        shape = tuple(int(n) for n in parts[1].split(",")) if parts[1] else ()
        entries.append((parts[0], shape, int(parts[2])))
    tail = line().split()
    if len(tail) != 2 or tail[0] != "payload":
        raise CheckpointError(f"{path}: expected 'payload <bytes>'")
    if line() != "end":
        raise CheckpointError(f"{path}: missing 'end' marker")
    payload = blob[pos:]
    if len(payload) != int(tail[1]):
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header says {tail[1]}")
    flat = np.frombuffer(payload, dtype=_F32)
    out = {}
    for name, shape, off in entries:
        n = int(np.prod(shape)) if shape else 1
        if off + n > flat.size:
            raise CheckpointError(f"{path}: {name} extends past the payload")
        out[name] = flat[off:off + n].reshape(shape).astype(np.float32)
    return out
