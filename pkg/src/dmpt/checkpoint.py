"""Checkpoint file format (``DMPTCK1``).

Text header, one record per line::

    DMPTCK1
    step=<int>
    num_ids=<int>
    config <key>=<value>          (one line per RunConfig field)
    tensor <name> <shape>         (shape as comma-separated extents, "-" for scalars)
    end

followed by the tensors' little-endian float64 values, concatenated in
header order, each row-major.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_lines
from .errors import FormatError, LengthError

MAGIC = "DMPTCK1"


@dataclass
class CheckpointData:
    step: int
    num_ids: int
    config: RunConfig
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str | os.PathLike, ckpt: CheckpointData) -> None:
    lines = [MAGIC, f"step={ckpt.step}", f"num_ids={ckpt.num_ids}"]
    lines += [f"config {line}" for line in ckpt.config.to_lines()]
    chunks = []
    for name, arr in ckpt.tensors.items():
        if any(ch.isspace() for ch in name):
            raise FormatError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(n) for n in arr.shape) if arr.ndim else "-"
        lines.append(f"tensor {name} {shape}")
        chunks.append(arr.astype("<f8").tobytes())
    lines.append("end")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> CheckpointData:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode() + b"\n") or cut < 0:
        raise FormatError(f"{path}: not a {MAGIC} checkpoint")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = memoryview(raw)[cut + len(marker):]
    step = num_ids = None
    config_lines, specs = [], []
    for line in header[1:]:
        if line.startswith("step="):
            step = int(line[5:])
        elif line.startswith("num_ids="):
            num_ids = int(line[8:])
        elif line.startswith("config "):
            config_lines.append(line[7:])
        elif line.startswith("tensor "):
            _, name, shape = line.split(" ")
            specs.append((name, () if shape == "-" else tuple(int(n) for n in shape.split(","))))
        else:
            raise FormatError(f"{path}: unexpected header line {line!r}")
    if step is None or num_ids is None:
        raise FormatError(f"{path}: header lacks step or num_ids")
    expected = sum(int(np.prod(shape)) * 8 for _, shape in specs)
    if len(payload) != expected:
        raise LengthError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    tensors, offset = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape)) * 8
        tensors[name] = np.frombuffer(payload[offset:offset + n], dtype="<f8").astype(np.float64).reshape(shape)
        offset += n
    return CheckpointData(step, num_ids, RunConfig(**parse_lines(config_lines)), tensors)


def frozen_checksum(model) -> str:
    """SHA-256 over the names and bytes of every frozen tensor."""
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters(), key=lambda item: item[0]):
        if t.frozen:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def full_checksum(model) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters(), key=lambda item: item[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
