# src/flowtsvad/checkpoint.py
"""
Checkpoint container.

  b"FTSVCKPT" | uint32 format version | uint32 header length | JSON header | tensor bytes

The JSON header (sorted keys) holds kind, hyperparameters, stages_completed,
seed and a tensor table of {name, shape, dtype, offset, nbytes}; offsets are
relative to the start of the tensor bytes. Tensors are stored little-endian
as <f4 or <f8 in the table's order.
"""
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch

from src.flowtsvad.errors import CheckpointError, MissingArtifactError

MAGIC = b"FTSVCKPT"
FORMAT_VERSION = 1
KINDS = ("label-ae", "flow-tsvad", "baseline")
DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


@dataclass
class Checkpoint:
    kind: str
    hyperparameters: dict
    tensors: Dict[str, torch.Tensor]
    stages_completed: List[str] = field(default_factory=list)
    seed: int = 0

    def header(self) -> dict:
        table, offset = [], 0
        for name, t in self.tensors.items():
            if t.dtype not in DTYPES:
                raise CheckpointError(f"tensor {name}: unsupported dtype {t.dtype}")
            nbytes = t.numel() * t.element_size()
            table.append({
                "name": name, "shape": list(t.shape), "dtype": DTYPES[t.dtype],
                "offset": offset, "nbytes": nbytes,
            })
            offset += nbytes
        return {
            "kind": self.kind,
            "hyperparameters": self.hyperparameters,
            "stages_completed": list(self.stages_completed),
            "seed": self.seed,
            "tensors": table,
        }


def from_module(kind: str, module: torch.nn.Module, hyperparameters: dict,
                stages_completed=(), seed: int = 0) -> Checkpoint:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}, expected one of {KINDS}")
    tensors = {name: t.detach().cpu() for name, t in module.state_dict().items()}
    return Checkpoint(kind, hyperparameters, tensors, list(stages_completed), seed)


def load_into(checkpoint: Checkpoint, module: torch.nn.Module) -> torch.nn.Module:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(checkpoint.tensors))
    unexpected = sorted(set(checkpoint.tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"{checkpoint.kind} checkpoint does not fit model: missing {missing}, unexpected {unexpected}"
        )
    for name, t in checkpoint.tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(t.shape)} vs model {tuple(expected[name].shape)}"
            )
    module.to(next(iter(checkpoint.tensors.values())).dtype if checkpoint.tensors else torch.float32)
    module.load_state_dict(checkpoint.tensors)
    module.eval()
    return module


def save_checkpoint(checkpoint: Checkpoint, path: str):
    header = json.dumps(checkpoint.header(), sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for t in checkpoint.tensors.values():
            f.write(t.contiguous().numpy().astype(DTYPES[t.dtype], copy=False).tobytes())


def load_checkpoint(path: str, kind: str = None) -> Checkpoint:
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    head = len(MAGIC) + 8
    if len(blob) < head:
        raise CheckpointError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", blob[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(blob[head:head + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}")
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")

    data = blob[head + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        array = np.frombuffer(data[lo:hi], dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
    return Checkpoint(
        kind=header["kind"],
        hyperparameters=header["hyperparameters"],
        tensors=tensors,
        stages_completed=header["stages_completed"],
        seed=header["seed"],
    )
