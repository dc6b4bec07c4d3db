"""Self-describing binary checkpoint container.

Layout: magic ``RVQC``, u32 format version, u64 JSON header length, the JSON
header, then the raw little-endian float64 payload of every array listed in
the header (parameter values followed by their Adam moments).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVQC"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Raised on a malformed checkpoint file."""


def save_container(path, arch: dict, params: dict, seed: int, extra: dict | None = None):
    """Write named parameters (with optimizer state) and an architecture spec."""
    entries = []
    blobs = []
    for name, p in sorted(params.items()):
        for suffix, arr in (("", p.data), (".adam_m", p.adam_m), (".adam_v", p.adam_v)):
            entries.append({"name": name + suffix, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "arch": arch,
        "seed": int(seed),
        "extra": extra or {},
        "steps": {name: int(p.adam_step) for name, p in sorted(params.items())},
        "tensors": entries,
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for blob in blobs:
            f.write(blob)


def load_container(path):
    """Read a checkpoint; returns (arch, arrays, steps, seed, extra)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ContainerError(f"bad magic in {path}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + hlen:
        raise ContainerError(f"truncated header in {path}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arrays = {}
    offset = 16 + hlen
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 8 * n
        if end > len(raw):
            raise ContainerError(f"truncated payload in {path}")
        arrays[entry["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        offset = end
    return header["arch"], arrays, header["steps"], header["seed"], header["extra"]


def restore_params(params: dict, arrays: dict, steps: dict):
    """Load saved arrays into an existing parameter dict (shapes must match)."""
    for name, p in params.items():
        if name not in arrays:
            raise ContainerError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ContainerError(
                f"shape mismatch for {name!r}: "
                f"{arrays[name].shape} vs {p.data.shape}")
        p.data = arrays[name].copy()
        p.adam_m = arrays[name + ".adam_m"].copy()
        p.adam_v = arrays[name + ".adam_v"].copy()
        p.adam_step = int(steps.get(name, 0))


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
