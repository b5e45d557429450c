"""Single-file binary checkpoints.

Layout: magic "PMLM", a 4-byte little-endian format version, an 8-byte
little-endian header length, a UTF-8 JSON header, then the raw tensor
payloads concatenated as little-endian float32 in manifest order. The
header carries both configs, the run counters, the vocab, and a manifest
of (name, shape, byte offset, byte length) per tensor, so a reader can
validate the payload before touching it. Saving is canonical (sorted
JSON keys, fixed manifest order), so save -> load -> save is an
identity at the byte level.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import Vocab

MAGIC = b"PMLM"
FORMAT_VERSION = 1

__all__ = [
    "Checkpoint",
    "CheckpointLoadError",
    "CheckpointMagicError",
    "CheckpointManifestError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "FORMAT_VERSION",
    "MAGIC",
    "load_checkpoint",
    "save_checkpoint",
]


class CheckpointLoadError(Exception):
    """Base class for unreadable checkpoint files."""


class CheckpointMagicError(CheckpointLoadError):
    """The file does not start with the expected magic."""


class CheckpointVersionError(CheckpointLoadError):
    """The format version is not one this reader understands."""


class CheckpointTruncatedError(CheckpointLoadError):
    """The file ends before its declared header or payload does."""


class CheckpointManifestError(CheckpointLoadError):
    """The manifest disagrees with the payload that follows it."""


@dataclass
class Checkpoint:
    """Everything needed to resume a run exactly where it stopped."""

    model_config: dict
    train_config: dict
    mode: str
    phase_steps_done: list[int]
    global_step: int
    tokens_seen: int
    master_seed: int
    vocab_tokens: list[str]
    params: dict[str, np.ndarray]  # float32, manifest order
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_tokens)


def _tensor_entries(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield f"param.{name}", arr
    for name, arr in ckpt.momentum.items():
        yield f"momentum.{name}", arr


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = []
    payload = bytearray()
    offset = 0
    for name, arr in _tensor_entries(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(data),
            }
        )
        payload.extend(data)
        offset += len(data)
    header = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "mode": ckpt.mode,
        "counters": {
            "phase_steps_done": list(ckpt.phase_steps_done),
            "global_step": ckpt.global_step,
            "tokens_seen": ckpt.tokens_seen,
        },
        # Streams are re-derived from (seed, purpose, step); no generator
        # state needs to survive beyond the seed and the counters above.
        "rng": {"master_seed": ckpt.master_seed, "streams": "derived"},
        "vocab": ckpt.vocab_tokens,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", ckpt.format_version))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"{path}: file too short for fixed fields")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + header_len
    if len(raw) < header_end:
        raise CheckpointTruncatedError(
            f"{path}: header declares {header_len} bytes, file has {len(raw) - 16}"
        )
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointManifestError(f"{path}: unreadable header ({e})") from e

    payload = raw[header_end:]
    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    declared_end = 0
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        off, length = entry["byte_offset"], entry["byte_length"]
        count = int(np.prod(shape)) if shape else 1
        if length != count * 4:
            raise CheckpointManifestError(
                f"{path}: tensor {name}: shape {shape} needs {count * 4} bytes, manifest says {length}"
            )
        if off + length > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: tensor {name} extends to byte {off + length}, payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        declared_end = max(declared_end, off + length)
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("momentum."):
            momentum[name[len("momentum.") :]] = arr
        else:
            raise CheckpointManifestError(f"{path}: unknown tensor kind {name!r}")
    if declared_end != len(payload):
        raise CheckpointManifestError(
            f"{path}: payload has {len(payload)} bytes, manifest covers {declared_end}"
        )
    counters = header["counters"]
    return Checkpoint(
        model_config=header["model_config"],
        train_config=header["train_config"],
        mode=header["mode"],
        phase_steps_done=list(counters["phase_steps_done"]),
        global_step=counters["global_step"],
        tokens_seen=counters["tokens_seen"],
        master_seed=header["rng"]["master_seed"],
        vocab_tokens=header["vocab"],
        params=params,
        momentum=momentum,
        format_version=version,
    )
