"""Checkpoint container, config hashing and parameter checksums.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"TTSCKPT\\0"
    u16       format version
    u32       header length H
    H bytes   UTF-8 JSON header: stage, iteration, seed, config, config_hash,
              payload_len, payload_sha256
    payload   torch.save() of the state dictionaries
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
from torch import nn

CKPT_MAGIC = b"TTSCKPT\x00"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class FormatError(ValueError):
    """Base class for malformed token or checkpoint files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CorruptPayloadError(FormatError):
    pass


class ConfigMismatchError(ValueError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (names, dtypes, shapes and raw bytes)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    seed: int
    config: dict
    state: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def header(self, payload: bytes) -> dict:
        return {
            "stage": self.stage,
            "iteration": self.iteration,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "payload_len": len(payload),
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }


def _payload_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    torch.save(state, buf)
    return buf.getvalue()


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    payload = _payload_bytes(ckpt.state)
    header = canonical_json(ckpt.header(payload)).encode()
    return _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + payload


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ckpt))
    tmp.replace(path)
    return path


def read_checkpoint_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _PREFIX.size:
        if not CKPT_MAGIC.startswith(data[: len(CKPT_MAGIC)]):
            raise BadMagicError("not a checkpoint file (bad magic)")
        raise TruncatedPayloadError("truncated checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    end = _PREFIX.size + header_len
    if len(data) < end:
        raise TruncatedPayloadError("truncated checkpoint header")
    try:
        header = json.loads(data[_PREFIX.size : end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayloadError(f"unreadable checkpoint header: {exc}") from exc
    return header, end


def loads_checkpoint(data: bytes) -> Checkpoint:
    header, start = read_checkpoint_header(data)
    payload = data[start:]
    if len(payload) < header["payload_len"]:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {header['payload_len']} bytes")
    if len(payload) > header["payload_len"]:
        raise CorruptPayloadError("trailing bytes after checkpoint payload")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptPayloadError("checkpoint payload checksum mismatch")
    if config_hash(header["config"]) != header["config_hash"]:
        raise CorruptPayloadError("checkpoint config does not match its recorded hash")
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    return Checkpoint(header["stage"], header["iteration"], header["seed"], header["config"], state)


def load_checkpoint(path: str | Path, expect_stage: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    ckpt = loads_checkpoint(path.read_bytes())
    if expect_stage is not None and ckpt.stage != expect_stage:
        raise ConfigMismatchError(f"{path} holds a {ckpt.stage!r} checkpoint, expected {expect_stage!r}")
    return ckpt
