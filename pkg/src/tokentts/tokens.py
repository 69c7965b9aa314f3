"""Binary token files.

Layout (little-endian):

    magic     4 bytes  b"TTOK"
    version   u16
    frame_rate f64
    n_q       u16      token layers per frame (1 for coarse tokens)
    K         u32      codebook size
    T         u32      number of frames
    payload   T * n_q unsigned ids, frame-major; u16 when K <= 65536, else u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import BadMagicError, CorruptPayloadError, TruncatedPayloadError, VersionMismatchError

TOKEN_MAGIC = b"TTOK"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<4sHdHII")


@dataclass
class TokenFile:
    indices: torch.Tensor  # (T,) or (T, n_q)
    frame_rate: float
    codebook_size: int

    @property
    def n_q(self) -> int:
        return 1 if self.indices.dim() == 1 else int(self.indices.shape[1])

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def _dtype(codebook_size: int) -> str:
    return "<u2" if codebook_size <= 65536 else "<u4"


def dumps_tokens(tf: TokenFile) -> bytes:
    idx = tf.indices.detach().cpu().long()
    if idx.dim() not in (1, 2):
        raise ValueError(f"token indices must be (T,) or (T, n_q), got shape {tuple(idx.shape)}")
    if idx.numel() and (idx.min() < 0 or idx.max() >= tf.codebook_size):
        raise ValueError(f"token id outside [0, {tf.codebook_size})")
    header = _HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, float(tf.frame_rate), tf.n_q, tf.codebook_size, len(tf))
    return header + idx.numpy().astype(_dtype(tf.codebook_size)).tobytes()


def loads_tokens(data: bytes) -> TokenFile:
    if not TOKEN_MAGIC.startswith(data[:4]):
        raise BadMagicError("not a token file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("truncated token header")
    _, version, frame_rate, n_q, k, t = _HEADER.unpack_from(data)
    if version != TOKEN_VERSION:
        raise VersionMismatchError(f"token file version {version}, expected {TOKEN_VERSION}")
    if n_q < 1 or k < 1:
        raise CorruptPayloadError(f"invalid header values n_q={n_q}, K={k}")
    dtype = np.dtype(_dtype(k))
    expected = t * n_q * dtype.itemsize
    payload = data[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise CorruptPayloadError(f"{len(payload) - expected} trailing bytes after payload")
    ids = np.frombuffer(payload, dtype=dtype).astype(np.int64)
    if ids.size and ids.max() >= k:
        raise CorruptPayloadError(f"token id {int(ids.max())} outside codebook of {k}")
    idx = torch.from_numpy(ids.copy())
    idx = idx.reshape(t) if n_q == 1 else idx.reshape(t, n_q)
    return TokenFile(idx, frame_rate, k)


def write_tokens(tf: TokenFile, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_tokens(tf))
    return path


def read_tokens(path: str | Path) -> TokenFile:
    return loads_tokens(Path(path).read_bytes())


def token_file_size(t: int, n_q: int, codebook_size: int) -> int:
    return _HEADER.size + t * n_q * np.dtype(_dtype(codebook_size)).itemsize
