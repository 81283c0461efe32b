"""Self-describing binary container for named float64 tensors.

One format backs every persisted artifact (forecaster weights, start-state
mixtures, cloned-clinician nets). Layout is little-endian throughout and is
documented byte-exactly in ``docs/FORMATS.md``:

    magic   4 bytes          b"CGTN"
    version uint32           currently 1
    hlen    uint32           byte length of the UTF-8 JSON header
    header  hlen bytes       {"kind": str, "meta": {...}}
    count   uint32           number of tensors
    then per tensor:
        nlen  uint32         byte length of the UTF-8 tensor name
        name  nlen bytes
        ndim  uint32
        dims  ndim * uint64
        data  prod(dims) * float64, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CGTN"
VERSION = 1


class ContainerError(ValueError):
    """Raised on malformed or incompatible container files."""


def save_tensors(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors with a JSON header to *path*."""
    header = json.dumps({"kind": kind, "meta": meta}, sort_keys=True).encode()
    parts: list[bytes] = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        if a.ndim and not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)  # keeps 0-d arrays 0-d
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        parts.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a container; returns (kind, meta, tensors)."""
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise ContainerError(f"truncated container {path}")
        out = buf[off : off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise ContainerError(f"{path} is not a tensor container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        n_items = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(dims)
        tensors[name] = data.copy()
    return header["kind"], header["meta"], tensors


def require_kind(path: str | Path, expected: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a container and assert its kind tag."""
    kind, meta, tensors = load_tensors(path)
    if kind != expected:
        raise ContainerError(f"{path}: expected kind {expected!r}, found {kind!r}")
    return meta, tensors
