"""Binary array container with a configuration fingerprint.

Layout: 8-byte magic, little-endian u32 format version, u32 header length,
UTF-8 JSON header (sorted keys), then the raw little-endian array payloads in
header order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from .spectro import BandConfig, StftParams

MAGIC = b"BINMAPAC"
VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "i4": "<i4", "u1": "|u1", "b1": "|b1",
           "c16": "<c16"}


class ContainerError(ValueError):
    """Malformed or incompatible container file."""


class FingerprintMismatch(ContainerError):
    """Containers built with different STFT or band settings."""


def fingerprint(params: StftParams, band: BandConfig) -> str:
    """SHA-256 of the canonical JSON of the STFT and band settings."""
    blob = json.dumps({"stft": params.as_dict(), "band": band.as_dict()},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _code(arr: np.ndarray) -> str:
    code = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if code not in _DTYPES:
        raise ContainerError(f"unsupported array dtype {arr.dtype}")
    return code


@dataclass
class ArrayContainer:
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    fingerprint: str = ""
    meta: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise ContainerError(f"container has no entry {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def require_fingerprint(self, expected: str, what: str = "container") -> None:
        if self.fingerprint != expected:
            raise FingerprintMismatch(
                f"{what} fingerprint {self.fingerprint[:12]} does not match "
                f"{expected[:12]} (different STFT or band settings)")

    def to_bytes(self) -> bytes:
        entries, payload, offset = [], [], 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name])
            code = _code(arr)
            data = arr.astype(_DTYPES[code], copy=False).tobytes()
            entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(data)})
            payload.append(data)
            offset += len(data)
        header = json.dumps({"fingerprint": self.fingerprint, "meta": self.meta,
                             "entries": entries}, sort_keys=True,
                            separators=(",", ":")).encode()
        return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ArrayContainer":
        if blob[:8] != MAGIC:
            raise ContainerError("not an array container (bad magic)")
        if len(blob) < 16:
            raise ContainerError("truncated container header")
        version, hlen = struct.unpack("<II", blob[8:16])
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        try:
            header = json.loads(blob[16:16 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"corrupt container header: {exc}") from None
        base = 16 + hlen
        arrays = {}
        try:
            for e in header["entries"]:
                start = base + e["offset"]
                chunk = blob[start:start + e["nbytes"]]
                if len(chunk) != e["nbytes"]:
                    raise ContainerError(f"entry {e['name']!r} is truncated")
                arrays[e["name"]] = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]) \
                    .reshape(e["shape"]).copy()
            return cls(arrays, header["fingerprint"], header["meta"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ContainerError):
                raise
            raise ContainerError(f"corrupt container header: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ArrayContainer":
        return cls.from_bytes(Path(path).read_bytes())


def model_entries(arrays: Mapping[str, np.ndarray], K: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Prefix model arrays with their scale so several models share one file."""
    prefix = "" if K is None else f"K{K}/"
    return {prefix + name: np.asarray(value) for name, value in arrays.items()}


def scales_in(container: ArrayContainer) -> list:
    return sorted({int(name.split("/")[0][1:]) for name in container.arrays if "/" in name})
