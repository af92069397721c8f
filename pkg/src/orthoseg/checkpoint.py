"""Binary checkpoint container.

Layout (all integers little-endian):
  magic "OSCK" | u32 format version | u32 header length | header JSON
  (sorted keys) | u32 tensor count | records.
Each record: u16 name length + UTF-8 name | u8 dtype code (1 = f32,
2 = f64) | u8 rank | u32 extents | raw little-endian payload.

The header carries the run-config digest (sha256 of its canonical
serialization), schedule state and RNG state, making save -> load -> save
bytewise stable and training resume bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError

MAGIC = b"OSCK"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


def save_checkpoint(path, header, tensors):
    """``header``: JSON-serializable dict; ``tensors``: name -> float array."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dt = np.dtype("<f8") if arr.dtype == np.float64 else np.dtype("<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("BB", _CODES[dt], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path):
    """Returns (header dict, ordered name -> array dict)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            code, rank = struct.unpack("BB", f.read(2))
            if code not in _DTYPES:
                raise DataError(f"{path}: unknown dtype code {code} for {name}")
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise DataError(f"{path}: truncated payload for {name}")
            if name in tensors:
                raise DataError(f"{path}: duplicate tensor name {name}")
            tensors[name] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        return header, tensors


def check_digest(header, expected_digest, override=False):
    got = header.get("config_digest")
    if got != expected_digest and not override:
        raise ConfigurationError(
            f"checkpoint config digest {got} does not match run config "
            f"{expected_digest} (pass the override flag to force)")


@dataclass
class ImportReport:
    imported: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (name, reason)


def import_weights(params, ckpt_path, name_map=None):
    """Copy shape-compatible parameter tensors from a checkpoint by mapped
    name; skipped entries are reported, not fatal."""
    _, tensors = load_checkpoint(ckpt_path)
    report = ImportReport()
    for key, arr in tensors.items():
        if not key.startswith("param:"):
            continue
        name = key[len("param:"):]
        mapped = name
        if name_map:
            for src, dst in name_map.items():
                if mapped.startswith(src):
                    mapped = dst + mapped[len(src):]
                    break
        if mapped not in params:
            report.skipped.append((name, "no matching parameter"))
            continue
        target = params[mapped]
        if target.data.shape != arr.shape:
            report.skipped.append((name, f"shape {arr.shape} != {target.data.shape}"))
            continue
        target.data[...] = arr.astype(target.data.dtype)
        report.imported.append(mapped)
    return report
