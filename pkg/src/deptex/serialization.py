"""TNSR binary tensor files and named-tensor manifests.

Layout: ``b"TNSR"``, u32 version, u32 rank, rank x u32 dims, then float64
payload, all little-endian, row-major.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"TNSR"
VERSION = 1
_F64 = np.dtype("<f8")


def dumps(array) -> bytes:
    a = np.asarray(array, dtype=np.float64, order="C")
    head = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype(_F64, copy=False).tobytes()


def loads(buf: bytes, expected_rank=None) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'TNSR'", offset=0)
    if len(buf) < 12:
        raise FormatError("truncated header", offset=len(buf))
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}", offset=4)
    if expected_rank is not None and rank != expected_rank:
        raise FormatError(f"rank {rank} where rank {expected_rank} was expected", offset=8)
    dims_end = 12 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError("truncated dims", offset=len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != dims_end + 8 * count:
        raise FormatError(f"payload holds {len(buf) - dims_end} bytes, shape {shape} needs {8 * count}", offset=dims_end)
    return np.frombuffer(buf, dtype=_F64, count=count, offset=dims_end).astype(np.float64).reshape(shape)


def save(path, array):
    Path(path).write_bytes(dumps(array))


def load(path, expected_rank=None):
    return loads(Path(path).read_bytes(), expected_rank=expected_rank)


def save_manifest(directory, tensors: dict, meta=None):
    """Write one TNSR file per named tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        fname = f"{name}.tnsr"
        save(directory / fname, tensors[name])
        entries.append({"name": name, "file": fname, "shape": list(np.shape(tensors[name]))})
    manifest = {"format": "TNSR-manifest", "version": VERSION, "entries": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(directory):
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {directory}")
    manifest = json.loads(path.read_text())
    tensors = {e["name"]: load(directory / e["file"]) for e in manifest["entries"]}
    return tensors, manifest.get("meta", {})
