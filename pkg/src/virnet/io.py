"""File formats: the VIRT tensor container, 8-bit PGM/PPM, checkpoints.

VIRT layout (little endian)::

    b"VIRT" | u32 version | u32 ndim | ndim * u32 dims | payload

Version 1 stores float32 samples. Version 2 is identical except the
payload is float64; checkpoints use it so parameters round-trip exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"VIRT"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def encode_virt(array, version: int = 1) -> bytes:
    arr = np.asarray(array)
    if version not in _DTYPES:
        raise ContractError(f"unsupported VIRT version {version}")
    header = MAGIC + struct.pack("<II", version, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[version]).tobytes()


def decode_virt(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one VIRT record starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ContractError("not a VIRT record (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, offset + 4)
    if version not in _DTYPES:
        raise ContractError(f"unsupported VIRT version {version}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset + 12)
    start = offset + 12 + 4 * ndim
    dtype = _DTYPES[version]
    count = int(np.prod(dims, dtype=np.int64))
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise ContractError("truncated VIRT payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    return data.astype(np.float64), end


def write_virt(path, array, version: int = 1) -> None:
    Path(path).write_bytes(encode_virt(array, version))


def read_virt(path) -> np.ndarray:
    arr, _ = decode_virt(Path(path).read_bytes())
    return arr


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img) -> None:
    """Binary PGM for ``[h,w]`` / ``[1,h,w]``, PPM for ``[3,h,w]``; values in [0,1]."""
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 2:
        h, w = a.shape
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + to_uint8(a).tobytes())
    elif a.ndim == 3 and a.shape[0] == 3:
        _, h, w = a.shape
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_uint8(a.transpose(1, 2, 0)).tobytes())
    else:
        raise ContractError(f"cannot write image of shape {a.shape} as PNM")


def read_pnm(path) -> np.ndarray:
    """Read binary PGM/PPM (maxval <= 255) into floats in [0,1]."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255 or magic not in ("P5", "P6"):
        raise ContractError(f"unsupported PNM variant {magic} maxval={maxval}")
    ch = 1 if magic == "P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos).astype(np.float64) / maxval
    return data.reshape(h, w) if ch == 1 else data.reshape(h, w, 3).transpose(2, 0, 1)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".virt":
        return read_virt(path)
    return read_pnm(path)


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>`` (concatenated VIRT v2 records) and ``<path>.json`` (manifest)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        rec = encode_virt(np.asarray(arr, dtype=np.float64), version=2)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(rec)
        offset += len(rec)
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "virnet-checkpoint", "payload": path.name, "tensors": entries, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    buf = path.read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        arr, _ = decode_virt(buf, entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise ContractError(f"checkpoint entry {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
        arrays[entry["name"]] = arr
    return arrays, manifest.get("meta", {})
