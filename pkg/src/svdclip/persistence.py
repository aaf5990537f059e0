"""Binary container used for checkpoints, datasets and adaptation records.

Layout (all integers little-endian)::

    magic        4 bytes   b"SVDT" checkpoint | b"SVDD" dataset | b"SVDR" record
    version      u32
    header_len   u32, then header_len bytes of UTF-8 JSON (sorted keys)
    n_sections   u32
    per section  u16 name_len, name (UTF-8), u8 ndim, ndim x u64 shape,
                 prod(shape) x f64 payload in row-major order
    checksum     8 bytes: BLAKE2b-64 digest of every preceding byte

Integer arrays are stored as f64 and listed under the header key
``"int_sections"`` so they come back as int64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import ChecksumError, FormatError, MissingFileError

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"SVDT"
DATASET_MAGIC = b"SVDD"
RECORD_MAGIC = b"SVDR"


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_container(magic: bytes, header: dict, arrays: dict) -> bytes:
    header = dict(header)
    ints = sorted(n for n, a in arrays.items() if np.issubdtype(np.asarray(a).dtype, np.integer))
    if ints:
        header["int_sections"] = ints
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def decode_container(data: bytes, magic: bytes):
    """Return ``(header, arrays)``; raises on wrong magic, truncation or checksum."""
    if len(data) < 24 or data[:4] != magic:
        raise FormatError(f"not a {magic.decode()} container")
    body, digest = data[:-8], data[-8:]
    if _digest(body) != digest:
        raise ChecksumError("checksum mismatch: file is corrupted")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        pos = 8
        (hlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        header = json.loads(body[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(body):
                raise FormatError(f"section {name!r} is truncated")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            if name in arrays:
                raise FormatError(f"duplicate section {name!r}")
            arrays[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed container: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes after last section")
    for name in header.get("int_sections", []):
        arrays[name] = arrays[name].astype(np.int64)
    return header, arrays


def write_container(path, magic, header, arrays):
    data = encode_container(magic, header, arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path, magic):
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        return decode_container(fh.read(), magic)


# ------------------------------------------------------------------ checkpoints


def checkpoint_bytes(model, extra: dict | None = None) -> bytes:
    header = {"format": "checkpoint", "kind": model.kind, "model": model.config.to_dict()}
    if extra:
        header["extra"] = extra
    return encode_container(CHECKPOINT_MAGIC, header, model.named_arrays())


def save_checkpoint(path, model, extra: dict | None = None):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))
    os.replace(tmp, path)


def model_from_container(header, arrays):
    from .clip_core import ModelConfig, model_from_arrays

    try:
        config = ModelConfig.from_dict(header["model"])
        model = model_from_arrays(config, header["kind"], arrays)
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing {exc}") from exc
    expected = set(model.named_arrays())
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise FormatError(f"sections do not match config (missing {missing}, unexpected {extra})")
    for name, arr in model.named_arrays().items():
        if arr.shape != arrays[name].shape:
            raise FormatError(f"section {name!r} has shape {arrays[name].shape}, expected {arr.shape}")
    return model


def load_checkpoint(path):
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    return model_from_container(header, arrays)


def load_checkpoint_with_header(path):
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    return model_from_container(header, arrays), header
