"""
DiffKnock — Contenedor de checkpoints
Formato binario little-endian:

    b"DKCK" | uint16 versión | uint32 longitud de cabecera | cabecera JSON UTF-8
    | payload float64 | SHA-256 (32 bytes) de todo lo anterior

La cabecera lleva el descriptor de arquitectura (`kind`), los parámetros del
schedule, el seed, la versión del modelo, la normalización y el manifiesto de
arrays `{name, shape, offset}` con offset en unidades float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from diffknock.core.errors import DataError
from diffknock.utils.io import to_jsonable

MAGIC = b"DKCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_HASH_BYTES = 32


def encode_checkpoint(header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in arrays:
        values = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        manifest.append({"name": name, "shape": list(values.shape), "offset": offset})
        chunks.append(values.reshape(-1).tobytes())
        offset += int(values.size)
    full_header = dict(header)
    full_header["manifest"] = manifest
    header_bytes = json.dumps(to_jsonable(full_header), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + _HASH_BYTES:
        raise DataError("checkpoint truncado", stage="checkpoint")
    body, digest = blob[:-_HASH_BYTES], blob[-_HASH_BYTES:]
    magic, version, header_len = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise DataError(f"firma de checkpoint inválida: {magic!r}", stage="checkpoint")
    if version != FORMAT_VERSION:
        raise DataError(f"versión de checkpoint no soportada: {version}", stage="checkpoint")
    if hashlib.sha256(body).digest() != digest:
        raise DataError("hash de contenido del checkpoint no coincide", stage="checkpoint")

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"cabecera de checkpoint ilegible: {e}", stage="checkpoint") from e
    payload = np.frombuffer(body[start + header_len:], dtype="<f8")

    arrays: Dict[str, np.ndarray] = {}
    for entry in header.get("manifest", []):
        shape = tuple(int(d) for d in entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        if offset + size > payload.size:
            raise DataError(f"array '{entry['name']}' fuera del payload", stage="checkpoint")
        arrays[entry["name"]] = payload[offset:offset + size].astype(np.float64).reshape(shape)
    return header, arrays


def save_checkpoint(path: str | Path, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> Path:
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    file.write_bytes(encode_checkpoint(header, arrays))
    return file


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    file = Path(path)
    if not file.is_file():
        raise DataError(f"checkpoint no encontrado: {file}", stage="checkpoint")
    header, arrays = decode_checkpoint(file.read_bytes())
    kind = header.get("architecture", {}).get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise DataError(f"checkpoint de tipo '{kind}', se esperaba '{expected_kind}'", stage="checkpoint")
    return header, arrays


def content_hash(path: str | Path) -> str:
    """Hash guardado en el trailer del checkpoint (hex)."""
    blob = Path(path).read_bytes()
    return blob[-_HASH_BYTES:].hex()
