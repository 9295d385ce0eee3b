"""
Single-file container for named arrays.

Layout: one line of compact, key-sorted JSON (the manifest), a newline, then
the raw little-endian array bytes concatenated in manifest order. Identical
content always produces identical bytes.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.errors import CorruptFileError, VersionMismatchError
from app.schemas.artifacts import FORMAT_VERSION, ArrayEntry, ContainerManifest

logger = logging.getLogger(__name__)

_ITEMSIZE = {"<f8": 8, "<i4": 4}


def _dtype_tag(array: np.ndarray) -> str:
    return "<i4" if np.issubdtype(array.dtype, np.integer) else "<f8"


def encode_container(content: str, meta: Dict[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        tag = _dtype_tag(np.asarray(array))
        data = np.ascontiguousarray(array, dtype=np.dtype(tag)).tobytes()
        entries.append(
            ArrayEntry(name=name, dtype=tag, shape=list(np.shape(array)), offset=offset, nbytes=len(data))
        )
        chunks.append(data)
        offset += len(data)
    manifest = ContainerManifest(version=FORMAT_VERSION, content=content, meta=meta, arrays=entries)
    header = json.dumps(manifest.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return header.encode("utf-8") + b"\n" + b"".join(chunks)


def decode_container(raw: bytes, expected_content: str) -> Tuple[ContainerManifest, Dict[str, np.ndarray]]:
    """
    Parse container bytes.

    Raises:
        CorruptFileError: If the manifest is unreadable or disagrees with the payload
        VersionMismatchError: If the format version is not supported
    """
    newline = raw.find(b"\n")
    if newline < 0:
        raise CorruptFileError("container has no manifest line")
    try:
        document = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"container manifest is not valid JSON: {e}") from e
    if isinstance(document, dict) and document.get("version") not in (None, FORMAT_VERSION):
        raise VersionMismatchError(
            f"container format version {document.get('version')} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        manifest = ContainerManifest.model_validate(document)
    except ValidationError as e:
        raise CorruptFileError(f"container manifest is malformed: {e}") from e
    if manifest.content != expected_content:
        raise CorruptFileError(f"expected a {expected_content} container, found {manifest.content}")

    payload = memoryview(raw)[newline + 1 :]
    expected = 0
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.arrays:
        count = int(np.prod(entry.shape)) if entry.shape else 1
        if entry.offset != expected or entry.nbytes != count * _ITEMSIZE[entry.dtype]:
            raise CorruptFileError(f"manifest entry '{entry.name}' disagrees with its declared shape")
        expected += entry.nbytes
        if expected > len(payload):
            raise CorruptFileError(
                f"container is truncated: '{entry.name}' needs {expected} bytes, {len(payload)} present"
            )
        values = np.frombuffer(payload[entry.offset : expected], dtype=np.dtype(entry.dtype))
        native = np.int32 if entry.dtype == "<i4" else np.float64
        arrays[entry.name] = values.astype(native).reshape(entry.shape)
    if expected != len(payload):
        raise CorruptFileError(f"container payload has {len(payload) - expected} unexpected trailing bytes")
    return manifest, arrays


def write_container(path: str, content: str, meta: Dict[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_container(content, meta, arrays))


def read_container(path: str, expected_content: str) -> Tuple[ContainerManifest, Dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), expected_content)
