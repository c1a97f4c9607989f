"""Self-describing binary checkpoint files.

Layout:

    NCLCKPT v1\\n
    header-bytes <N>\\n
    <N bytes of UTF-8 JSON>
    <raw little-endian tensor payload>

The JSON header carries the format version, a free-form `meta` object
(config snapshot, seed, step, RNG state), the ordered tensor directory
(name, shape, dtype, byte count), and a SHA-256 digest of the payload.
Round trips are bit-identical; corruption and truncation are detected
on load instead of propagating silently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"NCLCKPT v1\n"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    tensors: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION


def _dtype_name(arr: np.ndarray) -> str:
    name = arr.dtype.name
    if name not in _DTYPES:
        raise CheckpointError(
            f"unsupported tensor dtype {name}; supported: {sorted(_DTYPES)}")
    return name


def save_checkpoint(path: str | Path, kind: str, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    directory = []
    chunks = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype_name = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        directory.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype_name,
            "nbytes": len(raw),
        })
        chunks.append(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"header-bytes {len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(b"NCLCKPT"):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    if not blob.startswith(MAGIC):
        first = blob.split(b"\n", 1)[0].decode("ascii", "replace")
        raise CheckpointError(
            f"unknown checkpoint format line {first!r}; this build reads "
            f"'NCLCKPT v{FORMAT_VERSION}'; re-save the state with a matching build")
    rest = blob[len(MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: truncated before header length line")
    length_line = rest[:newline].decode("ascii", "replace")
    if not length_line.startswith("header-bytes "):
        raise CheckpointError(f"{path}: malformed header length line {length_line!r}")
    try:
        header_len = int(length_line.split(" ", 1)[1])
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header length line") from exc
    body = rest[newline + 1:]
    if len(body) < header_len:
        raise CheckpointError(
            f"{path}: truncated header ({len(body)} of {header_len} bytes)")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unparsable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} != {FORMAT_VERSION}; "
            "re-save the state with a matching build")
    payload = body[header_len:]
    expected = sum(entry["nbytes"] for entry in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, directory declares {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        n = entry["nbytes"]
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {dtype!r} in directory")
        arr = np.frombuffer(payload[offset:offset + n], dtype=_DTYPES[dtype])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype, copy=True)
        offset += n
    return Checkpoint(kind=header["kind"], meta=header["meta"], tensors=tensors)
