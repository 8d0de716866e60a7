"""Self-describing binary container for named arrays plus a JSON manifest.

Layout: a magic line, a human-readable JSON header terminated by a NUL byte,
then the raw little-endian array payloads in header order. Every array
carries a CRC32 so truncation or corruption is detected before any data is
handed back. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"#compwm-container v1\n"
FORMAT_VERSION = 1


class StorageError(Exception):
    pass


class CorruptFileError(StorageError):
    pass


class VersionMismatchError(StorageError):
    pass


class MissingArrayError(StorageError):
    pass


def write_container(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    index = []
    payloads = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str if arr.dtype.str[0] != "=" else "<" + arr.dtype.str[1:],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "manifest": manifest,
        "arrays": index,
    }
    blob = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(blob)
        f.write(b"\x00")
        for raw in payloads:
            f.write(raw)
    tmp.replace(path)


def read_container(path: str | Path,
                   require: list[str] | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CorruptFileError(f"{path}: not a container file")
    nul = data.find(b"\x00", len(MAGIC))
    if nul < 0:
        raise CorruptFileError(f"{path}: header never terminates")
    try:
        header = json.loads(data[len(MAGIC):nul].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{path}: bad header JSON: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    body = data[nul + 1:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise CorruptFileError(f"{path}: array {entry['name']!r} is truncated")
        raw = body[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CorruptFileError(f"{path}: checksum mismatch in {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()
    if require:
        missing = [n for n in require if n not in arrays]
        if missing:
            raise MissingArrayError(f"{path}: missing arrays {missing}")
    return header["manifest"], arrays
