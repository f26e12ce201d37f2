"""Single-file binary container: magic, JSON header, raw little-endian blobs.

Both dataset and model files use this layout. The header carries a
``sections`` list describing each blob (name, dtype string, shape, byte
count) in file order, plus arbitrary metadata. Errors name the section that
failed so truncated or mismatched files are diagnosable.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

DATASET_MAGIC = b"SWTDATA1"
MODEL_MAGIC = b"SWTMODL1"

_HEADER_LIMIT = 64 * 1024 * 1024


class FormatError(ValueError):
    """Container violation; ``section`` names the failing blob when known."""

    def __init__(self, message: str, section: str | None = None):
        super().__init__(message if section is None
                         else f"section {section!r}: {message}")
        self.section = section


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_container(path, magic: bytes, header: Mapping,
                    blobs: Mapping[str, np.ndarray]) -> None:
    prepared = {name: _little_endian(arr) for name, arr in blobs.items()}
    head = dict(header)
    head["sections"] = [
        {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
         "nbytes": int(arr.nbytes)}
        for name, arr in prepared.items()
    ]
    payload = json.dumps(head, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for arr in prepared.values():
            fh.write(arr.tobytes())


def read_header(path, magic: bytes) -> dict:
    """Header only; cheap shape/metadata peek without loading blobs."""
    with open(path, "rb") as fh:
        lead = fh.read(len(magic))
        if lead != magic:
            raise FormatError(f"bad magic {lead!r}, expected {magic!r} "
                              f"in {path}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError("truncated before header length")
        (hlen,) = struct.unpack("<Q", raw_len)
        if hlen > _HEADER_LIMIT:
            raise FormatError(f"header length {hlen} exceeds limit")
        payload = fh.read(hlen)
        if len(payload) != hlen:
            raise FormatError("truncated inside header")
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"header is not valid JSON: {exc}") from exc
    if "sections" not in header:
        raise FormatError("header missing sections list")
    return header


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    header = read_header(path, magic)
    blobs: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        fh.seek(len(magic))
        (hlen,) = struct.unpack("<Q", fh.read(8))
        fh.seek(len(magic) + 8 + hlen)
        for sec in header["sections"]:
            name = sec.get("name", "?")
            try:
                dtype = np.dtype(sec["dtype"])
                shape = tuple(int(s) for s in sec["shape"])
                nbytes = int(sec["nbytes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"malformed descriptor: {exc}", section=name)
            expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            if shape == ():
                expected = dtype.itemsize
            if expected != nbytes:
                raise FormatError(f"descriptor nbytes {nbytes} does not match "
                                  f"dtype/shape ({expected})", section=name)
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"file truncated ({len(raw)} of {nbytes} "
                                  f"bytes)", section=name)
            blobs[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header, blobs
