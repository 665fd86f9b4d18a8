"""Binary container formats for chips, masks, and network checkpoints.

Layout, byte exact:

    magic (4 bytes) | header length (little-endian u32) | UTF-8 JSON header | payload

Magics: ``FSCH`` imagery/float rasters, ``FSMK`` class masks, ``FSNW``
checkpoints.  Chip payloads are little-endian float32, band sequential
(C-order over (bands, H, W)); mask payloads are raw u8; checkpoint payloads
concatenate each layer's little-endian float32 values in the order declared
by the header's shape table.  All writes go through a temp file and a final
rename so interrupted commands never leave partial containers.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

from .errors import CheckpointError, DataError
from .raster import Chip, LabelMask

MAGIC_CHIP = b"FSCH"
MAGIC_MASK = b"FSMK"
MAGIC_NET = b"FSNW"


def _atomic_write(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _pack(magic: bytes, header: dict[str, Any], payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(head)) + head + payload


def _unpack(blob: bytes, magic: bytes, path: str) -> tuple[dict[str, Any], bytes]:
    if blob[:4] != magic:
        raise DataError(f"{path}: expected magic {magic!r}, found {blob[:4]!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    return header, blob[8 + hlen :]


def write_chip(path: str, chip: Chip, band_names: list[str] | None = None) -> None:
    data = np.ascontiguousarray(chip.data, dtype="<f4")
    header = {
        "kind": "chip",
        "dims": list(data.shape),
        "dtype": "float32",
        "tile_id": chip.tile_id,
        "year": chip.year,
        "offset": list(chip.offset),
        "norm": chip.norm,
        "degenerate": chip.degenerate,
    }
    if band_names is not None:
        header["band_names"] = band_names
    _atomic_write(path, _pack(MAGIC_CHIP, header, data.tobytes()))


def read_chip(path: str) -> Chip:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _unpack(blob, MAGIC_CHIP, path)
    dims = tuple(header["dims"])
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Chip(
        data=data,
        tile_id=header.get("tile_id", ""),
        year=header.get("year", ""),
        offset=tuple(header.get("offset", (0, 0))),
        norm=header.get("norm"),
        degenerate=bool(header.get("degenerate", False)),
    )


def write_mask(path: str, mask: LabelMask) -> None:
    data = np.ascontiguousarray(mask.data, dtype=np.uint8)
    header = {
        "kind": "mask",
        "dims": list(data.shape),
        "dtype": "uint8",
        "tile_id": mask.tile_id,
        "year": mask.year,
        "offset": list(mask.offset),
    }
    _atomic_write(path, _pack(MAGIC_MASK, header, data.tobytes()))


def read_mask(path: str) -> LabelMask:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _unpack(blob, MAGIC_MASK, path)
    dims = tuple(header["dims"])
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()
    return LabelMask(
        data=data,
        tile_id=header.get("tile_id", ""),
        year=header.get("year", ""),
        offset=tuple(header.get("offset", (0, 0))),
    )


def write_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """Persist named float tensors plus a free-form metadata block."""
    table = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()]
    header = {"kind": "network", "layers": table, "meta": meta}
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in tensors.values())
    _atomic_write(path, _pack(MAGIC_NET, header, payload))


def read_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _unpack(blob, MAGIC_NET, path)
    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for entry in header["layers"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = cursor + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at layer '{entry['name']}'")
        tensors[entry["name"]] = np.frombuffer(payload[cursor:end], dtype="<f4").reshape(shape).copy()
        cursor = end
    if cursor != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - cursor} trailing payload bytes")
    return tensors, header.get("meta", {})
