"""Container format round trips and byte-level layout."""

import struct

import numpy as np
import pytest

from fieldshift.containers import (
    MAGIC_CHIP,
    MAGIC_MASK,
    MAGIC_NET,
    read_checkpoint,
    read_chip,
    read_mask,
    write_checkpoint,
    write_chip,
    write_mask,
)
from fieldshift.errors import CheckpointError, DataError
from fieldshift.raster import Chip, LabelMask


def test_chip_round_trip(tmp_path):
    chip = Chip(
        np.random.default_rng(0).uniform(0, 1, (4, 8, 8)).astype(np.float32),
        tile_id="r1c2",
        year="y0",
        offset=(16, 32),
        norm="mm-lab",
    )
    path = tmp_path / "chip.fsch"
    write_chip(str(path), chip)
    back = read_chip(str(path))
    assert np.array_equal(back.data, chip.data)
    assert back.tile_id == "r1c2" and back.year == "y0"
    assert back.offset == (16, 32) and back.norm == "mm-lab"


def test_chip_layout_is_magic_len_header_payload(tmp_path):
    chip = Chip(np.zeros((1, 2, 2), dtype=np.float32))
    path = tmp_path / "c.fsch"
    write_chip(str(path), chip)
    blob = path.read_bytes()
    assert blob[:4] == MAGIC_CHIP
    (hlen,) = struct.unpack("<I", blob[4:8])
    assert blob[8 : 8 + hlen].startswith(b"{")
    assert len(blob) == 8 + hlen + 4 * 4  # four float32 pixels


def test_float64_chip_saved_as_float32(tmp_path):
    chip = Chip(np.full((1, 2, 2), 1 / 3, dtype=np.float64))
    path = tmp_path / "c.fsch"
    write_chip(str(path), chip)
    back = read_chip(str(path))
    assert back.data.dtype == np.float32
    assert np.allclose(back.data, 1 / 3, atol=1e-7)


def test_mask_round_trip(tmp_path):
    mask = LabelMask(
        np.random.default_rng(1).choice([0, 1, 2, 255], size=(16, 16)).astype(np.uint8),
        tile_id="r0c0",
        year="y1",
    )
    path = tmp_path / "m.fsmk"
    write_mask(str(path), mask)
    back = read_mask(str(path))
    assert np.array_equal(back.data, mask.data)
    assert back.year == "y1"
    assert path.read_bytes()[:4] == MAGIC_MASK


def test_checkpoint_round_trip(tmp_path):
    tensors = {
        "enc0.conv1.w": np.random.default_rng(2).normal(size=(4, 3, 3, 3)).astype(np.float32),
        "enc0.conv1.b": np.zeros(4, dtype=np.float32),
    }
    meta = {"arch": {"depth": 1}, "norm": "mm-lab"}
    path = tmp_path / "net.fsnw"
    write_checkpoint(str(path), tensors, meta)
    back, back_meta = read_checkpoint(str(path))
    assert back_meta == meta
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    assert path.read_bytes()[:4] == MAGIC_NET


def test_wrong_magic_rejected(tmp_path):
    chip = Chip(np.zeros((1, 2, 2), dtype=np.float32))
    path = tmp_path / "c.fsch"
    write_chip(str(path), chip)
    with pytest.raises(DataError):
        read_mask(str(path))


def test_truncated_checkpoint_rejected(tmp_path):
    tensors = {"w": np.ones((4, 4), dtype=np.float32)}
    path = tmp_path / "net.fsnw"
    write_checkpoint(str(path), tensors, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(str(path))


def test_write_is_atomic_no_temp_left(tmp_path):
    chip = Chip(np.zeros((1, 2, 2), dtype=np.float32))
    path = tmp_path / "c.fsch"
    write_chip(str(path), chip)
    leftovers = [p for p in tmp_path.iterdir() if p.name != "c.fsch"]
    assert leftovers == []
