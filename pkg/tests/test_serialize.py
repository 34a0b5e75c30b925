"""Checkpoint container round-trips and error handling."""

import numpy as np
import pytest

from maskgrid.serialize import CheckpointError, read_checkpoint, write_checkpoint


def test_round_trip_bit_exact(tmp_path, rng):
    entries = {
        "encoder/w1": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "encoder/b1": rng.normal(size=(4,)).astype(np.float32),
        "codebook/emb": rng.normal(size=(16, 8)).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "test.mgrd"
    write_checkpoint(path, entries)
    back = read_checkpoint(path)
    assert list(back) == list(entries)
    for name in entries:
        assert back[name].dtype == np.float32
        assert back[name].shape == entries[name].shape
        assert back[name].tobytes() == entries[name].tobytes()


def test_rewrite_is_byte_identical(tmp_path, rng):
    entries = {"a/b": rng.normal(size=(5, 7)).astype(np.float32)}
    p1, p2 = tmp_path / "a.mgrd", tmp_path / "b.mgrd"
    write_checkpoint(p1, entries)
    write_checkpoint(p2, read_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_container(tmp_path):
    path = tmp_path / "empty.mgrd"
    write_checkpoint(path, {})
    assert read_checkpoint(path) == {}


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.mgrd"
    path.write_bytes(b"JUNK" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v9.mgrd"
    import struct

    path.write_bytes(b"MGRD" + struct.pack("<II", 9, 0))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "trail.mgrd"
    write_checkpoint(path, {})
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_utf8_names(tmp_path):
    entries = {"blöck/wéight": np.ones(3, dtype=np.float32)}
    path = tmp_path / "utf8.mgrd"
    write_checkpoint(path, entries)
    assert "blöck/wéight" in read_checkpoint(path)
