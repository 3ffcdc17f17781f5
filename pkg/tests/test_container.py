import struct

import numpy as np
import pytest

from handbio.container import (ContainerError, pack_json, read_archive, read_planes,
                               unpack_json, write_archive, write_planes)


def test_planes_roundtrip_and_layout(tmp_path):
    a = np.random.default_rng(0).random((4, 5, 3)).astype(np.float32)
    b = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_planes(tmp_path / "p.hbpl", [a, b])
    raw = (tmp_path / "p.hbpl").read_bytes()
    assert raw[:4] == b"HBPL" and struct.unpack_from("<HH", raw, 4) == (1, 2)
    assert struct.unpack_from("<III", raw, 8) == (4, 5, 3)
    back = read_planes(tmp_path / "p.hbpl")
    assert np.array_equal(back[0], a) and np.array_equal(back[1][:, :, 0], b)
    assert len(raw) == 8 + 12 + 4 * a.size + 12 + 4 * b.size


def test_archive_roundtrip_dtypes(tmp_path):
    entries = {"w": np.ones((2, 3), np.float32), "d": np.array([1.5, -2.0]),
               "i": np.arange(4, dtype=np.int64), "scalar": np.float64(3.0),
               "meta": pack_json({"k": [1, "x"]})}
    write_archive(tmp_path / "a.hbta", entries)
    back = read_archive(tmp_path / "a.hbta")
    assert list(back) == list(entries)
    for k, v in entries.items():
        assert back[k].dtype == np.asarray(v).dtype and np.array_equal(back[k], v)
    assert unpack_json(back["meta"]) == {"k": [1, "x"]}


def test_bad_files_rejected(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ContainerError):
        read_planes(tmp_path / "x")
    with pytest.raises(ContainerError):
        read_archive(tmp_path / "x")
    (tmp_path / "v").write_bytes(b"HBTA" + struct.pack("<HI", 9, 0))
    with pytest.raises(ContainerError, match="version"):
        read_archive(tmp_path / "v")
    with pytest.raises(ContainerError):
        write_archive(tmp_path / "c", {"c": np.zeros(2, np.complex128)})
