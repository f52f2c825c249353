import json
import struct

import numpy as np
import pytest

from htprecond.bench import file_digest, generate_frame
from htprecond.factors import init_factors
from htprecond.io import (
    CHECKPOINT_MAGIC,
    FRAME_MAGIC,
    FormatError,
    _pack,
    read_checkpoint,
    read_frame,
    write_checkpoint,
    write_frame,
)
from htprecond.linalg import RngStream
from htprecond.partition import build_partition


@pytest.fixture
def frame():
    return generate_frame(256, 2, 1, "train")


def test_frame_round_trip(tmp_path, frame):
    path = tmp_path / "f.mppf"
    write_frame(path, frame)
    got = read_frame(path)
    assert (got.N, got.W, got.H, got.seed, got.index, got.split) == (256, 16, 16, 2, 1, "train")
    np.testing.assert_array_equal(got.rho, frame.rho)
    np.testing.assert_array_equal(got.b, frame.b)
    np.testing.assert_array_equal(got.cells, frame.cells)
    assert (got.A != frame.A).nnz == 0
    assert got.barriers == frame.barriers and got.rho_heavy == frame.rho_heavy


def test_frame_layout(tmp_path, frame):
    path = tmp_path / "f.mppf"
    write_frame(path, frame)
    blob = path.read_bytes()
    assert blob[:8] == FRAME_MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    names = [s["name"] for s in header["sections"]]
    assert names[:5] == ["rho", "row_offsets", "col_indices", "values", "b"]
    dtypes = {s["name"]: s["dtype"] for s in header["sections"]}
    assert dtypes["row_offsets"] == "<u8" and dtypes["col_indices"] == "<u4"
    assert len(blob) == 16 + hlen + sum(s["nbytes"] for s in header["sections"])


def test_byte_identical(tmp_path, frame):
    write_frame(tmp_path / "a.mppf", frame)
    write_frame(tmp_path / "b.mppf", generate_frame(256, 2, 1, "train"))
    assert file_digest(tmp_path / "a.mppf") == file_digest(tmp_path / "b.mppf")


def test_corrupt_payload(tmp_path, frame):
    path = tmp_path / "f.mppf"
    write_frame(path, frame)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        read_frame(path)


def test_bad_magic_and_truncation(tmp_path, frame):
    path = tmp_path / "f.mppf"
    write_frame(path, frame)
    blob = path.read_bytes()
    (tmp_path / "m.mppf").write_bytes(b"XXXX0001" + blob[8:])
    with pytest.raises(FormatError, match="magic"):
        read_frame(tmp_path / "m.mppf")
    (tmp_path / "t.mppf").write_bytes(blob[:-100])
    with pytest.raises(FormatError, match="truncated"):
        read_frame(tmp_path / "t.mppf")
    with pytest.raises(FormatError):
        read_checkpoint(path)
    with pytest.raises(FormatError) as ei:
        read_frame(tmp_path / "missing.mppf")
    assert ei.value.path == tmp_path / "missing.mppf"


def test_invalid_csr_rejected(tmp_path, frame):
    A = frame.A
    idx = A.indices.copy()
    idx[0], idx[1] = idx[1], idx[0]  # breaks column ordering with valid checksums
    header = {"N": 256, "W": 16, "H": 16, "seeds": {"master": 0, "index": 0, "split": "train"},
              "rho_heavy": 1.0, "barriers": []}
    blob = _pack(FRAME_MAGIC, header, [("rho", frame.rho, "<f8"), ("row_offsets", A.indptr, "<u8"),
                                       ("col_indices", idx, "<u4"), ("values", A.data, "<f8"),
                                       ("b", frame.b, "<f8"), ("cells", frame.cells, "<u4")])
    (tmp_path / "bad.mppf").write_bytes(blob)
    with pytest.raises(FormatError, match="CSR"):
        read_frame(tmp_path / "bad.mppf")


def test_checkpoint_round_trip(tmp_path):
    ft = init_factors(build_partition(512, 128), 32, "random", 0.1, RngStream(1))
    ft.metadata["note"] = "x"
    write_checkpoint(tmp_path / "c.hftc", ft)
    got = read_checkpoint(tmp_path / "c.hftc")
    assert got.partition == ft.partition and got.L_s == 32
    np.testing.assert_array_equal(got.data, ft.data)
    assert got.data.dtype == np.float32 and got.metadata["note"] == "x"
    assert (tmp_path / "c.hftc").read_bytes()[:8] == CHECKPOINT_MAGIC


def test_checkpoint_version(tmp_path):
    ft = init_factors(build_partition(512, 128), 32)
    header = {"format": "HFTC", "layout_version": 99, "N": 512, "L": 128, "L_s": 32,
              "shift": None, "metadata": {}}
    (tmp_path / "v.hftc").write_bytes(_pack(CHECKPOINT_MAGIC, header, [("factors", ft.data, "<f4")]))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(tmp_path / "v.hftc")


def test_checkpoint_size_mismatch(tmp_path):
    header = {"format": "HFTC", "layout_version": 1, "N": 512, "L": 128, "L_s": 32,
              "shift": None, "metadata": {}}
    (tmp_path / "s.hftc").write_bytes(_pack(CHECKPOINT_MAGIC, header, [("factors", np.zeros(5), "<f4")]))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "s.hftc")
