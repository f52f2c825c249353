"""Binary file formats: MPPF benchmark frames and HFTC factor checkpoints.

Both formats are ``magic (8 bytes) | header length (u64 LE) | JSON header |
little-endian payload``. The JSON header records dtype, offset, byte length
and SHA-256 of every payload section; readers verify all of them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bench import BarrierSpec, Frame
from .factors import FactorTensor
from .partition import build_partition
from .validation import check_csr

FRAME_MAGIC = b"MPPF0001"
CHECKPOINT_MAGIC = b"HFTC0001"
LAYOUT_VERSION = 1


class FormatError(IOError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


def _pack(magic, header, sections):
    body = []
    entries = []
    offset = 0
    for name, arr, dtype in sections:
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": np.dtype(dtype).str.replace(">", "<").replace("=", "<"),
                        "offset": offset, "nbytes": len(raw),
                        "sha256": hashlib.sha256(raw).hexdigest()})
        body.append(raw)
        offset += len(raw)
    header = dict(header, sections=entries)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(body)


def _unpack(path, magic):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read: {exc}") from exc
    if blob[:8] != magic:
        raise FormatError(path, f"bad magic {blob[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen])
    except ValueError as exc:
        raise FormatError(path, f"corrupt header: {exc}") from exc
    base = 16 + hlen
    arrays = {}
    for e in header["sections"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(path, f"section {e['name']} truncated")
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise FormatError(path, f"checksum mismatch in section {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).copy()
    return header, arrays


def _atomic_write(path, payload):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        raise FormatError(path, f"cannot write: {exc}") from exc


def write_frame(path, frame):
    A = frame.A
    header = {
        "format": "MPPF", "version": 1,
        "N": frame.N, "W": frame.W, "H": frame.H,
        "seeds": {"master": frame.seed, "index": frame.index, "split": frame.split},
        "rho_heavy": frame.rho_heavy,
        "barriers": [b.to_dict() for b in frame.barriers],
    }
    sections = [
        ("rho", frame.rho, "<f8"),
        ("row_offsets", A.indptr, "<u8"),
        ("col_indices", A.indices, "<u4"),
        ("values", A.data, "<f8"),
        ("b", frame.b, "<f8"),
        ("cells", frame.cells, "<u4"),
    ]
    _atomic_write(path, _pack(FRAME_MAGIC, header, sections))


def read_frame(path):
    header, arr = _unpack(path, FRAME_MAGIC)
    N = header["N"]
    A = sp.csr_matrix((arr["values"], arr["col_indices"].astype(np.int64),
                       arr["row_offsets"].astype(np.int64)), shape=(N, N))
    try:
        A = check_csr(A)
    except ValueError as exc:
        raise FormatError(path, f"invalid CSR: {exc}") from exc
    seeds = header["seeds"]
    return Frame(N=N, W=header["W"], H=header["H"], cells=arr["cells"].astype(np.int64),
                 rho=arr["rho"], A=A, b=arr["b"], seed=seeds["master"], index=seeds["index"],
                 split=seeds["split"], rho_heavy=header["rho_heavy"],
                 barriers=[BarrierSpec(**b) for b in header["barriers"]])


def write_checkpoint(path, factors, metadata=None):
    p = factors.partition
    header = {
        "format": "HFTC", "layout_version": LAYOUT_VERSION,
        "N": p.N, "L": p.L, "L_s": factors.L_s,
        "shift": factors.shift,
        "metadata": metadata if metadata is not None else factors.metadata,
    }
    _atomic_write(path, _pack(CHECKPOINT_MAGIC, header, [("factors", factors.data, "<f4")]))


def read_checkpoint(path):
    header, arr = _unpack(path, CHECKPOINT_MAGIC)
    if header.get("layout_version") != LAYOUT_VERSION:
        raise FormatError(path, f"unsupported layout version {header.get('layout_version')}")
    part = build_partition(header["N"], header["L"])
    try:
        return FactorTensor(part, header["L_s"], arr["factors"].astype(np.float32),
                            shift=header.get("shift"), metadata=header.get("metadata") or {})
    except ValueError as exc:
        raise FormatError(path, str(exc)) from exc
