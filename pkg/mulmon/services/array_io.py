"""
Binary array chunks: uncompressed ``.npz`` containers of ``.npy`` members.

Every member is written little-endian and row-major, so each ``.npy`` header
records dtype (``<f4``, ``<f8``, ``<i4``), shape and ``fortran_order: False``.
The sha256 of the whole chunk is returned to the caller for the manifest.
"""
from __future__ import annotations

import hashlib
import io
import os
import zipfile
from pathlib import Path

import numpy as np

from ..errors import DatasetFormatError

# fixed member timestamp so equal arrays give equal bytes
_MEMBER_DATE = (1980, 1, 1, 0, 0, 0)
_LITTLE_ENDIAN = {"f": "<f{}", "i": "<i{}", "u": "<u{}", "b": "|b1"}


def _as_little_endian(array: np.ndarray) -> np.ndarray:
    kind = array.dtype.kind
    if kind not in _LITTLE_ENDIAN:
        raise TypeError(f"unsupported dtype for array chunk: {array.dtype}")
    dtype = np.dtype(_LITTLE_ENDIAN[kind].format(array.dtype.itemsize))
    return np.ascontiguousarray(array, dtype=dtype)


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, _as_little_endian(np.asarray(value)), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_MEMBER_DATE)
            info.external_attr = 0o600 << 16
            archive.writestr(info, member.getvalue())
    return buffer.getvalue()


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> str:
    payload = encode_arrays(arrays)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, target)
    return hashlib.sha256(payload).hexdigest()


def read_arrays(path: str | Path, expected_sha256: str | None = None) -> dict[str, np.ndarray]:
    source = Path(path)
    if not source.exists():
        raise DatasetFormatError(f"missing chunk {source.name}")
    payload = source.read_bytes()
    if expected_sha256 is not None and hashlib.sha256(payload).hexdigest() != expected_sha256:
        raise DatasetFormatError(f"checksum mismatch in chunk {source.name}")
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as archive:
            return {name: archive[name] for name in archive.files}
    except (ValueError, OSError, EOFError) as e:
        raise DatasetFormatError(f"corrupt chunk {source.name}: {e}") from e
