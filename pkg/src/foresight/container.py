"""Two-part container file for trained-model state.

Layout:

    line 1       magic "FSCONTAINER 1"
    line 2       decimal byte length of the JSON header
    then         the JSON header (UTF-8): {"meta": ..., "arrays": [...]}
    then         raw little-endian array payloads, concatenated in the
                 order declared by the header's "arrays" list

Each arrays entry records name, shape, and numpy dtype string, so the
payload needs no delimiters. Headers are serialized with sorted keys and
no timestamps: identical state writes identical bytes.
"""

import json

import numpy as np

from .errors import DataError

MAGIC = "FSCONTAINER 1"

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def save_container(path, meta, arrays):
    """Write metadata (JSON-serializable dict) plus named arrays."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.str not in _ALLOWED_DTYPES:
            arr = arr.astype("<f8" if arr.dtype.kind == "f" else "<i8")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
        })
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\n{len(header)}\n".encode("ascii"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path):
    """Read a container back; returns (meta, dict of arrays)."""
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii", errors="replace").rstrip("\n") != MAGIC:
            raise DataError(f"{path}: not a model container (bad magic)")
        try:
            header_len = int(fh.readline().decode("ascii").strip())
        except ValueError:
            raise DataError(f"{path}: malformed container header length")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: malformed container header: {exc}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError(
                    f"{path}: truncated payload for array {entry['name']!r}"
                )
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape)
        trailing = fh.read(1)
    if trailing:
        raise DataError(f"{path}: unexpected bytes after declared payload")
    return header["meta"], arrays
