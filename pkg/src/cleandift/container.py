"""Self-describing tensor container used for checkpoints, projection heads,
probes and feature-cache entries: a JSON manifest (name/shape/dtype/offset per
tensor plus arbitrary metadata) followed by raw little-endian float32 blobs."""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CDFT"
_HEADER_FMT = "<4sQ"  # magic + header byte length


def save_container(path: str, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    """Write tensors (converted to little-endian float32) plus metadata.
    The write is atomic: temp file in the same directory, then rename."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        # np.asarray with order="C" (not ascontiguousarray) so 0-d shapes survive
        arr = np.asarray(arr, dtype="<f4", order="C")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "metadata": metadata}).encode("utf-8")
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack(_HEADER_FMT, MAGIC, len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic, header_len = struct.unpack(_HEADER_FMT, f.read(struct.calcsize(_HEADER_FMT)))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic {magic!r})")
        header = json.loads(f.read(header_len).decode("utf-8"))
        data_start = f.tell()
        tensors = {}
        for entry in header["tensors"]:
            f.seek(data_start + entry["offset"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"{path}: truncated blob for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return tensors, header["metadata"]
