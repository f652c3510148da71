"""Single-file tensor container used for model checkpoints and detector files.

Layout: a textual header followed by a raw little-endian payload.

    <magic>\n
    <meta as one JSON line>\n
    tensor <name> <dim0,dim1,...> <dtype> <byte offset>\n
    ...
    end\n
    <payload: concatenated tensor bytes>

Offsets are relative to the start of the payload and must be contiguous.
Supported dtypes: f4, f8, i4. Writing then reading is bit-exact.
"""

import json

import numpy as np

from .errors import CheckpointError

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i4": np.dtype("<i4")}
_CODES = {v: k for k, v in _DTYPES.items()}


def write(path, magic: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    lines = [magic, json.dumps(meta, sort_keys=True, separators=(",", ":"))]
    payload = bytearray()
    seen = set()
    for name, arr in tensors:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        if arr.ndim == 0:
            raise CheckpointError(f"tensor {name!r} must have at least one dimension")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {shape} {code} {len(payload)}")
        payload += arr.astype(_DTYPES[code], copy=False).tobytes()
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(bytes(payload))


def read(path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def next_line(pos):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("truncated header")
        return blob[pos:nl].decode("utf-8"), nl + 1

    line, pos = next_line(0)
    if line != magic:
        raise CheckpointError(f"bad magic: expected {magic!r}, found {line!r}")
    meta_line, pos = next_line(pos)
    try:
        meta = json.loads(meta_line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unparseable metadata line: {exc}") from exc

    directory = []
    while True:
        line, pos = next_line(pos)
        if line == "end":
            break
        parts = line.split()
        if len(parts) != 5 or parts[0] != "tensor":
            raise CheckpointError(f"malformed directory line: {line!r}")
        _, name, shape_s, code, offset_s = parts
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code!r} for tensor {name!r}")
        try:
            shape = tuple(int(d) for d in shape_s.split(","))
            offset = int(offset_s)
        except ValueError as exc:
            raise CheckpointError(f"malformed directory line: {line!r}") from exc
        directory.append((name, shape, code, offset))

    payload = blob[pos:]
    tensors = {}
    expected = 0
    for name, shape, code, offset in directory:
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dt.itemsize
        if offset != expected:
            raise CheckpointError(f"directory offset mismatch for tensor {name!r}")
        expected += nbytes
        if offset + nbytes > len(payload):
            raise CheckpointError(
                f"payload truncated: tensor {name!r} needs {nbytes} bytes at "
                f"offset {offset} but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    if expected != len(payload):
        raise CheckpointError(
            f"payload has {len(payload)} bytes but directory declares {expected}"
        )
    return meta, tensors
