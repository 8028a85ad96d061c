"""Checkpoint file: text manifest, then a little-endian float64 blob.

Layout::

    nere-checkpoint 1
    config <json>            (optional, one line)
    params <count>
    <name> <d1>,<d2>,...     (one line per array, blob order)
    <raw bytes>
"""

import json
from pathlib import Path

import numpy as np

from nere.errors import FormatError

MAGIC = "nere-checkpoint 1"


def dumps(arrays, config=None) -> bytes:
    lines = [MAGIC]
    if config is not None:
        lines.append("config " + json.dumps(config, sort_keys=True, separators=(",", ":")))
    lines.append(f"params {len(arrays)}")
    blobs = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name may not contain whitespace: {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)}")
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def loads(data: bytes):
    """Returns (arrays, config)."""
    pos = 0
    lineno = 0

    def line():
        nonlocal pos, lineno
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated checkpoint manifest", line=lineno + 1)
        text = data[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        lineno += 1
        return text

    if line() != MAGIC:
        raise FormatError("not a nere checkpoint", line=1)
    config = None
    head = line()
    if head.startswith("config "):
        config = json.loads(head[len("config "):])
        head = line()
    if not head.startswith("params "):
        raise FormatError("expected 'params <count>'", line=lineno)
    count = int(head.split()[1])
    specs = []
    for _ in range(count):
        parts = line().split(" ")
        if len(parts) != 2:
            raise FormatError("bad parameter entry", line=lineno)
        shape = tuple(int(x) for x in parts[1].split(",") if x)
        specs.append((parts[0], shape))
    arrays = {}
    for name, shape in specs:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + nbytes > len(data):
            raise FormatError(f"blob truncated while reading {name}")
        arrays[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after blob")
    return arrays, config


def save(path, arrays, config=None):
    Path(path).write_bytes(dumps(arrays, config))


def load(path):
    return loads(Path(path).read_bytes())
