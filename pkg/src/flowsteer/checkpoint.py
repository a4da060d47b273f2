"""Binary parameter checkpoints.

Layout (little-endian): the 4-byte magic ``MFS1`` followed by one record per
parameter until end of file::

    u32 name_length | name (UTF-8) | u32 rank | u32 extent * rank | f32 payload
"""

import struct

import numpy as np

MAGIC = b"MFS1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params, path):
    """Write an ordered name -> array (or Tensor) mapping."""
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint back into a dict of float32 arrays, preserving order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        piece = blob[pos : pos + n]
        pos += n
        return piece

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return out
