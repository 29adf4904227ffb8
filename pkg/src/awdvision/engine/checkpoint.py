"""Binary checkpoint format for named parameters.

Layout (all integers little-endian uint32):

    magic+version  8 bytes  b"AWDVCKP1"
    count          uint32
    per parameter:
        name_len   uint32
        name       utf-8 bytes
        rank       uint32
        dims       rank * uint32
        payload    prod(dims) * float32 little-endian

Round-trips are bit-exact for float32 parameters.
"""

import struct

import numpy as np

MAGIC = b"AWDVCKP1"


def save_checkpoint(path, params):
    """Write an iterable of Parameters (or (name, array) pairs) to disk."""
    items = []
    seen = set()
    for p in params:
        name, value = (p.name, p.value) if hasattr(p, "name") else p
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
        items.append((name, np.ascontiguousarray(value, dtype="<f4")))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, value in items:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(value.tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered {name: float32 array} dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:8]!r})")
    off = 8
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        value = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = value.copy()
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after {count} parameters")
    return out
