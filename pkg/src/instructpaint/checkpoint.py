"""Binary checkpoint container.

Layout: magic "LTTE", format version u32, tensor count u64, then
length-prefixed named tensors (name length u32, UTF-8 name, rank u32,
extents u64 each, dtype byte: 0=float32 / 1=float64, little-endian payload),
then a length-prefixed state JSON (step, optimizer counters, RNG state,
config hash) and a length-prefixed config JSON.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LTTE"
FORMAT_VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, state, config):
    """tensors: name -> ndarray; state/config: JSON-serializable dicts."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            f.write(arr.astype(_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())
        for blob in (state, config):
            enc = json.dumps(blob, sort_keys=True).encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (tensors dict, state dict, config dict)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = tuple(struct.unpack("<Q", _read_exact(f, 8, "extent"))[0] for _ in range(rank))
            (code,) = struct.unpack("<B", _read_exact(f, 1, "dtype"))
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * int(_DTYPES[code][-1])
            arr = np.frombuffer(_read_exact(f, nbytes, f"payload of {name}"), dtype=_DTYPES[code])
            tensors[name] = arr.reshape(shape).copy()
        (slen,) = struct.unpack("<I", _read_exact(f, 4, "state length"))
        state = json.loads(_read_exact(f, slen, "state json").decode("utf-8"))
        (clen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        config = json.loads(_read_exact(f, clen, "config json").decode("utf-8"))
    return tensors, state, config


def rng_state_to_json(rng):
    """PCG64 generator state as JSON-safe dict (ints as strings)."""
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def rng_state_from_json(blob):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": blob["bit_generator"],
        "state": {"state": int(blob["state"]), "inc": int(blob["inc"])},
        "has_uint32": int(blob["has_uint32"]),
        "uinteger": int(blob["uinteger"]),
    }
    return rng
