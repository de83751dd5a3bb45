"""MNEMO1 checkpoint format.

Layout, all little-endian:

    magic   6 bytes  b"MNEMO1"
    version u32
    mode    u32 length + utf-8 bytes
    count   u32 number of sections
    section := name (u32 length + utf-8), u32 array count, arrays
    array   := name (u32 length + utf-8), u32 dtype code (0 float64,
               1 uint64), u32 ndim, ndim x u64 dims, row-major payload

Arrays are written in sorted name order so the byte stream is a pure
function of the contents: load(save(x)) == x bit for bit, including
generator state words stored as uint64."""

import struct
from dataclasses import dataclass

import numpy as np

from .. import lopt
from .. import rng as rng_mod

MAGIC = b"MNEMO1"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.uint64): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u8")}


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the loader."""


@dataclass(frozen=True)
class Checkpoint:
    version: int
    mode: str
    sections: dict


def _pack_str(value):
    data = value.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def checkpoint_bytes(ckpt):
    out = [MAGIC, struct.pack("<I", ckpt.version), _pack_str(ckpt.mode),
           struct.pack("<I", len(ckpt.sections))]
    for section_name in sorted(ckpt.sections):
        arrays = ckpt.sections[section_name]
        out.append(_pack_str(section_name))
        out.append(struct.pack("<I", len(arrays)))
        for array_name in sorted(arrays):
            # ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(arrays[array_name])
            if arr.ndim:
                arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(
                    f"array {section_name}/{array_name}: unsupported dtype "
                    f"{arr.dtype} (use float64 or uint64)")
            out.append(_pack_str(array_name))
            out.append(struct.pack("<II", _DTYPE_CODES[arr.dtype], arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.astype(arr.dtype.newbyteorder("<"),
                                  copy=False).tobytes())
    return b"".join(out)


def save_checkpoint(path, ckpt):
    data = checkpoint_bytes(ckpt)
    with open(path, "wb") as handle:
        handle.write(data)
    return len(data)


class _Reader:
    def __init__(self, path, data):
        self.path = path
        self.data = data
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated at byte {len(self.data)}: expected "
                f"{count} bytes for {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def name(self, what):
        length = self.u32(f"{what} length")
        return self.take(length, what).decode("utf-8")


def load_checkpoint(path):
    with open(path, "rb") as handle:
        data = handle.read()
    reader = _Reader(path, data)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0: expected "
                              f"{MAGIC!r}, found {magic!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} "
                              f"(expected {VERSION})")
    mode = reader.name("mode")
    sections = {}
    for _ in range(reader.u32("section count")):
        section_name = reader.name("section name")
        arrays = {}
        for _ in range(reader.u32(f"array count of [{section_name}]")):
            array_name = reader.name("array name")
            what = f"{section_name}/{array_name}"
            code = reader.u32(f"dtype of {what}")
            if code not in _CODE_DTYPES:
                raise CheckpointError(
                    f"{path}: unknown dtype code {code} for {what}")
            ndim = reader.u32(f"rank of {what}")
            shape = struct.unpack(f"<{ndim}Q",
                                  reader.take(8 * ndim, f"dims of {what}"))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = reader.take(8 * size, f"payload of {what}")
            arr = np.frombuffer(payload, dtype=_CODE_DTYPES[code])
            arrays[array_name] = arr.astype(arr.dtype.newbyteorder("="),
                                            copy=True).reshape(shape)
        sections[section_name] = arrays
    if reader.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.pos} trailing "
                              f"bytes at byte {reader.pos}")
    return Checkpoint(version=version, mode=mode, sections=sections)


def _mode_of(weights):
    if isinstance(weights, lopt.SuperWeights):
        return lopt.MODE_SUPER
    return weights.mode


def weights_to_checkpoint(weights, seed, next_outer=0, memory=None):
    """Bundle weights, optional cell memory, and the run's generator state.

    All meta-training randomness is derived from (seed, outer iteration),
    so the stored generator words are exactly the state a resumed run
    would continue from."""
    sections = {
        "weights": {name: np.array(tensor.data)
                    for name, tensor in lopt.named_parameters(weights)},
        "memory": {},
        "rng": {
            "philox": rng_mod.state_to_array(
                rng_mod.make_generator(seed, f"meta-outer-{next_outer}")),
            "seed": np.array([float(seed)]),
            "next_outer": np.array([float(next_outer)]),
        },
    }
    if memory is not None:
        sections["memory"] = {name: np.array(arr)
                              for name, arr in lopt.memory_arrays(memory)}
    return Checkpoint(version=VERSION, mode=_mode_of(weights),
                      sections=sections)


def weights_from_checkpoint(ckpt):
    """Rebuild optimizer weights; returns (weights, seed, next_outer)."""
    try:
        rng_section = ckpt.sections["rng"]
        seed = int(rng_section["seed"][0])
        next_outer = int(rng_section["next_outer"][0])
        stored = ckpt.sections["weights"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing section {exc}") from None
    if ckpt.mode == lopt.MODE_COORDINATE:
        weights = lopt.init_coordinate_weights(run_seed=seed)
    elif ckpt.mode == lopt.MODE_TENSOR:
        weights = lopt.init_tensor_weights(run_seed=seed)
    elif ckpt.mode == lopt.MODE_SUPER:
        weights = lopt.init_super_weights(run_seed=seed)
    else:
        raise CheckpointError(f"unknown optimizer mode {ckpt.mode!r}")
    try:
        weights = lopt.load_parameters(weights, stored)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint weights are missing "
                              f"parameter {exc}") from None
    return weights, seed, next_outer
