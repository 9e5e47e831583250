"""Dense tensor substrate: creation ops, elementwise math, seeded RNG, NTF file I/O.

Tensors are plain C-contiguous numpy float32 arrays in a fixed row-major
(batch, channel, depth, height, width) layout; 1- to 5-D shapes are allowed.
Arrays returned by public operations are treated as immutable by convention:
layers never write into an array they did not just allocate.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Sequence

import numpy as np

DTYPE = np.float32
MAX_NDIM = 5

NTF_MAGIC = b"NTF1"


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    """Validate a shape: 1..5 dims, every dim a positive integer."""
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_NDIM:
        raise ValueError(f"shape must have 1..{MAX_NDIM} dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"shape dims must be >= 1, got {dims}")
    return dims


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(check_shape(shape), dtype=DTYPE)


def full(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=DTYPE)


def astensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce nested sequences / arrays to a float32 tensor."""
    t = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(check_shape(shape))
    return t


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "mul")
    return a * b


def max_with_scalar(a: np.ndarray, s: float) -> np.ndarray:
    return np.maximum(a, DTYPE(s))


def flat_index(shape: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major flat index of a multi-index; ((((n*C+c)*D+d)*H+h)*W+w) for 5-D."""
    flat = 0
    for dim, i in zip(shape, idx):
        if not 0 <= i < dim:
            raise IndexError(f"index {tuple(idx)} out of bounds for shape {tuple(shape)}")
        flat = flat * dim + i
    return flat


class Rng:
    """Seeded random stream backed by the Philox 4x64 counter-based generator.

    The generator algorithm is pinned so a given seed reproduces the same value
    stream on every platform and run. Derived child streams are keyed by integer
    tags, so independent consumers (init, shuffling, dropout, synthesis) never
    share or race a stream.
    """

    def __init__(self, seed: int, _tags: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.tags = _tags
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, *_tags])))

    def child(self, *tags: int) -> "Rng":
        """Independent derived stream; same (seed, tags) always gives the same stream."""
        return Rng(self.seed, self.tags + tuple(int(t) for t in tags))

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=check_shape(shape)).astype(DTYPE)

    def normal(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=check_shape(shape)) * std + mean).astype(DTYPE)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def fill_uniform(rng: Rng, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return rng.uniform(shape, low, high)


def fill_normal(rng: Rng, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return rng.normal(shape, mean, std)


def assert_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


# ---------------------------------------------------------------------------
# NTF: neutral tensor file format.
# Layout: b"NTF1" | u32le header length | UTF-8 JSON header | raw payload.
# Header: {"dtype": "f32", "shape": [...], "byte_order": "little"}.
# Round-trips are bit-exact.
# ---------------------------------------------------------------------------

def write_ntf(f: BinaryIO | str, t: np.ndarray) -> None:
    t = np.ascontiguousarray(t, dtype=DTYPE)
    header = json.dumps(
        {"dtype": "f32", "shape": list(t.shape), "byte_order": "little"},
        sort_keys=True,
    ).encode("utf-8")
    if isinstance(f, str):
        with open(f, "wb") as fh:
            write_ntf(fh, t)
        return
    f.write(NTF_MAGIC)
    f.write(struct.pack("<I", len(header)))
    f.write(header)
    f.write(t.astype("<f4", copy=False).tobytes())


def read_ntf(f: BinaryIO | str) -> np.ndarray:
    if isinstance(f, str):
        with open(f, "rb") as fh:
            return read_ntf(fh)
    magic = f.read(4)
    if magic != NTF_MAGIC:
        raise ValueError(f"not an NTF file (magic {magic!r})")
    (hlen,) = struct.unpack("<I", f.read(4))
    header = json.loads(f.read(hlen).decode("utf-8"))
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise ValueError(f"unsupported NTF header {header}")
    shape = check_shape(header["shape"])
    count = int(np.prod(shape))
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ValueError(f"NTF payload truncated: expected {count * 4} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return np.ascontiguousarray(data).astype(DTYPE, copy=False)
