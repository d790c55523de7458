"""Q/K/V bundles: PQKV binary serialization and synthetic generators.

All generators draw from numpy's ``Philox`` counter-based bit generator
(4x64, 10 rounds) seeded with the integer seed, and sample normals with
``Generator.standard_normal``. Draws are always made in float64 and then cast
to the bundle dtype, so an F32 bundle is the rounded F64 bundle of the same
seed.

PQKV v1 layout (little-endian)::

    magic "PQKV" | version u16 | dtype u16 | num_heads u32 | head_dim u32 | seq_len u64
    Q payload | K payload | V payload        (each row-major [heads][L][d])

dtype 1 is IEEE-754 binary32, dtype 2 is binary64. The header is 24 bytes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO

import numpy as np

from .errors import (
    BadMagic,
    DegenerateScale,
    InvalidDimension,
    MalformedFile,
    NonFiniteValue,
    TensorWriteError,
    UnsupportedDtype,
    UnsupportedVersion,
    ZeroRow,
)

MAGIC = b"PQKV"
VERSION = 1
HEADER = struct.Struct("<4sHHIIQ")
assert HEADER.size == 24


class DType(IntEnum):
    F32 = 1
    F64 = 2

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f8")

    @classmethod
    def parse(cls, value: "str | DType | np.dtype | type") -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str) and value.upper() in ("F32", "F64"):
            return cls[value.upper()]
        dt = np.dtype(value)
        if dt == np.float32:
            return cls.F32
        if dt == np.float64:
            return cls.F64
        raise UnsupportedDtype(f"unsupported dtype {value!r}")


@dataclass(frozen=True, eq=False)
class TensorBundle:
    """Multi-head Q, K, V arrays of shape ``(num_heads, seq_len, head_dim)``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.q, self.k, self.v)}
        if len(shapes) != 1 or self.q.ndim != 3:
            raise InvalidDimension(
                f"Q, K, V must share one 3-D shape, got {[a.shape for a in (self.q, self.k, self.v)]}"
            )
        if min(self.q.shape) < 1:
            raise InvalidDimension(f"zero dimension in shape {self.q.shape}")
        dtypes = {a.dtype for a in (self.q, self.k, self.v)}
        if len(dtypes) != 1:
            raise InvalidDimension(f"Q, K, V dtypes differ: {dtypes}")
        DType.parse(self.q.dtype)

    @property
    def num_heads(self) -> int:
        return self.q.shape[0]

    @property
    def seq_len(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]

    @property
    def dtype(self) -> DType:
        return DType.parse(self.q.dtype)

    def head(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.q[h], self.k[h], self.v[h]

    def header(self) -> dict:
        return {
            "num_heads": self.num_heads,
            "seq_len": self.seq_len,
            "head_dim": self.head_dim,
            "dtype": self.dtype.name,
            "nbytes": HEADER.size + 3 * self.q.size * self.q.itemsize,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorBundle):
            return NotImplemented
        return self.q.dtype == other.q.dtype and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in ((self.q, other.q), (self.k, other.k), (self.v, other.v))
        )


def _check_finite(name: str, a: np.ndarray) -> None:
    bad = ~np.isfinite(a)
    if bad.any():
        h, r, c = (int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteValue(name, h, r, c)


def write_bundle(bundle: TensorBundle, sink: BinaryIO) -> int:
    """Write ``bundle`` in PQKV format and return the number of bytes written."""
    for name, a in zip("QKV", (bundle.q, bundle.k, bundle.v)):
        _check_finite(name, a)
    dt = bundle.dtype
    chunks = [
        HEADER.pack(MAGIC, VERSION, int(dt), bundle.num_heads, bundle.head_dim, bundle.seq_len)
    ]
    chunks += [np.ascontiguousarray(a, dtype=dt.numpy).tobytes() for a in (bundle.q, bundle.k, bundle.v)]
    offset = 0
    for chunk in chunks:
        try:
            n = sink.write(chunk)
        except OSError as exc:
            raise TensorWriteError(offset, exc) from exc
        if n is not None and n != len(chunk):
            raise TensorWriteError(offset + n, OSError("short write"))
        offset += len(chunk)
    return offset


def read_bundle(source: BinaryIO) -> TensorBundle:
    head = source.read(HEADER.size)
    if len(head) >= 4 and head[:4] != MAGIC:
        raise BadMagic(f"expected magic b'PQKV', got {head[:4]!r}")
    if len(head) < HEADER.size:
        raise MalformedFile(
            f"header truncated: expected {HEADER.size} bytes, got {len(head)}",
            HEADER.size, len(head),
        )
    _, version, dtype_tag, heads, dim, seq_len = HEADER.unpack(head)
    if version != VERSION:
        raise UnsupportedVersion(f"PQKV version {version} not supported (expected {VERSION})")
    try:
        dt = DType(dtype_tag)
    except ValueError:
        raise UnsupportedDtype(f"dtype tag {dtype_tag} not supported (1=F32, 2=F64)") from None
    if heads == 0 or dim == 0 or seq_len == 0:
        raise MalformedFile(f"zero dimension in header: heads={heads} d={dim} L={seq_len}")

    count = heads * seq_len * dim
    expected = 3 * count * dt.numpy.itemsize
    payload = source.read(expected)
    if len(payload) != expected:
        raise MalformedFile(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}",
            expected, len(payload),
        )
    if source.read(1):
        raise MalformedFile(f"trailing bytes after {expected}-byte payload", expected, expected + 1)
    flat = np.frombuffer(payload, dtype=dt.numpy).astype(dt.numpy.newbyteorder("="))
    arrays = [a.reshape(heads, seq_len, dim) for a in np.split(flat, 3)]
    for name, a in zip("QKV", arrays):
        _check_finite(name, a)
    return TensorBundle(*arrays)


def save_bundle(bundle: TensorBundle, path) -> int:
    buf = io.BytesIO()
    write_bundle(bundle, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return buf.tell()


def load_bundle(path) -> TensorBundle:
    with open(path, "rb") as fh:
        return read_bundle(fh)


# -- generators --------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _check_dims(heads: int, L: int, d: int) -> None:
    if heads < 1 or L < 1 or d < 1:
        raise InvalidDimension(f"dimensions must be >= 1, got heads={heads} L={L} d={d}")


def gen_gaussian(seed: int, heads: int, L: int, d: int, std: float = 1.0, dtype="F64") -> TensorBundle:
    """I.i.d. N(0, std^2) entries; Q, K, V drawn in that order."""
    _check_dims(heads, L, d)
    if not std > 0:
        raise DegenerateScale(f"std must be > 0, got {std}")
    dt = DType.parse(dtype).numpy
    rng = make_rng(seed)
    q, k, v = (std * rng.standard_normal((heads, L, d)) for _ in range(3))
    return TensorBundle(q.astype(dt), k.astype(dt), v.astype(dt))


def cluster_assignment(L: int, n_clusters: int) -> np.ndarray:
    """Contiguous runs: row ``r`` belongs to cluster ``r * n_clusters // L``."""
    return (np.arange(L) * n_clusters) // L


def gen_clustered(
    seed: int,
    heads: int,
    L: int,
    d: int,
    n_clusters: int = 16,
    concentration: float = 4.0,
    noise_std: float = 0.3,
    kv_coupling: float = 0.0,
    dtype="F64",
) -> TensorBundle:
    """Keys in contiguous clusters, queries pointed at a few cluster centres.

    Per head:

    * ``n_clusters`` centres ``c_m ~ N(0, I_d)``; key row ``r`` is
      ``c[assign(r)] + noise_std * z``.
    * A random subset of ``max(1, n_clusters // 4)`` centres is "hot". Query
      rows are partitioned into the same contiguous runs as keys, each run
      targets one hot centre, and ``q = concentration * c / |c| + z``, so the
      scaled score against keys of the targeted cluster is about ``concentration``.
    * ``v = z + kv_coupling * (k - c[assign]) @ W`` with ``W ~ N(0, 1/d)``
      shared across rows. Values then depend linearly on each key's offset
      from its centre, so the within-block key/value cross-covariance ``H_j``
      is similar across blocks. The default ``kv_coupling=0`` gives i.i.d. values;
      ``W`` is drawn either way so the other tensors do not depend on it.
    """
    _check_dims(heads, L, d)
    if n_clusters < 1 or n_clusters > L:
        raise InvalidDimension(f"n_clusters must be in [1, L={L}], got {n_clusters}")
    if noise_std < 0 or concentration < 0:
        raise DegenerateScale("noise_std and concentration must be >= 0")
    dt = DType.parse(dtype).numpy
    rng = make_rng(seed)
    assign = cluster_assignment(L, n_clusters)
    n_hot = max(1, n_clusters // 4)

    qs, ks, vs = [], [], []
    for _ in range(heads):
        centres = rng.standard_normal((n_clusters, d))
        k = centres[assign] + noise_std * rng.standard_normal((L, d))
        hot = rng.choice(n_clusters, size=n_hot, replace=False)
        target = hot[rng.integers(0, n_hot, size=n_clusters)][assign]
        unit = centres / np.linalg.norm(centres, axis=1, keepdims=True)
        q = concentration * unit[target] + rng.standard_normal((L, d))
        w = rng.standard_normal((d, d)) / np.sqrt(d)
        v = rng.standard_normal((L, d)) + kv_coupling * ((k - centres[assign]) @ w)
        qs.append(q)
        ks.append(k)
        vs.append(v)
    return TensorBundle(*(np.stack(x).astype(dt) for x in (qs, ks, vs)))


def qk_normalize(bundle: TensorBundle, target_norm: float = 1.0) -> TensorBundle:
    """Rescale every Q and K row to Euclidean norm ``target_norm``."""
    if not target_norm > 0:
        raise DegenerateScale(f"target_norm must be > 0, got {target_norm}")
    out = []
    for name, a in (("Q", bundle.q), ("K", bundle.k)):
        a64 = a.astype(np.float64)
        norms = np.linalg.norm(a64, axis=-1, keepdims=True)
        zero = norms[..., 0] == 0
        if zero.any():
            h, r = (int(i) for i in np.argwhere(zero)[0])
            raise ZeroRow(name, h, r)
        out.append((a64 * (target_norm / norms)).astype(a.dtype))
    return TensorBundle(out[0], out[1], bundle.v)
