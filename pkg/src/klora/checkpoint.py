"""Binary adapter checkpoints.

Layout (all integers and floats little-endian):

    magic            4 bytes  b"SNLA"
    format version   u16      currently 1
    layer count      u32
    per layer:
        m, n, r      u32 x 3
        kind id      u16
        coeff count  u32
        coeffs       f64 x count   (order documented on KernelSpec)
        A blob       f64 x (n * r), row-major
        B blob       f64 x (m * r), row-major
    checksum         8 bytes  blake2b(digest_size=8) of everything above

Only the learnable adapter state is stored (factors and kernel
coefficients); frozen base weights are not part of the format. Round-trips
are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import KernelKind, KernelSpec, LowRankPair
from .tensor import Tensor

MAGIC = b"SNLA"
FORMAT_VERSION = 1

_KIND_IDS = {
    KernelKind.LINEAR: 0,
    KernelKind.P_LINEAR: 1,
    KernelKind.SIGMOID: 2,
    KernelKind.RBF: 3,
    KernelKind.RBF_NORMALIZED: 4,
    KernelKind.MIX_K: 5,
}
_IDS_TO_KIND = {v: k for k, v in _KIND_IDS.items()}


class CheckpointError(ValueError):
    """Base class for checkpoint problems."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class LayerRecord:
    m: int
    n: int
    r: int
    kind: KernelKind
    coefficients: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def to_pair_and_spec(self, trainable: bool = True):
        pair = LowRankPair(
            A=Tensor(self.a, requires_grad=trainable),
            B=Tensor(self.b, requires_grad=trainable),
        )
        spec = KernelSpec.from_coefficient_values(self.kind, self.coefficients, trainable)
        return pair, spec


def _layer_records(source) -> list:
    if hasattr(source, "adapted_layers"):
        layers = source.adapted_layers()
    else:
        layers = list(source)
    records = []
    for layer in layers:
        pair, spec = layer.pair, layer.spec
        records.append(
            LayerRecord(
                m=pair.m,
                n=pair.n,
                r=pair.r,
                kind=spec.kind,
                coefficients=spec.coefficient_values(),
                a=np.ascontiguousarray(pair.A.data),
                b=np.ascontiguousarray(pair.B.data),
            )
        )
    return records


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(source, path) -> None:
    """Write the adapter state of a model (or list of adapted layers)."""
    records = _layer_records(source)
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(records))]
    for rec in records:
        parts.append(struct.pack("<IIIHI", rec.m, rec.n, rec.r,
                                 _KIND_IDS[rec.kind], rec.coefficients.size))
        parts.append(_f64_bytes(rec.coefficients))
        parts.append(_f64_bytes(rec.a))
        parts.append(_f64_bytes(rec.b))
    payload = b"".join(parts)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    Path(path).write_bytes(payload + digest)


def load_checkpoint(path) -> list:
    """Read layer records back; every float is bit-identical to what was saved."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not an adapter checkpoint: bad magic {blob[:4]!r}")
    if len(blob) < 6:
        raise ChecksumError("file truncated before version field")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if len(blob) < 8 + 10:
        raise ChecksumError("file truncated")
    payload, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise ChecksumError("checksum mismatch (file corrupted or truncated)")

    offset = 6
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    records = []
    for _ in range(count):
        m, n, r, kind_id, n_coeff = struct.unpack_from("<IIIHI", payload, offset)
        offset += struct.calcsize("<IIIHI")
        if kind_id not in _IDS_TO_KIND:
            raise CheckpointError(f"unknown kernel kind id {kind_id}")
        coeffs = np.frombuffer(payload, dtype="<f8", count=n_coeff, offset=offset).copy()
        offset += 8 * n_coeff
        a = np.frombuffer(payload, dtype="<f8", count=n * r, offset=offset).copy().reshape(n, r)
        offset += 8 * n * r
        b = np.frombuffer(payload, dtype="<f8", count=m * r, offset=offset).copy().reshape(m, r)
        offset += 8 * m * r
        records.append(
            LayerRecord(m=m, n=n, r=r, kind=_IDS_TO_KIND[kind_id],
                        coefficients=coeffs, a=a, b=b)
        )
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes after last layer")
    return records


def install_records(model, records) -> None:
    """Load records into an existing model's adapted layers (dims must match)."""
    layers = model.adapted_layers() if hasattr(model, "adapted_layers") else list(model)
    if len(layers) != len(records):
        raise CheckpointError(f"model has {len(layers)} layers, checkpoint {len(records)}")
    for layer, rec in zip(layers, records):
        if (layer.m, layer.n) != (rec.m, rec.n):
            raise CheckpointError(
                f"layer is {(layer.m, layer.n)} but record is {(rec.m, rec.n)}"
            )
        pair, spec = rec.to_pair_and_spec()
        layer.pair = pair
        layer.spec = spec
