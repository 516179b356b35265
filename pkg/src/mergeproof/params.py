"""Named-tensor parameter store, task vectors, masks and the checkpoint format.

Every model in the toolkit is a :class:`ParamSet`: an ordered mapping from
layer name to a float64 array. Iteration is always lexicographic by name so
that flattening, hashing and serialization are reproducible across processes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

MAGIC = b"MGF1"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class AlignmentError(ValueError):
    """Raised when two parameter sets do not share layer names and shapes."""


class CheckpointError(ValueError):
    """Raised for malformed or unsupported checkpoint files."""


class ParamSet:
    """Immutable ordered map ``layer name -> float64 array`` plus string metadata."""

    __slots__ = ("_tensors", "meta")

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 meta: Mapping[str, str] | None = None, *, copy: bool = True):
        tensors = tensors or {}
        out = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ValueError(f"layer names must be non-empty strings, got {name!r}")
            raw = tensors[name]
            arr = np.array(raw, dtype=np.float64) if copy else np.asarray(raw, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"layer {name!r} contains non-finite values")
            arr.setflags(write=False)
            out[name] = arr
        self._tensors = out
        self.meta = {str(k): str(v) for k, v in (meta or {}).items()}

    # mapping-ish interface
    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def __repr__(self) -> str:
        layers = ", ".join(f"{k}{list(v.shape)}" for k, v in self._tensors.items())
        return f"ParamSet({layers})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        if self.shapes() != other.shapes():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None  # type: ignore[assignment]

    def check_aligned(self, other: "ParamSet") -> None:
        mine, theirs = self.shapes(), other.shapes()
        for name in sorted(set(mine) | set(theirs)):
            if name not in mine or name not in theirs:
                raise AlignmentError(f"layer {name!r} missing from one operand")
            if mine[name] != theirs[name]:
                raise AlignmentError(
                    f"layer {name!r} has shape {mine[name]} vs {theirs[name]}")

    def is_aligned(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes()

    def map(self, fn: Callable[[np.ndarray], np.ndarray], meta=None) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self.items()}, meta, copy=False)

    def replace(self, updates: Mapping[str, np.ndarray], meta=None) -> "ParamSet":
        """Return a copy with some layers swapped out (shapes must match)."""
        out = dict(self._tensors)
        for name, arr in updates.items():
            if name not in out:
                raise AlignmentError(f"layer {name!r} not present")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != out[name].shape:
                raise AlignmentError(
                    f"layer {name!r} has shape {arr.shape} vs {out[name].shape}")
            out[name] = arr
        return ParamSet(out, self.meta if meta is None else meta)

    def with_meta(self, **meta: object) -> "ParamSet":
        merged = dict(self.meta)
        merged.update({k: str(v) for k, v in meta.items()})
        return ParamSet(self._tensors, merged, copy=False)

    def fingerprint(self) -> str:
        """64-bit content hash (hex) over names, shapes and little-endian payload."""
        h = hashlib.blake2b(digest_size=8)
        for name, arr in self.items():
            h.update(name.encode())
            h.update(json.dumps(list(arr.shape)).encode())
            h.update(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.items()}


def zeros_like(p: ParamSet) -> ParamSet:
    return p.map(np.zeros_like)


def ones_like(p: ParamSet) -> ParamSet:
    return p.map(np.ones_like)


def axpy(a: float, x: ParamSet, y: ParamSet) -> ParamSet:
    """Elementwise ``a * x + y``."""
    x.check_aligned(y)
    return ParamSet({k: a * x[k] + y[k] for k in x}, copy=False)


def add(x: ParamSet, y: ParamSet) -> ParamSet:
    return axpy(1.0, x, y)


def sub(x: ParamSet, y: ParamSet) -> ParamSet:
    x.check_aligned(y)
    return ParamSet({k: x[k] - y[k] for k in x}, copy=False)


def scale(a: float, x: ParamSet) -> ParamSet:
    return x.map(lambda v: a * v)


def linear_combination(coeffs, xs) -> ParamSet:
    """``sum_i coeffs[i] * xs[i]`` over aligned parameter sets."""
    xs = list(xs)
    coeffs = list(coeffs)
    if not xs or len(xs) != len(coeffs):
        raise ValueError("need matching, non-empty coefficient and operand lists")
    for x in xs[1:]:
        xs[0].check_aligned(x)
    out = {k: sum(c * x[k] for c, x in zip(coeffs, xs)) for k in xs[0]}
    return ParamSet(out, copy=False)


def flatten(x: ParamSet) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([v.ravel() for v in x._tensors.values()])


def unflatten(vec: np.ndarray, like: ParamSet, meta=None) -> ParamSet:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != like.num_params:
        raise AlignmentError(f"vector of length {vec.size} does not fit {like.num_params} params")
    out, i = {}, 0
    for name, arr in like.items():
        out[name] = vec[i:i + arr.size].reshape(arr.shape)
        i += arr.size
    return ParamSet(out, meta, copy=False)


def norm2(x: ParamSet) -> float:
    v = flatten(x)
    # rescale first so tiny or huge entries do not under/overflow when squared
    s = float(np.max(np.abs(v))) if v.size else 0.0
    return s * float(np.linalg.norm(v / s)) if s > 0 else 0.0


def dot(x: ParamSet, y: ParamSet) -> float:
    x.check_aligned(y)
    return float(np.dot(flatten(x), flatten(y)))


@dataclass(frozen=True)
class TaskVector:
    """Delta ``model - base`` with the fingerprint of the base it came from."""

    delta: ParamSet
    base_fingerprint: str

    def check_base(self, base: ParamSet) -> None:
        self.delta.check_aligned(base)
        if base.fingerprint() != self.base_fingerprint:
            raise AlignmentError("task vector was built from a different base model")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TaskVector":
        return TaskVector(self.delta.map(fn), self.base_fingerprint)


def task_vector(model: ParamSet, base: ParamSet) -> TaskVector:
    return TaskVector(sub(model, base), base.fingerprint())


class MaskSet(ParamSet):
    """ParamSet whose every element is exactly 0 or 1."""

    __slots__ = ()

    def __init__(self, tensors=None, meta=None, *, copy: bool = True):
        super().__init__(tensors, meta, copy=copy)
        for name, arr in self.items():
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValueError(f"mask layer {name!r} has values outside {{0, 1}}")

    @property
    def ones(self) -> int:
        return int(sum(int(v.sum()) for _, v in self.items()))


def apply_mask(m: ParamSet, x: ParamSet) -> ParamSet:
    """Hadamard product of a {0,1} mask with a parameter set."""
    m.check_aligned(x)
    if not isinstance(m, MaskSet):
        m = MaskSet(m._tensors, copy=False)
    return ParamSet({k: m[k] * x[k] for k in x}, copy=False)


# -- checkpoint file format --------------------------------------------------
#
# MGF1 | u64 LE header length | UTF-8 JSON header | raw <f8 payload
# header = {"version": 1, "tensors": [{name, shape, offset, len}], "meta": {...}}
# offset and len are in bytes, relative to the payload start.

def encode_checkpoint(p: ParamSet) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in p.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "tensors": entries, "meta": dict(sorted(p.meta.items()))}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> ParamSet:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise CheckpointError("header length exceeds file size")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or "version" not in header:
        raise CheckpointError("corrupt header: missing version")
    if header["version"] != FORMAT_VERSION:
        raise CheckpointError(f"unknown format version {header['version']!r}")
    payload = memoryview(data)[12 + hlen:]
    tensors = {}
    expected_end = 0
    for entry in header.get("tensors", []):
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt tensor entry: {exc}") from None
        if nbytes != math.prod(shape) * _DTYPE.itemsize:
            raise CheckpointError(f"tensor {name!r}: shape {shape} does not match length {nbytes}")
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(
                f"tensor {name!r}: payload length {len(payload)} too short for offset {offset}+{nbytes}")
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).reshape(shape)
        expected_end = max(expected_end, offset + nbytes)
    if expected_end != len(payload):
        raise CheckpointError(f"payload length {len(payload)} != declared {expected_end}")
    return ParamSet(tensors, header.get("meta", {}))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{uuid.uuid4().hex}.tmp")
    try:
        with open(tmp, "xb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def save_checkpoint(p: ParamSet, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_checkpoint(p))


def load_checkpoint(path: str | os.PathLike) -> ParamSet:
    return decode_checkpoint(Path(path).read_bytes())
