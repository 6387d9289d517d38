"""Binary tensor container and model / dataset serialization.

Container layout (all integers little-endian):

    magic  b"HXLM"
    u32    version (currently 1)
    then per tensor, until end of file:
        u32    name length in bytes
        bytes  UTF-8 name
        u64    rows
        u64    cols
        f64[]  row-major values

Float64 bit patterns round-trip exactly, so write/read/write is
byte-identical.  Heads and datasets are encoded as named 2-D tensors
(vectors as one row, scalars and enum codes packed into a meta row);
datasets get a JSON provenance sidecar next to the tensor file.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .covariance import (
    HASHED_SPACE,
    LOGIT_SPACE,
    PRE_LOGIT_SPACE,
    TAILS,
    VARIANTS,
    CovarianceSpec,
)
from .datagen import SyntheticDataset
from .errors import DataError
from .sampling import Head
from .temperature import Temperature

MAGIC = b"HXLM"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named 2-D float64 tensors in dict order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U64.pack(arr.shape[0]))
            fh.write(_U64.pack(arr.shape[1]))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by write_tensors; strict about format."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor container (bad magic)")
    (version,) = _U32.unpack_from(data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated container")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (rows,) = _U64.unpack(take(8))
        (cols,) = _U64.unpack(take(8))
        raw = take(rows * cols * 8)
        arr = np.frombuffer(raw, dtype="<f8").reshape(rows, cols)
        out[name] = arr.astype(np.float64, copy=True)
    return out


_VARIANT_CODES = {None: 0.0, LOGIT_SPACE: 1.0, PRE_LOGIT_SPACE: 2.0, HASHED_SPACE: 3.0}
_TAIL_CODES = {None: 0.0, "rank_one": 1.0, "diag": 2.0}


def _row(vec) -> np.ndarray:
    return np.asarray(vec, dtype=np.float64)[None, :]


def save_head(path, head: Head) -> None:
    variant = head.spec.variant if head.spec is not None else None
    tail = head.spec.tail if head.spec is not None else None
    temp = head.temperature
    tensors = {
        "meta": np.array(
            [[_VARIANT_CODES[variant], _TAIL_CODES[tail], temp.t, temp.tau_min, temp.tau_max]]
        ),
        "W": head.W,
        "b": _row(head.b),
    }
    if head.spec is not None:
        s = head.spec
        tensors.update(
            J=s.J,
            K_het=s.K_het,
            b_het=_row(s.b_het),
            K_diag=s.K_diag,
            b_diag=_row(s.b_diag),
        )
        if s.variant == HASHED_SPACE:
            tensors["bucket_map"] = _row(s.bucket_map.astype(np.float64))
    write_tensors(path, tensors)


def load_head(path) -> Head:
    tensors = read_tensors(path)
    try:
        meta = tensors["meta"][0]
        W = tensors["W"]
        b = tensors["b"][0]
    except KeyError as exc:
        raise DataError(f"{path}: missing tensor {exc}") from None
    code_to_variant = {v: k for k, v in _VARIANT_CODES.items()}
    code_to_tail = {v: k for k, v in _TAIL_CODES.items()}
    if meta.shape[0] != 5 or meta[0] not in code_to_variant or meta[1] not in code_to_tail:
        raise DataError(f"{path}: malformed head metadata")
    variant = code_to_variant[meta[0]]
    tail = code_to_tail[meta[1]]
    temp = Temperature(t=meta[2], tau_min=meta[3], tau_max=meta[4])
    spec = None
    if variant is not None:
        try:
            bucket = None
            if variant == HASHED_SPACE:
                bucket = tensors["bucket_map"][0].astype(np.int64)
            spec = CovarianceSpec(
                variant=variant,
                tail=tail,
                J=tensors["J"],
                K_het=tensors["K_het"],
                b_het=tensors["b_het"][0],
                K_diag=tensors["K_diag"],
                b_diag=tensors["b_diag"][0],
                bucket_map=bucket,
            )
        except KeyError as exc:
            raise DataError(f"{path}: missing tensor {exc}") from None
        except ValueError as exc:
            raise DataError(f"{path}: inconsistent head tensors: {exc}") from None
    try:
        return Head(W=W, b=b, spec=spec, temperature=temp)
    except ValueError as exc:
        raise DataError(f"{path}: inconsistent head tensors: {exc}") from None


def provenance_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(path, dataset: SyntheticDataset, provenance: dict | None = None) -> None:
    """Write X/y tensors plus a JSON provenance sidecar (<path>.json)."""
    write_tensors(path, {"X": dataset.X, "y": dataset.y})
    if provenance is None:
        provenance = dataset.provenance if isinstance(dataset.provenance, dict) else {}
    with open(provenance_sidecar_path(path), "w", newline="") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> SyntheticDataset:
    tensors = read_tensors(path)
    try:
        X, y = tensors["X"], tensors["y"]
    except KeyError as exc:
        raise DataError(f"{path}: missing tensor {exc}") from None
    provenance = None
    sidecar = provenance_sidecar_path(path)
    if sidecar.exists():
        with open(sidecar) as fh:
            provenance = json.load(fh)
    try:
        return SyntheticDataset(X=X, y=y, provenance=provenance)
    except ValueError as exc:
        raise DataError(f"{path}: inconsistent dataset tensors: {exc}") from None


def spec_to_json_dict(spec: CovarianceSpec) -> dict:
    """Covariance spec as JSON-serializable row-major arrays."""
    doc = {
        "variant": spec.variant,
        "tail": spec.tail,
        "R": spec.R,
        "Q": spec.Q,
        "D": spec.D,
        "J": spec.J.ravel().tolist(),
        "K_het": spec.K_het.ravel().tolist(),
        "b_het": spec.b_het.tolist(),
        "K_diag": spec.K_diag.ravel().tolist(),
        "b_diag": spec.b_diag.tolist(),
    }
    if spec.variant == HASHED_SPACE:
        doc["bucket_map"] = spec.bucket_map.tolist()
    return doc


def spec_from_json_dict(doc: dict) -> CovarianceSpec:
    try:
        variant = doc["variant"]
        tail = doc["tail"]
        R, Q, D = int(doc["R"]), int(doc["Q"]), int(doc["D"])
        spec = CovarianceSpec(
            variant=variant,
            tail=tail,
            J=np.asarray(doc["J"], dtype=np.float64).reshape(R, Q),
            K_het=np.asarray(doc["K_het"], dtype=np.float64).reshape(D, Q),
            b_het=np.asarray(doc["b_het"], dtype=np.float64),
            K_diag=np.asarray(doc["K_diag"], dtype=np.float64).reshape(D, Q),
            b_diag=np.asarray(doc["b_diag"], dtype=np.float64),
            bucket_map=np.asarray(doc["bucket_map"], dtype=np.int64)
            if variant == HASHED_SPACE
            else None,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed covariance spec document: {exc}") from None
    return spec
