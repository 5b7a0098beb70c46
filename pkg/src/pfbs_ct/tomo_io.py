"""TOMO1 binary container.

Layout (all text UTF-8)::

    TOMO1\\n
    kind=<image|sinogram|tensor> dims=<d0>x<d1>[x...] dtype=<f32|f64> meta=<k:v,k:v,...>\\n
    <payload: little-endian, row-major (C order), prod(dims) values>

``dims`` lists the array shape outermost first: ``height x width`` for an
image, ``n_views x n_bins`` for a sinogram. Meta keys and values may not
contain ``,``, ``:``, ``=`` or whitespace; an empty meta section is written as
``meta=``. Floats in meta are written with ``repr`` so they round-trip
exactly.

Image meta always carries ``pixel_size``; sinogram meta always carries
``domain`` (``post_log`` or ``pre_log_counts``).
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .geometry import Image, Sinogram

MAGIC = b"TOMO1\n"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TOKEN = re.compile(r"^[^\s,:=]+$")


class TomoFormatError(ValueError):
    pass


def _encode_meta(meta: dict) -> str:
    parts = []
    for k, v in meta.items():
        v = repr(v) if isinstance(v, float) else str(v)
        if not (_TOKEN.match(k) and _TOKEN.match(v)):
            raise TomoFormatError(f"meta entry {k!r}:{v!r} contains reserved characters")
        parts.append(f"{k}:{v}")
    return ",".join(parts)


def _decode_meta(text: str) -> dict:
    if not text:
        return {}
    meta = {}
    for part in text.split(","):
        k, sep, v = part.partition(":")
        if not sep:
            raise TomoFormatError(f"malformed meta entry {part!r}")
        meta[k] = v
    return meta


def encode(kind: str, array: np.ndarray, meta: dict | None = None, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise TomoFormatError(f"dtype must be one of {sorted(_DTYPES)}")
    arr = np.asarray(array)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    dims = "x".join(str(d) for d in arr.shape)
    header = f"kind={kind} dims={dims} dtype={dtype} meta={_encode_meta(meta or {})}\n"
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    return MAGIC + header.encode("utf-8") + payload


def decode(blob: bytes) -> tuple[str, np.ndarray, dict]:
    if not blob.startswith(MAGIC):
        raise TomoFormatError("missing TOMO1 magic")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise TomoFormatError("truncated header")
    header = blob[len(MAGIC):end].decode("utf-8")
    fields = {}
    for tok in header.split(" "):
        k, sep, v = tok.partition("=")
        if not sep:
            raise TomoFormatError(f"malformed header token {tok!r}")
        fields[k] = v
    try:
        kind, dims, dtype = fields["kind"], fields["dims"], fields["dtype"]
        meta = _decode_meta(fields.get("meta", ""))
        shape = tuple(int(d) for d in dims.split("x"))
        dt = _DTYPES[dtype]
    except (KeyError, ValueError) as exc:
        raise TomoFormatError(f"bad header {header!r}") from exc
    payload = blob[end + 1:]
    count = int(np.prod(shape))
    if len(payload) != count * dt.itemsize:
        raise TomoFormatError(
            f"payload has {len(payload)} bytes, expected {count * dt.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(np.float64)
    return kind, arr, meta


def _write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_image(path, image: Image, dtype: str = "f64", **meta) -> None:
    _write(path, encode("image", image.values, {"pixel_size": image.pixel_size, **meta}, dtype))


def load_image(path) -> Image:
    kind, arr, meta = decode(Path(path).read_bytes())
    if kind != "image" or arr.ndim != 2:
        raise TomoFormatError(f"{path}: expected a 2-D image, got kind={kind} dims={arr.shape}")
    return Image(arr, float(meta["pixel_size"]))


def save_sinogram(path, sino: Sinogram, dtype: str = "f64", **meta) -> None:
    _write(path, encode("sinogram", sino.values, {"domain": sino.domain, **meta}, dtype))


def load_sinogram(path) -> Sinogram:
    kind, arr, meta = decode(Path(path).read_bytes())
    if kind != "sinogram" or arr.ndim != 2:
        raise TomoFormatError(f"{path}: expected a sinogram, got kind={kind} dims={arr.shape}")
    return Sinogram(arr, meta.get("domain", "post_log"))


def save_tensor(path, array: np.ndarray, dtype: str = "f64", **meta) -> None:
    _write(path, encode("tensor", array, meta, dtype))


def load_tensor(path) -> np.ndarray:
    kind, arr, _ = decode(Path(path).read_bytes())
    if kind != "tensor":
        raise TomoFormatError(f"{path}: expected a tensor, got kind={kind}")
    return arr
