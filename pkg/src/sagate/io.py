"""File formats: STNS binary tensors, checkpoints, binary PGM/PPM.

STNS layout (all little-endian)::

    b"STNS" | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 dims | raw scalars

A checkpoint is a directory holding ``manifest.json`` (ordered list of
parameter names and their files) plus one STNS file per tensor.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

STNS_MAGIC = b"STNS"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_stns(array) -> bytes:
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"STNS stores f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    code = _DTYPE_CODES[arr.dtype]
    header = STNS_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode_stns(buf: bytes) -> np.ndarray:
    if buf[:4] != STNS_MAGIC:
        raise FormatError("bad STNS magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown STNS dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    offset = 6 + 4 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"STNS payload is {len(buf)} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=offset, count=count).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_stns(path, array) -> None:
    Path(path).write_bytes(encode_stns(array))


def load_stns(path) -> np.ndarray:
    return decode_stns(Path(path).read_bytes())


def save_checkpoint(path, params: Mapping[str, Tensor], extra: dict | None = None) -> None:
    """Write ``params`` (in insertion order) as a checkpoint directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, value) in enumerate(params.items()):
        fname = f"{i:04d}.stns"
        save_stns(root / fname, value)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(value.data if isinstance(value, Tensor) else value))})
    manifest = {"format": "stns-checkpoint", "version": 1, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    params = {}
    for entry in manifest["tensors"]:
        params[entry["name"]] = Tensor(load_stns(root / entry["file"]))
    return params, manifest.get("extra", {})


# -- Netpbm ---------------------------------------------------------------


def _write_netpbm(path, magic: bytes, arr: np.ndarray) -> None:
    if arr.dtype == np.uint8:
        maxval = 255
        payload = arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval = 65535
        payload = arr.astype(">u2").tobytes()
    else:
        raise FormatError(f"Netpbm images must be uint8 or uint16, got {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(payload)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) grayscale; 16-bit samples are stored big-endian."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM needs an H x W array, got {image.shape}")
    _write_netpbm(path, b"P5", image)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary (P6) colour image from an H x W x 3 uint8 array."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an H x W x 3 array, got {image.shape}")
    _write_netpbm(path, b"P6", image)


def _read_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return [int(t) for t in tokens], pos + 1


def read_netpbm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM")
    (w, h, maxval), pos = _read_tokens(buf, 3)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = w * h * channels
    arr = np.frombuffer(buf, dtype=dtype, offset=pos, count=count)
    arr = arr.astype(np.uint8 if maxval < 256 else np.uint16)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


read_pgm = read_netpbm
read_ppm = read_netpbm


def to_uint8(image01: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to bytes with round-half-up."""
    return np.floor(np.clip(image01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
