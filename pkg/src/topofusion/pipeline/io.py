"""Depth frame decoding and encoding.

Two formats are accepted:

* 16-bit grayscale PNG, values in millimetres, 0 = invalid.
* raw: ``b"DPTH"``, uint32 width, uint32 height (little-endian), then
  ``width * height`` little-endian float32 depths in metres, row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..tsdf_volume import DepthFrame
from .config import Intrinsics

RAW_MAGIC = b"DPTH"
RAW_HEADER = struct.Struct("<4sII")
FRAME_SUFFIXES = (".png", ".raw")


class FrameFormatError(ValueError):
    pass


def decode_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except OSError as exc:
        raise FrameFormatError(f"{path}: {exc}") from exc
    if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise FrameFormatError(f"{path}: expected a single-channel 16-bit depth PNG")
    return arr.astype(np.float64) / 1000.0


def decode_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < RAW_HEADER.size:
        raise FrameFormatError(f"{path}: truncated header")
    magic, w, h = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FrameFormatError(f"{path}: bad magic {magic!r}")
    if len(data) != RAW_HEADER.size + 4 * w * h:
        raise FrameFormatError(f"{path}: payload size does not match {w}x{h}")
    depth = np.frombuffer(data, dtype="<f4", offset=RAW_HEADER.size).reshape(h, w).astype(np.float64)
    if not np.all(np.isfinite(depth)):
        raise FrameFormatError(f"{path}: non-finite depth values")
    return np.maximum(depth, 0.0)


def load_frame(path, intrinsics: Intrinsics, fmt: str | None = None) -> DepthFrame:
    path = Path(path)
    fmt = fmt or path.suffix.lower().lstrip(".")
    if fmt == "png":
        depth = decode_png(path)
    elif fmt == "raw":
        depth = decode_raw(path)
    else:
        raise FrameFormatError(f"{path}: unsupported depth format {fmt!r}")
    return DepthFrame(depth, intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)


def write_png(path, depth_m: np.ndarray) -> None:
    mm = np.round(np.asarray(depth_m) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise FrameFormatError("depth exceeds the 16-bit millimetre range")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def write_raw(path, depth_m: np.ndarray) -> None:
    depth = np.asarray(depth_m, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(RAW_HEADER.pack(RAW_MAGIC, w, h) + depth.tobytes())


def list_frames(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not files:
        raise FrameFormatError(f"no depth frames in {directory}")
    return files
