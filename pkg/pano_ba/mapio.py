"""
Panorama file formats:

- raw: 16-byte header (W, H as little-endian uint64) + float32 LE row-major
- 16-bit binary PGM (written with OpenCV) after an affine min->0 / max->65535
  tonemap; the tonemap goes to a `<name>.tonemap.txt` sidecar
- mask: 8-bit PGM with values {0, 255}
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Tuple

import cv2
import numpy as np

from .errors import MapFormatError, log_and_reraise
from .utils import atomic_write, read_kv

log = logging.getLogger(__name__)

RAW_HEADER = np.dtype([("width", "<u8"), ("height", "<u8")])
LOG_EPS = 1e-2  # offset before log() when importing 8/16-bit intensity images
FULL_SCALE = {np.dtype(np.uint8): 255, np.dtype(np.uint16): 65535}


def tonemap_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".tonemap.txt")


@log_and_reraise(MapFormatError)
def save_map_raw(values: np.ndarray, path: str | Path) -> Path:
    values = np.asarray(values)
    H, W = values.shape
    header = np.array([(W, H)], dtype=RAW_HEADER)
    with atomic_write(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return Path(path)


@log_and_reraise(MapFormatError)
def load_map_raw(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < RAW_HEADER.itemsize:
        raise MapFormatError(f"{path}: truncated header")
    header = np.frombuffer(blob[:RAW_HEADER.itemsize], dtype=RAW_HEADER)[0]
    W, H = int(header["width"]), int(header["height"])
    body = blob[RAW_HEADER.itemsize:]
    if len(body) != 4 * W * H:
        raise MapFormatError(f"{path}: expected {4 * W * H} bytes of float32 data for {W}x{H}, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float64)


def _encode_pgm(pixels: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".pgm", pixels, [cv2.IMWRITE_PXM_BINARY, 1])
    if not ok:
        raise MapFormatError(f"OpenCV could not encode a {pixels.dtype} {pixels.shape} PGM")
    return buf.tobytes()


def _read_gray(path: str | Path) -> Tuple[np.ndarray, int]:
    """8- or 16-bit single-channel pixels and their full-scale value; colour images are converted to gray."""
    if not Path(path).is_file():
        raise MapFormatError(f"{path}: no such image")
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise MapFormatError(f"{path}: OpenCV cannot decode this image")
    if pixels.ndim == 3:
        code = cv2.COLOR_BGRA2GRAY if pixels.shape[2] == 4 else cv2.COLOR_BGR2GRAY
        pixels = cv2.cvtColor(pixels, code)
    if pixels.dtype not in FULL_SCALE:
        raise MapFormatError(f"{path}: unsupported sample type {pixels.dtype}, expected 8- or 16-bit")
    return pixels, FULL_SCALE[pixels.dtype]


@log_and_reraise(MapFormatError)
def save_map_pgm16(values: np.ndarray, path: str | Path, mask: Optional[np.ndarray] = None) -> Path:
    """Tonemap over the masked pixels (all pixels when mask is None); others map to 0."""
    values = np.asarray(values, dtype=float)
    sel = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lo = float(values[sel].min()) if sel.any() else 0.0
    hi = float(values[sel].max()) if sel.any() else 0.0
    span = hi - lo
    scaled = (values - lo) / span * 65535.0 if span > 0 else np.zeros_like(values)
    pixels = np.where(sel, np.clip(np.rint(scaled), 0, 65535), 0).astype(np.uint16)
    with atomic_write(path, "wb") as f:
        f.write(_encode_pgm(pixels))
    with atomic_write(tonemap_sidecar(path)) as f:
        f.write(f"min = {lo!r}\nmax = {hi!r}\n")
    return Path(path)


@log_and_reraise(MapFormatError)
def load_map_pgm16(path: str | Path) -> np.ndarray:
    pixels, maxval = _read_gray(path)
    side = tonemap_sidecar(path)
    if side.exists():
        kv = read_kv(side)
        lo, hi = float(kv["min"]), float(kv["max"])
    else:
        log.warning("%s: no tonemap sidecar, returning normalized [0, 1] values", path)
        lo, hi = 0.0, 1.0
    return lo + pixels.astype(float) / maxval * (hi - lo)


@log_and_reraise(MapFormatError)
def save_mask_pgm(mask: np.ndarray, path: str | Path) -> Path:
    pixels = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    with atomic_write(path, "wb") as f:
        f.write(_encode_pgm(pixels))
    return Path(path)


@log_and_reraise(MapFormatError)
def load_mask_pgm(path: str | Path) -> np.ndarray:
    pixels, _ = _read_gray(path)
    return pixels > 0


@log_and_reraise(MapFormatError)
def load_log_intensity_image(path: str | Path, eps: float = LOG_EPS) -> np.ndarray:
    """Any 8- or 16-bit image OpenCV reads (PGM, PNG, ...) -> log(I / maxval + eps)."""
    pixels, maxval = _read_gray(path)
    return np.log(pixels.astype(float) / maxval + eps)
