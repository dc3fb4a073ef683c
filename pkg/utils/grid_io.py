"""File formats for grids and images.

TOLOGRID v1 is the lossless store for 32-bit maps: the magic ``TOLG``, three
little-endian u32 (version, height, width), then height*width little-endian
float32 values in row-major order.
"""
import hashlib
import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import cv2
import numpy as np

from .errors import GridFormatError
from .grid import Grid2D

logger = logging.getLogger(__name__)

MAGIC = b"TOLG"
VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("height", "<u4"), ("width", "<u4")])
_CONCEPT_FILE = re.compile(r"^concept_(\d+)\.tolog$")

PathLike = Union[str, Path]


def atomic_write(path: PathLike, payload: Union[bytes, str]) -> Path:
    """Write to a temporary sibling, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("wrote %s (%d bytes)", path, len(data))
    return path


def write_json(path: PathLike, document: Any) -> Path:
    return atomic_write(path, json.dumps(document, indent=2, sort_keys=True) + "\n")


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> Path:
    return atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def encode_grid(grid: Grid2D) -> bytes:
    header = np.array([(MAGIC, VERSION, grid.height, grid.width)], dtype=_HEADER)
    return header.tobytes() + grid.data.astype("<f4").tobytes(order="C")


def decode_grid(payload: bytes, source: str = "<bytes>") -> Grid2D:
    if len(payload) < _HEADER.itemsize:
        raise GridFormatError(f"{source}: truncated TOLOGRID header")
    header = np.frombuffer(payload[:_HEADER.itemsize], dtype=_HEADER)[0]
    if header["magic"] != MAGIC:
        raise GridFormatError(f"{source}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != VERSION:
        raise GridFormatError(f"{source}: unsupported TOLOGRID version {int(header['version'])}")
    height, width = int(header["height"]), int(header["width"])
    if height < 1 or width < 1:
        raise GridFormatError(f"{source}: empty grid {height}x{width}")
    body = payload[_HEADER.itemsize:]
    if len(body) != 4 * height * width:
        raise GridFormatError(f"{source}: expected {4 * height * width} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float64)
    if not np.isfinite(values).all():
        raise GridFormatError(f"{source}: grid holds non-finite values")
    return Grid2D(values)


def write_grid(path: PathLike, grid: Grid2D) -> Path:
    return atomic_write(path, encode_grid(grid))


def read_grid(path: PathLike) -> Grid2D:
    with open(path, "rb") as handle:
        payload = handle.read()
    logger.debug("read grid %s", path)
    return decode_grid(payload, str(path))


def read_concept_maps(directory: PathLike) -> List[Grid2D]:
    """Load ``concept_{i}.tolog`` files; indices must run 0..k-1 without gaps"""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"map directory not found: {directory}")
    found = {}
    for entry in directory.iterdir():
        match = _CONCEPT_FILE.match(entry.name)
        if match:
            found[int(match.group(1))] = entry
    if not found:
        raise GridFormatError(f"{directory}: no concept_<i>.tolog files")
    if sorted(found) != list(range(len(found))):
        raise GridFormatError(f"{directory}: concept indices {sorted(found)} are not contiguous from 0")
    return [read_grid(found[i]) for i in range(len(found))]


def to_pgm(grid: Grid2D) -> str:
    """Plain PGM (P2) with values rescaled linearly onto 0..255; a flat grid renders black"""
    values = grid.data
    low, high = values.min(), values.max()
    if high > low:
        levels = np.rint((values - low) / (high - low) * 255.0).astype(int)
    else:
        levels = np.zeros(values.shape, dtype=int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    return f"P2\n{grid.width} {grid.height}\n255\n{rows}\n"


def write_pgm(path: PathLike, grid: Grid2D) -> Path:
    return atomic_write(path, to_pgm(grid))


def read_ppm(path: PathLike) -> np.ndarray:
    """RGB uint8 array of a PPM image"""
    if not Path(path).is_file():
        raise FileNotFoundError(f"image not found: {path}")
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise GridFormatError(f"{path}: not a readable PPM image")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def write_ppm(path: PathLike, rgb: np.ndarray) -> Path:
    ok, encoded = cv2.imencode(".ppm", cv2.cvtColor(np.ascontiguousarray(rgb, dtype=np.uint8), cv2.COLOR_RGB2BGR))
    if not ok:
        raise GridFormatError(f"could not encode {path} as PPM")
    return atomic_write(path, encoded.tobytes())


def file_checksum(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
