"""Raw volume container and its on-disk format.

A volume lives in two files: ``<path>`` holds the payload (row-major
little-endian float32, depth-major ``DHW`` order) and ``<path>.json`` is the
sidecar header::

    {"dims": [D, H, W], "voxel_size_mm": [dz, dy, dx],
     "dtype": "f32le", "axis_order": "DHW", "value_range": [0.0, 255.0]}

Values are nominally in [0, 255].  Depth (axis 0) is the axial direction:
``vol[:, y, x]`` is one A-line, index 0 shallowest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ShapeError, VolumeIOError

__all__ = ["Volume", "read_volume", "write_volume", "sha256_of"]

_DTYPE_TAG = "f32le"
_AXIS_ORDER = "DHW"
_VALUE_RANGE = (0.0, 255.0)


@dataclass
class Volume:
    """A ``(D, H, W)`` float32 array with physical voxel size in mm."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (0.012, 0.012, 0.012)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3-D, got shape {self.data.shape}")
        if isinstance(self.voxel_size_mm, (int, float)):
            s = float(self.voxel_size_mm)
            self.voxel_size_mm = (s, s, s)
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or any(v <= 0 for v in self.voxel_size_mm):
            raise ShapeError(f"voxel_size_mm must be 3 positive floats, "
                             f"got {self.voxel_size_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        dz, dy, dx = self.voxel_size_mm
        return dz * dy * dx


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_volume(path, vol: Volume, value_range: tuple[float, float] = _VALUE_RANGE) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(vol.dims),
        "voxel_size_mm": list(vol.voxel_size_mm),
        "dtype": _DTYPE_TAG,
        "axis_order": _AXIS_ORDER,
        "value_range": [float(value_range[0]), float(value_range[1])],
    }
    payload = np.ascontiguousarray(vol.data, dtype="<f4")
    path.write_bytes(payload.tobytes())
    _sidecar(path).write_text(json.dumps(header, sort_keys=True) + "\n")


def read_volume(path) -> Volume:
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise VolumeIOError(f"missing volume payload: {path}")
    if not side.exists():
        raise VolumeIOError(f"missing volume sidecar: {side}")
    try:
        header = json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise VolumeIOError(f"malformed sidecar {side}: {e}") from e

    for key in ("dims", "dtype", "axis_order"):
        if key not in header:
            raise VolumeIOError(f"sidecar {side} missing field {key!r}")
    if header["dtype"] != _DTYPE_TAG:
        raise VolumeIOError(f"unsupported dtype {header['dtype']!r} (want {_DTYPE_TAG})")
    if header["axis_order"] != _AXIS_ORDER:
        raise VolumeIOError(f"unsupported axis order {header['axis_order']!r}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or any(not isinstance(d, int) or d <= 0 for d in dims)):
        raise VolumeIOError(f"bad dims {dims!r} in {side}")

    raw = path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise VolumeIOError(f"payload length {len(raw)} does not match dims {dims} "
                            f"({expected} bytes expected)")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    voxel = header.get("voxel_size_mm", 0.012)
    if isinstance(voxel, (int, float)):
        voxel = (voxel, voxel, voxel)
    return Volume(data, tuple(voxel))


def sha256_of(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
