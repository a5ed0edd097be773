"""Immutable 3D scalar grids and the RVOL on-disk format.

An RVOL volume is two files: ``<name>.rvol`` holding little-endian float64
samples with x varying fastest, and ``<name>.rvol.json`` holding the dims and
spacing. Arrays in memory are indexed ``[x, y, z]``.
"""
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class VolumeError(ValueError):
    pass


HU_MIN, HU_MAX = -1000.0, 600.0


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume needs 3 dims >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"spacing must be 3 positive numbers, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros(dims), spacing)

    def with_data(self, data):
        return Volume(data, self.spacing)

    def flat(self):
        """Samples in x-fastest order."""
        return self.data.ravel(order="F")

    def checksum(self):
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing})"


@dataclass(frozen=True, eq=False)
class Kernel3:
    """Constant correlation kernel; the anchor is the centre tap."""
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 3 or any(s % 2 == 0 for s in w.shape):
            raise VolumeError(f"kernel sizes must be odd, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise VolumeError("kernel weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self):
        return self.weights.shape

    @property
    def anchor(self):
        return tuple(s // 2 for s in self.weights.shape)

    @classmethod
    def delta(cls, size=3):
        w = np.zeros((size,) * 3)
        w[(size // 2,) * 3] = 1.0
        return cls(w)


def _sidecar(path):
    return Path(str(path) + ".json")


def _rvol_path(path):
    path = Path(path)
    return path if path.suffix == ".rvol" else path.with_name(path.name + ".rvol")


def export_volume(v, path):
    """Write ``v`` as ``<path>.rvol`` + sidecar; returns the data path."""
    path = _rvol_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(v.flat().astype("<f8").tobytes())
    meta = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": "f64", "order": "x-fastest"}
    _sidecar(path).write_text(json.dumps(meta, indent=1) + "\n")
    return path


def normalize_hu(values):
    """Clamp to [-1000, 600] HU and map affinely onto [0, 255]."""
    v = np.clip(values, HU_MIN, HU_MAX)
    return (v - HU_MIN) / (HU_MAX - HU_MIN) * 255.0


def import_volume(path, hu_clamp=False):
    path = _rvol_path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError as e:
        raise VolumeError(f"missing sidecar for {path}") from e
    if meta.get("dtype") != "f64":
        raise VolumeError(f"unknown dtype {meta.get('dtype')!r} in {path}")
    if meta.get("order", "x-fastest") != "x-fastest":
        raise VolumeError(f"unsupported order {meta.get('order')!r}")
    dims = tuple(int(d) for d in meta["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != int(np.prod(dims)):
        raise VolumeError(f"{path}: sidecar dims {dims} need {int(np.prod(dims))} samples, file has {raw.size}")
    data = raw.reshape(dims, order="F").astype(np.float64)
    if hu_clamp:
        data = normalize_hu(data)
    return Volume(data, tuple(meta.get("spacing", (1.0, 1.0, 1.0))))
