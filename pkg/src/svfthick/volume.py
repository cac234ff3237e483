"""Grid containers, point sampling, gradients and on-disk formats.

Arrays are indexed ``[x, y, z]`` (vector fields ``[x, y, z, c]``). Files are
written x-fastest, which is Fortran order for that indexing.

Two formats are understood:

* MVOL -- an 8-byte magic ``b"MVOL\\0\\0\\0\\1"``, a little-endian ``uint32``
  header length, a UTF-8 JSON header and a little-endian payload.
* NIfTI-1 single file (``.nii``), read only, float32/uint8/int16.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MVOL_MAGIC = b"MVOL\x00\x00\x00\x01"
PV_TOLERANCE = 1e-4

_MVOL_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4"}
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}

KINDS = ("scalar", "pv", "label", "vector")


class VolumeFormatError(ValueError):
    """Raised when a volume file or container is malformed."""


@dataclass(frozen=True)
class GridMeta:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise VolumeFormatError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise VolumeFormatError(f"spacing_mm must be three positive finite values, got {self.spacing_mm}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


def _frozen(data: np.ndarray) -> np.ndarray:
    data = np.array(data, copy=True)
    data.flags.writeable = False
    return data


def _float_array(data) -> np.ndarray:
    data = np.asarray(data)
    if data.dtype != np.float32:
        data = data.astype(np.float64)
    return data


@dataclass(frozen=True)
class ScalarVolume:
    """A 3D scalar grid. float32 payloads are kept as float32, anything else becomes float64."""

    data: np.ndarray
    meta: GridMeta

    def __post_init__(self):
        data = _float_array(self.data)
        if data.shape != self.meta.dims:
            raise VolumeFormatError(f"data shape {data.shape} does not match dims {self.meta.dims}")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("data contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, data, spacing_mm=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        data = np.asarray(data)
        return cls(data, GridMeta(data.shape, spacing_mm))


@dataclass(frozen=True)
class VectorField:
    """A 3D grid of 3-vectors in voxel units, shape ``(nx, ny, nz, 3)``."""

    data: np.ndarray
    meta: GridMeta

    def __post_init__(self):
        data = _float_array(self.data)
        if data.shape != self.meta.dims + (3,):
            raise VolumeFormatError(f"data shape {data.shape} does not match dims {self.meta.dims} + (3,)")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("data contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, data, spacing_mm=(1.0, 1.0, 1.0)) -> "VectorField":
        data = np.asarray(data)
        return cls(data, GridMeta(data.shape[:3], spacing_mm))


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    meta: GridMeta

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.meta.dims:
            raise VolumeFormatError(f"labels shape {labels.shape} does not match dims {self.meta.dims}")
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise VolumeFormatError("labels must be integers")
        if np.any(labels < 0):
            raise VolumeFormatError("labels must be non-negative")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int32)))

    @classmethod
    def from_array(cls, labels, spacing_mm=(1.0, 1.0, 1.0)) -> "LabelVolume":
        labels = np.asarray(labels)
        return cls(labels, GridMeta(labels.shape, spacing_mm))


def as_array(v) -> np.ndarray:
    """Return the raw array behind a container, or ``v`` itself as an array."""
    if isinstance(v, LabelVolume):
        return v.labels
    return np.asarray(getattr(v, "data", v))


def trilinear_sample(v, p) -> float:
    """Trilinearly interpolate ``v`` at the continuous voxel coordinate ``p``.

    Coordinates outside the grid are clamped to it (replicated edge).
    """
    data = as_array(v)
    p = tuple(float(c) for c in p)
    if len(p) != 3 or not all(math.isfinite(c) for c in p):
        raise ValueError(f"sample point must be three finite coordinates, got {p}")
    lo, frac = [], []
    for c, n in zip(p, data.shape):
        c = min(max(c, 0.0), n - 1.0)
        i0 = min(int(math.floor(c)), max(n - 2, 0))
        lo.append(i0)
        frac.append(c - i0)
    value = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((frac[0] if dx else 1 - frac[0])
                     * (frac[1] if dy else 1 - frac[1])
                     * (frac[2] if dz else 1 - frac[2]))
                if w == 0.0:
                    continue
                value += w * float(data[lo[0] + dx, lo[1] + dy, lo[2] + dz])
    return value


def spatial_gradient(v) -> np.ndarray:
    """Per-voxel gradient, value per voxel, shape ``(nx, ny, nz, 3)``.

    Central differences inside, first-order one-sided differences on faces.
    """
    data = np.asarray(as_array(v), dtype=np.float64)
    if data.ndim != 3 or min(data.shape) < 2:
        raise ValueError(f"spatial_gradient needs at least 2 voxels per axis, got {data.shape}")
    return np.stack(np.gradient(data), axis=-1)


# --------------------------------------------------------------------------- IO


def _payload_order(data: np.ndarray) -> np.ndarray:
    if data.ndim == 4:
        # channel-interleaved, x fastest after the channel
        return np.moveaxis(data, 3, 0).ravel(order="F")
    return data.ravel(order="F")


def store_volume(v, path) -> None:
    """Write ``v`` as MVOL. The payload dtype follows the container's dtype."""
    if isinstance(v, LabelVolume):
        data, dtype, channels = v.labels, "i32", 1
    elif isinstance(v, (ScalarVolume, VectorField)):
        data = v.data
        dtype = "f32" if data.dtype == np.float32 else "f64"
        channels = 3 if isinstance(v, VectorField) else 1
    else:
        raise TypeError(f"cannot store {type(v).__name__}")
    header = json.dumps({
        "dims": list(v.meta.dims),
        "spacing_mm": list(v.meta.spacing_mm),
        "dtype": dtype,
        "channels": channels,
    }).encode("utf-8")
    payload = _payload_order(data).astype(_MVOL_DTYPES[dtype], copy=False).tobytes()
    Path(path).write_bytes(MVOL_MAGIC + struct.pack("<I", len(header)) + header + payload)


def _read_mvol(raw: bytes):
    if len(raw) < 12:
        raise VolumeFormatError("magic: file too short for an MVOL header")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"header: not valid JSON ({exc})") from exc
    for key in ("dims", "spacing_mm", "dtype", "channels"):
        if key not in header:
            raise VolumeFormatError(f"header: missing field {key!r}")
    if header["dtype"] not in _MVOL_DTYPES:
        raise VolumeFormatError(f"dtype: unsupported {header['dtype']!r}")
    if header["channels"] not in (1, 3):
        raise VolumeFormatError(f"channels: must be 1 or 3, got {header['channels']!r}")
    meta = GridMeta(tuple(header["dims"]), tuple(header["spacing_mm"]))
    dtype = np.dtype(_MVOL_DTYPES[header["dtype"]])
    channels = header["channels"]
    payload = raw[12 + hlen:]
    expected = meta.n_voxels * channels * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"dims: payload has {len(payload)} bytes, dims imply {expected}")
    flat = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    if channels == 3:
        data = np.moveaxis(flat.reshape((3,) + meta.dims, order="F"), 0, 3)
    else:
        data = flat.reshape(meta.dims, order="F")
    return data, meta, header["dtype"]


def _read_nifti(raw: bytes):
    if len(raw) < 348:
        raise VolumeFormatError("sizeof_hdr: file shorter than a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", raw, 0)[0] == 348:
            break
    else:
        raise VolumeFormatError("sizeof_hdr: not 348 in either byte order")
    if raw[344:347] != b"n+1":
        raise VolumeFormatError(f"magic: expected 'n+1', got {raw[344:348]!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"dim: invalid dim[0]={ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4:ndim + 1]):
        raise VolumeFormatError("dim: 4D and higher volumes are not supported")
    dims = tuple(dim[i] if i <= ndim else 1 for i in (1, 2, 3))
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"datatype: unsupported code {datatype}")
    spacing = tuple(abs(pixdim[i]) if i <= ndim and pixdim[i] != 0 else 1.0 for i in (1, 2, 3))
    meta = GridMeta(dims, spacing)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    offset = int(vox_offset)
    nbytes = meta.n_voxels * dtype.itemsize
    if offset < 348 or len(raw) < offset + nbytes:
        raise VolumeFormatError(f"vox_offset: {offset} with {nbytes} data bytes exceeds file size {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=meta.n_voxels, offset=offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data.astype(np.float64) * (scl_slope or 1.0) + scl_inter
    return data, meta, "nifti"


def load_volume(path, kind: str = "scalar"):
    """Load an MVOL or NIfTI-1 file.

    ``kind`` is one of ``scalar``, ``pv`` (values validated to [0, 1] within
    ``PV_TOLERANCE`` and then clamped), ``label`` or ``vector``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown volume kind {kind!r}")
    raw = Path(path).read_bytes()
    if raw[:8] == MVOL_MAGIC:
        data, meta, _ = _read_mvol(raw)
    elif raw[:4] == MVOL_MAGIC[:4]:
        raise VolumeFormatError(f"magic: unsupported MVOL version {raw[4:8]!r}")
    else:
        data, meta, _ = _read_nifti(raw)

    if kind == "vector":
        if data.ndim != 4:
            raise VolumeFormatError("channels: vector field needs 3 channels")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("data: non-finite values")
        return VectorField(data, meta)
    if data.ndim != 3:
        raise VolumeFormatError(f"channels: {kind} volume needs 1 channel")
    if kind == "label":
        return LabelVolume(data, meta)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError("data: non-finite values")
    if kind == "pv":
        if data.min() < -PV_TOLERANCE or data.max() > 1 + PV_TOLERANCE:
            raise VolumeFormatError(
                f"data: partial-volume values outside [0, 1] (min {data.min()}, max {data.max()})")
        data = np.clip(data, 0, 1).astype(data.dtype if data.dtype.kind == "f" else np.float64)
    return ScalarVolume(data, meta)
