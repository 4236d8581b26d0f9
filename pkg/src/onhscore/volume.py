"""Volume data model, raw+meta file I/O and B-scan resampling.

Volumes are indexed ``(b, a, d)``: B-scan, A-scan within the B-scan, depth
sample within the A-scan, with depth varying fastest in memory.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Union

import numpy as np

FORMAT_VERSION = 1
N_CLASSES = 9

# plausible acquisition ranges (mm); outside them we warn, never fail
DZ_RANGE = (0.0273, 0.246)
DX_RANGE = (0.0055, 0.0131)
DY_NOMINAL = 0.0039


class TissueClass(IntEnum):
    BACKGROUND = 0
    RNFL_PRELAMINA = 1
    GCL_IPL = 2
    OTHER_RETINA = 3
    RPE = 4
    CHOROID = 5
    SCLERA = 6
    LAMINA_CRIBROSA = 7
    ODD = 8


class VolumeFormatError(ValueError):
    """Raised for malformed, inconsistent or corrupted volume files/data."""


class SpacingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VoxelSpacing:
    """Voxel pitch in mm: between B-scans, between A-scans, between depth samples."""

    dz_mm: float
    dx_mm: float
    dy_mm: float

    def __post_init__(self):
        for name in ("dz_mm", "dx_mm", "dy_mm"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise VolumeFormatError(f"{name} must be finite and > 0, got {v!r}")
            object.__setattr__(self, name, v)
        if not (DZ_RANGE[0] <= self.dz_mm <= DZ_RANGE[1]):
            warnings.warn(f"B-scan spacing {self.dz_mm} mm outside typical {DZ_RANGE}", SpacingWarning, stacklevel=3)
        if not (DX_RANGE[0] <= self.dx_mm <= DX_RANGE[1]):
            warnings.warn(f"lateral spacing {self.dx_mm} mm outside typical {DX_RANGE}", SpacingWarning, stacklevel=3)
        if not math.isclose(self.dy_mm, DY_NOMINAL, rel_tol=1e-9):
            warnings.warn(f"axial spacing {self.dy_mm} mm differs from {DY_NOMINAL}", SpacingWarning, stacklevel=3)

    @property
    def voxel_mm3(self) -> float:
        return self.dx_mm * self.dy_mm * self.dz_mm

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dz_mm, self.dx_mm, self.dy_mm)


def _check_dims(shape):
    if len(shape) != 3:
        raise VolumeFormatError(f"volume must be 3-D (nb, na, nd), got shape {shape}")
    nb, na, nd = shape
    if nb < 1 or na < 2 or nd < 2:
        raise VolumeFormatError(f"dims must satisfy nb>=1, na>=2, nd>=2, got {shape}")


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """Non-negative reflectance samples stored as float32."""

    data: np.ndarray
    spacing: VoxelSpacing
    kind: str = field(default="intensity", init=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C")
        _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise VolumeFormatError("intensity volume contains non-finite values")
        if np.any(arr < 0):
            raise VolumeFormatError("intensity volume contains negative values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Tissue class code (0-8) per voxel, stored as uint8."""

    data: np.ndarray
    spacing: VoxelSpacing
    kind: str = field(default="label", init=False)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise VolumeFormatError("label volume must hold integer codes")
        if raw.size and (raw.min() < 0 or raw.max() >= N_CLASSES):
            raise VolumeFormatError(f"label codes must be in 0..{N_CLASSES - 1}, got max {raw.max()}")
        arr = np.array(raw, dtype=np.uint8, order="C")
        _check_dims(arr.shape)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


Volume = Union[IntensityVolume, LabelVolume]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".meta", ".raw"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".meta"), stem.with_name(stem.name + ".raw")


def save_volume(vol: Volume, path) -> None:
    """Write ``<stem>.meta`` and ``<stem>.raw``.

    Reals in the metadata are written with ``repr`` so they parse back to the
    same float bit pattern.
    """
    meta_path, raw_path = _paths(path)
    dtype = "f32" if vol.kind == "intensity" else "u8"
    payload = vol.data.astype(_DTYPES[dtype], copy=False).tobytes(order="C")
    nb, na, nd = vol.dims
    sp = vol.spacing
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"kind={vol.kind}",
        f"dims={nb},{na},{nd}",
        f"spacing_mm={sp.dz_mm!r},{sp.dx_mm!r},{sp.dy_mm!r}",
        f"dtype={dtype}",
        "byte_order=little",
        f"checksum={hashlib.sha256(payload).hexdigest()}",
    ]
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload)
    meta_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_meta(text: str, where: Path) -> dict:
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{where}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    required = ("format_version", "kind", "dims", "spacing_mm", "dtype", "byte_order", "checksum")
    missing = [k for k in required if k not in meta]
    if missing:
        raise VolumeFormatError(f"{where}: missing metadata keys {missing}")
    return meta


def load_volume(path) -> Volume:
    """Read a volume from its ``.meta``/``.raw`` pair and validate it.

    Raises:
        VolumeFormatError: on garbled metadata, length or checksum mismatch,
            out-of-range label codes or non-finite intensities.
    """
    meta_path, raw_path = _paths(path)
    if not meta_path.exists():
        raise VolumeFormatError(f"metadata file not found: {meta_path}")
    if not raw_path.exists():
        raise VolumeFormatError(f"raw data file not found: {raw_path}")
    try:
        text = meta_path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f"{meta_path}: not UTF-8 text") from exc
    meta = _parse_meta(text, meta_path)

    if meta["format_version"] != str(FORMAT_VERSION):
        raise VolumeFormatError(f"{meta_path}: unsupported format_version {meta['format_version']}")
    kind = meta["kind"]
    if kind not in ("intensity", "label"):
        raise VolumeFormatError(f"{meta_path}: unknown kind {kind!r}")
    dtype = meta["dtype"]
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{meta_path}: unknown dtype {dtype!r}")
    if (kind, dtype) not in (("intensity", "f32"), ("label", "u8")):
        raise VolumeFormatError(f"{meta_path}: dtype {dtype} not valid for kind {kind}")
    if meta["byte_order"] != "little":
        raise VolumeFormatError(f"{meta_path}: unsupported byte_order {meta['byte_order']!r}")
    try:
        dims = tuple(int(v) for v in meta["dims"].split(","))
        spacing_vals = tuple(float(v) for v in meta["spacing_mm"].split(","))
    except ValueError as exc:
        raise VolumeFormatError(f"{meta_path}: cannot parse dims/spacing: {exc}") from exc
    if len(dims) != 3 or len(spacing_vals) != 3:
        raise VolumeFormatError(f"{meta_path}: dims and spacing_mm need three values each")
    _check_dims(dims)

    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{raw_path}: expected {expected} bytes for dims {dims}, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != meta["checksum"].lower():
        raise VolumeFormatError(f"{raw_path}: checksum mismatch (data corrupted?)")

    data = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
    spacing = VoxelSpacing(*spacing_vals)
    if kind == "label":
        return LabelVolume(data, spacing)
    return IntensityVolume(data, spacing)


def normalize_intensity(vol: IntensityVolume) -> IntensityVolume:
    """Divide by the volume maximum so values land in [0, 1] with max exactly 1."""
    peak = float(vol.data.max())
    if peak <= 0:
        raise VolumeFormatError("cannot normalize an all-zero volume (no signal)")
    return IntensityVolume(vol.data.astype(np.float64) / peak, vol.spacing)


def _source_coords(n_src: int, n_dst: int) -> np.ndarray:
    # pixel-centre alignment
    return (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5


def _nearest_index(n_src, n_dst):
    idx = np.floor((np.arange(n_dst) + 0.5) * (n_src / n_dst)).astype(np.intp)
    return np.clip(idx, 0, n_src - 1)


def _lerp_axis(img: np.ndarray, n_dst: int, axis: int) -> np.ndarray:
    n_src = img.shape[axis]
    pos = np.clip(_source_coords(n_src, n_dst), 0, n_src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    w = pos - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = n_dst
    # a + w*(b - a) keeps constant regions exactly constant
    return a + w.reshape(shape) * (b - a)


def resize_bscan(image, target=(256, 256), mode: str = "bilinear") -> np.ndarray:
    """Resample a 2-D B-scan image (depth x A-scans) to ``target``.

    Axes are scaled independently. Use ``mode="nearest"`` for label images,
    which guarantees no new class codes appear.
    """
    img = np.asarray(image)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError(f"expected a 2-D image with both sides >= 2, got shape {img.shape}")
    rows, cols = int(target[0]), int(target[1])
    if mode == "nearest":
        return img[np.ix_(_nearest_index(img.shape[0], rows), _nearest_index(img.shape[1], cols))]
    if mode == "bilinear":
        out = _lerp_axis(img.astype(np.float64), rows, axis=0)
        return _lerp_axis(out, cols, axis=1)
    raise ValueError(f"unknown resize mode {mode!r}")


def resize_volume(vol: Volume, target=(256, 256)) -> Volume:
    """Resize every B-scan and rewrite the in-plane spacing accordingly."""
    nb, na, nd = vol.dims
    rows, cols = target
    mode = "nearest" if vol.kind == "label" else "bilinear"
    # B-scan image is (nd, na); stored slab is (na, nd)
    out = np.stack([resize_bscan(vol.data[b].T, target, mode).T for b in range(nb)])
    sp = vol.spacing
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SpacingWarning)
        new_sp = VoxelSpacing(sp.dz_mm, sp.dx_mm * na / cols, sp.dy_mm * nd / rows)
    return type(vol)(out, new_sp)
