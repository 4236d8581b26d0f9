"""Adaptive compensation of depth-dependent light attenuation.

Each A-scan is raised to the contrast exponent and divided by twice its
remaining (tail) energy, so a uniform attenuation factor applied to
everything below some depth cancels out. A denominator floor of
``10**-threshold_exp`` keeps noise at depth from being blown up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from onhscore.volume import IntensityVolume


@dataclass(frozen=True)
class CompensationParams:
    contrast_exp: float = 2.0
    threshold_exp: float = 12.0
    rescale_per_bscan: bool = True

    def __post_init__(self):
        if not self.contrast_exp > 0:
            raise ValueError(f"contrast_exp must be > 0, got {self.contrast_exp}")
        if not self.threshold_exp > 0:
            raise ValueError(f"threshold_exp must be > 0, got {self.threshold_exp}")

    @property
    def energy_floor(self) -> float:
        return 10.0 ** (-self.threshold_exp)


def tail_energy(s: np.ndarray) -> np.ndarray:
    """Sum of ``s`` from each depth to the bottom, along the last axis."""
    return np.flip(np.cumsum(np.flip(s, axis=-1), axis=-1), axis=-1)


def _compensate(data: np.ndarray, params: CompensationParams) -> np.ndarray:
    s = np.power(data, params.contrast_exp)
    energy = tail_energy(s)
    return s / (2.0 * np.maximum(energy, params.energy_floor))


def compensate_ascan(ascan, params: CompensationParams = CompensationParams()) -> np.ndarray:
    """Compensate a single normalized A-scan (values in [0, 1]).

    Returns a float64 array of the same length. Wherever the tail energy is
    above the floor the output lies in [0, 0.5].
    """
    arr = np.asarray(ascan, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("A-scan must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("A-scan contains non-finite samples")
    return _compensate(arr, params)


def compensate_volume(vol: IntensityVolume, params: CompensationParams = CompensationParams()) -> IntensityVolume:
    """Apply :func:`compensate_ascan` to every (b, a) column of a normalized volume.

    With ``params.rescale_per_bscan`` each B-scan is then divided by its own
    maximum (all-zero B-scans are left at zero).
    """
    out = _compensate(vol.data.astype(np.float64), params)
    if params.rescale_per_bscan:
        peaks = out.max(axis=(1, 2), keepdims=True)
        out = np.divide(out, peaks, out=np.zeros_like(out), where=peaks > 0)
    return IntensityVolume(out, vol.spacing)
