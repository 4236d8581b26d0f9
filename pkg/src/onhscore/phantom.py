"""Parametric synthetic ONH phantoms with closed-form tissue volumes.

Geometry (all lengths in mm, depth ``y`` increasing downward):

* flat retinal stack below ``surface_depth_mm``: classes 1..6 in order,
* a vertical cylinder of radius ``bmo_radius_mm`` (the BMO opening) in which
  the stack is replaced by prelamina (class 1) down to the bottom of the RPE
  and a lamina cribrosa slab (class 7) beneath it,
* an optional spherical-cap dome of prelamina above the surface inside the
  opening (disc swelling),
* axis-aligned ellipsoidal drusen (class 8) inside the opening.

Voxel ``(b, a, d)`` has its centre at ``((b+.5)dz, (a+.5)dx, (d+.5)dy)``;
a voxel takes the class of the highest-precedence shape containing its centre
(drusen > dome > stack).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from onhscore.rng import derive_rng
from onhscore.volume import N_CLASSES, IntensityVolume, LabelVolume, SpacingWarning, TissueClass, VoxelSpacing


class PhantomGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple  # (z, x, y)
    semi_axes_mm: tuple  # (along z, along x, along y)

    @property
    def volume(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * math.pi * a * b * c


@dataclass(frozen=True)
class Vessel:
    """Blood vessel running along the B-scan axis; an optical feature only."""

    x_mm: float
    y_mm: float
    radius_mm: float
    reflectivity: float = 0.6
    attenuation_per_mm: float = 15.0


# per class 0..8
DEFAULT_REFLECTIVITY = (0.0, 0.6, 0.5, 0.3, 1.0, 0.4, 0.5, 0.45, 0.2)
DEFAULT_ATTENUATION = (0.0, 2.0, 2.0, 1.5, 8.0, 6.0, 4.0, 4.0, 3.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    spacing: tuple  # (dz, dx, dy) mm
    surface_depth_mm: float
    layer_thickness_mm: tuple  # classes 1..6
    lc_thickness_mm: float = 0.0
    bmo_radius_mm: float = 0.0
    bmo_center_mm: Optional[tuple] = None  # (z, x); default: centre of the en-face plane
    swelling_height_mm: float = 0.0
    drusen: tuple = ()
    vessels: tuple = ()
    reflectivity: tuple = DEFAULT_REFLECTIVITY
    attenuation_per_mm: tuple = DEFAULT_ATTENUATION
    speckle_sigma: float = 0.0

    @property
    def voxel_spacing(self) -> VoxelSpacing:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SpacingWarning)
            return VoxelSpacing(*self.spacing)

    @property
    def extent_mm(self) -> tuple:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    @property
    def center(self) -> tuple:
        if self.bmo_center_mm is not None:
            return tuple(self.bmo_center_mm)
        Z, X, _ = self.extent_mm
        return (Z / 2.0, X / 2.0)

    @property
    def bmo_depth_mm(self) -> float:
        """Depth of the bottom of the RPE, i.e. the plane of the opening."""
        return self.surface_depth_mm + sum(self.layer_thickness_mm[:4])

    @property
    def dome_sphere_radius(self) -> float:
        h, rho = self.swelling_height_mm, self.bmo_radius_mm
        return (rho * rho + h * h) / (2.0 * h)

    def validate(self) -> None:
        nb, na, nd = self.dims
        if nb < 1 or na < 2 or nd < 2:
            raise PhantomGeometryError(f"bad dims {self.dims}")
        if len(self.layer_thickness_mm) != 6 or any(t < 0 for t in self.layer_thickness_mm):
            raise PhantomGeometryError("layer_thickness_mm needs six non-negative values")
        if len(self.reflectivity) != N_CLASSES or len(self.attenuation_per_mm) != N_CLASSES:
            raise PhantomGeometryError(f"optics need {N_CLASSES} per-class values")
        if any(v < 0 for v in self.reflectivity + self.attenuation_per_mm) or self.speckle_sigma < 0:
            raise PhantomGeometryError("optical parameters must be non-negative")
        Z, X, Y = self.extent_mm
        rho, h = self.bmo_radius_mm, self.swelling_height_mm
        if self.lc_thickness_mm < 0 or rho < 0 or h < 0:
            raise PhantomGeometryError("negative lc thickness, BMO radius or swelling height")
        if self.surface_depth_mm < 0:
            raise PhantomGeometryError("surface depth must be >= 0")
        if self.surface_depth_mm + sum(self.layer_thickness_mm) > Y:
            raise PhantomGeometryError("layer stack extends below the volume")
        if rho > 0:
            cz, cx = self.center
            if cz - rho < 0 or cz + rho > Z or cx - rho < 0 or cx + rho > X:
                raise PhantomGeometryError("BMO opening does not fit in the en-face plane")
            if self.bmo_depth_mm + self.lc_thickness_mm > Y:
                raise PhantomGeometryError("lamina cribrosa extends below the volume")
        if h > 0:
            if rho == 0:
                raise PhantomGeometryError("swelling dome needs a BMO opening")
            if h > rho:
                raise PhantomGeometryError("swelling height may not exceed the BMO radius (cap <= hemisphere)")
            if self.surface_depth_mm - h < 0:
                raise PhantomGeometryError("swelling dome rises above the top of the volume")
        cz, cx = self.center if rho > 0 else (0.0, 0.0)
        for i, e in enumerate(self.drusen):
            (z0, x0, y0), (a, b, c) = e.center_mm, e.semi_axes_mm
            if min(a, b, c) <= 0:
                raise PhantomGeometryError(f"drusen {i}: semi-axes must be > 0")
            if math.hypot(z0 - cz, x0 - cx) + max(a, b) > rho:
                raise PhantomGeometryError(f"drusen {i} is not inside the BMO opening")
            if y0 - c < self.surface_depth_mm or y0 + c > Y:
                raise PhantomGeometryError(f"drusen {i} must lie below the retinal surface and inside the volume")
            for j, o in enumerate(self.drusen[:i]):
                gap = math.dist(e.center_mm, o.center_mm)
                if gap < max(e.semi_axes_mm) + max(o.semi_axes_mm):
                    raise PhantomGeometryError(f"drusen {j} and {i} may overlap")
        for i, v in enumerate(self.vessels):
            if v.radius_mm <= 0 or v.x_mm - v.radius_mm < 0 or v.x_mm + v.radius_mm > X \
                    or v.y_mm - v.radius_mm < 0 or v.y_mm + v.radius_mm > Y:
                raise PhantomGeometryError(f"vessel {i} does not fit in the volume")

    # --- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["dims"] = tuple(int(v) for v in d["dims"])
        for key in ("spacing", "layer_thickness_mm", "reflectivity", "attenuation_per_mm"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if d.get("bmo_center_mm") is not None:
            d["bmo_center_mm"] = tuple(d["bmo_center_mm"])
        d["drusen"] = tuple(
            Ellipsoid(tuple(e["center_mm"]), tuple(e["semi_axes_mm"])) for e in d.get("drusen", ())
        )
        d["vessels"] = tuple(Vessel(**v) for v in d.get("vessels", ()))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


# --- rasterization ---------------------------------------------------------

def _centers(n, step):
    return (np.arange(n) + 0.5) * step


def _depth_profiles(spec: PhantomSpec, y: np.ndarray):
    """Class per depth sample outside and inside the opening (no dome/drusen)."""
    outside = np.zeros(len(y), dtype=np.uint8)
    top = spec.surface_depth_mm
    for cls, t in zip(range(1, 7), spec.layer_thickness_mm):
        outside[(y >= top) & (y < top + t)] = cls
        top += t
    inside = np.zeros(len(y), dtype=np.uint8)
    yc = spec.bmo_depth_mm
    inside[(y >= spec.surface_depth_mm) & (y < yc)] = TissueClass.RNFL_PRELAMINA
    inside[(y >= yc) & (y < yc + spec.lc_thickness_mm)] = TissueClass.LAMINA_CRIBROSA
    return outside, inside


def gen_labels(spec: PhantomSpec) -> LabelVolume:
    """Rasterize the phantom geometry at voxel centres (no randomness involved)."""
    spec.validate()
    nb, na, nd = spec.dims
    dz, dx, dy = spec.spacing
    z, x, y = _centers(nb, dz), _centers(na, dx), _centers(nd, dy)
    out_prof, in_prof = _depth_profiles(spec, y)
    labels = np.empty((nb, na, nd), dtype=np.uint8)
    rho = spec.bmo_radius_mm
    cz, cx = spec.center
    r2 = (z[:, None] - cz) ** 2 + (x[None, :] - cx) ** 2  # (nb, na)
    inside = r2 < rho * rho
    labels[:] = np.where(inside[:, :, None], in_prof[None, None, :], out_prof[None, None, :])

    h = spec.swelling_height_mm
    if h > 0:
        R = spec.dome_sphere_radius
        ys = spec.surface_depth_mm - h + R
        above = y < spec.surface_depth_mm
        dome = (r2[:, :, None] + (y[None, None, :] - ys) ** 2 < R * R) & above[None, None, :] & inside[:, :, None]
        labels[dome] = TissueClass.RNFL_PRELAMINA

    for e in spec.drusen:
        (z0, x0, y0), (a, b, c) = e.center_mm, e.semi_axes_mm
        # bounding box in index space
        bs = slice(max(0, int((z0 - a) / dz) - 1), min(nb, int((z0 + a) / dz) + 2))
        as_ = slice(max(0, int((x0 - b) / dx) - 1), min(na, int((x0 + b) / dx) + 2))
        ds = slice(max(0, int((y0 - c) / dy) - 1), min(nd, int((y0 + c) / dy) + 2))
        q = (((z[bs] - z0) / a) ** 2)[:, None, None] + (((x[as_] - x0) / b) ** 2)[None, :, None] \
            + (((y[ds] - y0) / c) ** 2)[None, None, :]
        block = labels[bs, as_, ds]
        block[q < 1.0] = TissueClass.ODD
    return LabelVolume(labels, spec.voxel_spacing)


# --- closed-form volumes ---------------------------------------------------

@dataclass(frozen=True)
class AnalyticVolumes:
    drusen_mm3: float
    swelling_mm3: float
    prelamina_mm3: float
    dome_mm3: float


def cap_volume(h: float, rho: float) -> float:
    """Volume of a spherical cap of height ``h`` over a disc of radius ``rho``."""
    if h <= 0:
        return 0.0
    R = (rho * rho + h * h) / (2.0 * h)
    return math.pi * h * h * (3.0 * R - h) / 3.0


def ellipsoid_volume_above(e: Ellipsoid, plane_y: float) -> float:
    """Part of the ellipsoid with depth below ``plane_y`` (i.e. y < plane_y)."""
    a, b, c = e.semi_axes_mm
    hh = min(max(plane_y - (e.center_mm[2] - c), 0.0), 2.0 * c)
    return math.pi * a * b * hh * hh * (3.0 * c - hh) / (3.0 * c * c)


def analytic_volumes(spec: PhantomSpec) -> AnalyticVolumes:
    """Expected drusen and swelling scores in the continuum limit.

    The swelling volume is the prelamina inside the opening (cylinder plus
    dome) united with the drusen; drusen above the BMO plane sit inside the
    prelamina and add nothing, those below it add their full volume.
    """
    spec.validate()
    rho = spec.bmo_radius_mm
    drusen = math.fsum(e.volume for e in spec.drusen)
    if rho > 0 and spec.layer_thickness_mm[3] < spec.spacing[2]:
        raise PhantomGeometryError("RPE thinner than one depth sample; en-face opening is not detectable")
    depth = spec.bmo_depth_mm - spec.surface_depth_mm
    dome = cap_volume(spec.swelling_height_mm, rho)
    prelamina = math.pi * rho * rho * depth + dome
    below = math.fsum(e.volume - ellipsoid_volume_above(e, spec.bmo_depth_mm) for e in spec.drusen)
    return AnalyticVolumes(drusen, prelamina + below, prelamina, dome)


# --- forward optical model --------------------------------------------------

def vessel_mask(spec: PhantomSpec):
    """(na, nd) mask per vessel; vessels are constant along the B-scan axis."""
    _, na, nd = spec.dims
    _, dx, dy = spec.spacing
    x, y = _centers(na, dx), _centers(nd, dy)
    return [((x[:, None] - v.x_mm) ** 2 + (y[None, :] - v.y_mm) ** 2 < v.radius_mm ** 2) for v in spec.vessels]


def render_intensity(labels: LabelVolume, spec: PhantomSpec, seed: int = 0) -> IntensityVolume:
    """Single-scattering OCT forward model.

    ``I = R(class) * exp(-2 * sum_{k<d} mu(class_k) * dy) * N`` with log-normal
    speckle ``N = exp(sigma * Z)``; ``N == 1`` when ``speckle_sigma == 0``.
    """
    refl = np.asarray(spec.reflectivity, dtype=np.float64)[labels.data]
    mu = np.asarray(spec.attenuation_per_mm, dtype=np.float64)[labels.data]
    for v, m in zip(spec.vessels, vessel_mask(spec)):
        refl[:, m] = v.reflectivity
        mu[:, m] = v.attenuation_per_mm
    dy = labels.spacing.dy_mm
    optical = np.cumsum(mu * dy, axis=2)
    exclusive = np.concatenate([np.zeros(optical.shape[:2] + (1,)), optical[:, :, :-1]], axis=2)
    intensity = refl * np.exp(-2.0 * exclusive)
    if spec.speckle_sigma > 0:
        nb = labels.dims[0]
        for b in range(nb):
            rng = derive_rng(seed, "phantom.speckle", b)
            intensity[b] *= np.exp(spec.speckle_sigma * rng.standard_normal(intensity.shape[1:]))
    return IntensityVolume(intensity, labels.spacing)


# --- presets ---------------------------------------------------------------

PRESET_TARGETS = {
    # (drusen mm^3, swelling mm^3): the published per-class cluster means
    "healthy": (0.0, 1.23),
    "odd": (0.66, 1.98),
    "papilledema": (0.0, 3.43),
}

_PRESET_RHO = 1.05
_PRESET_SPACING = (0.03, 0.0131, 0.0039)
_PRESET_DIMS = (80, 184, 496)
_PRESET_SURFACE = 1.05
_DRUSEN_DEPTH_SEMI_AXIS = 0.3
_DRUSEN_OFFSET = 0.45


def dome_height_for(volume: float, rho: float) -> float:
    if volume <= 0:
        return 0.0
    if volume > cap_volume(rho, rho):
        raise PhantomGeometryError(f"dome volume {volume} exceeds a hemisphere of radius {rho}")
    return brentq(lambda h: cap_volume(h, rho) - volume, 1e-9, rho, xtol=1e-14)


def preset(name: str) -> PhantomSpec:
    """Phantoms landing on the published class means for both scores.

    The retinal depth inside the opening is set so the unswollen prelamina
    equals the healthy swelling mean; papilledema adds a dome, ODD adds four
    drusen straddling the BMO plane plus a smaller dome.
    """
    if name not in PRESET_TARGETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_TARGETS)}")
    rho = _PRESET_RHO
    base = PRESET_TARGETS["healthy"][1]
    depth = base / (math.pi * rho * rho)
    t1, t2, t4 = 0.10, 0.07, 0.03
    layers = (t1, t2, depth - t1 - t2 - t4, t4, 0.20, 0.25)
    spec = PhantomSpec(
        dims=_PRESET_DIMS,
        spacing=_PRESET_SPACING,
        surface_depth_mm=_PRESET_SURFACE,
        layer_thickness_mm=layers,
        lc_thickness_mm=0.25,
        bmo_radius_mm=rho,
    )
    target_drusen, target_swelling = PRESET_TARGETS[name]
    drusen = ()
    extra_below = 0.0
    if target_drusen > 0:
        c = _DRUSEN_DEPTH_SEMI_AXIS
        a = math.sqrt(target_drusen / (4 * 4.0 / 3.0 * math.pi * c))
        cz, cx = spec.center
        yc = spec.bmo_depth_mm
        drusen = tuple(
            Ellipsoid((cz + sz * _DRUSEN_OFFSET, cx + sx * _DRUSEN_OFFSET, yc), (a, a, c))
            for sz in (-1, 1) for sx in (-1, 1)
        )
        extra_below = target_drusen / 2.0  # centred on the BMO plane
    h = dome_height_for(target_swelling - base - extra_below, rho)
    spec = replace(spec, swelling_height_mm=h, drusen=drusen)
    spec.validate()
    return spec


def vessel_phantom(vessel_radius_mm: float = 0.05, vessel_mu: float = 15.0) -> PhantomSpec:
    """Flat retina without an opening and one vessel inside the RNFL."""
    na, nd = 120, 256
    dx, dy = 0.0117, 0.0039
    surface = 0.1
    layers = (0.15, 0.07, 0.10, 0.03, 0.20, 0.30)
    return PhantomSpec(
        dims=(4, na, nd),
        spacing=(0.03, dx, dy),
        surface_depth_mm=surface,
        layer_thickness_mm=layers,
        vessels=(Vessel(x_mm=na * dx / 2.0, y_mm=surface + layers[0] / 2.0, radius_mm=vessel_radius_mm,
                        reflectivity=DEFAULT_REFLECTIVITY[1], attenuation_per_mm=vessel_mu),),
    )


def shadow_columns(spec: PhantomSpec, vessel: int = 0):
    """A-scan masks (na,) for columns under the vessel core and well clear of it."""
    v = spec.vessels[vessel]
    x = _centers(spec.dims[1], spec.spacing[1])
    off = np.abs(x - v.x_mm)
    return off < v.radius_mm / 2.0, off > 2.0 * v.radius_mm


def random_spec(rng: np.random.Generator, max_drusen: int = 3) -> PhantomSpec:
    """Random valid phantom with every feature at least 8 voxels across.

    Lateral pitch stays within the typical acquisition range and the axial
    pitch is the nominal one.
    """
    dz = float(rng.uniform(0.0273, 0.03))
    dx = float(rng.uniform(0.0117, 0.0131))
    dy = 0.0039
    rho = float(rng.uniform(0.5, 0.85))
    h = float(rng.uniform(0.0, 0.9 * rho)) if rng.random() < 0.7 else 0.0
    t1, t2, t4 = (float(v) for v in rng.uniform([0.06, 0.04, 0.03], [0.15, 0.10, 0.05]))
    t3 = float(rng.uniform(0.08, 0.2))
    depth = t1 + t2 + t3 + t4
    layers = (t1, t2, t3, t4, float(rng.uniform(0.1, 0.25)), float(rng.uniform(0.1, 0.3)))
    lc = float(rng.uniform(0.15, 0.3))
    margin = 0.1
    surface = h + margin
    Z = X = 2 * rho + 2 * margin
    cz, cx = Z / 2.0, X / 2.0
    yc = surface + depth

    drusen = []
    n_target = int(rng.integers(0, max_drusen + 1))
    for _ in range(200):
        if len(drusen) >= n_target:
            break
        a, b = (float(v) for v in rng.uniform(0.2, min(0.32, 0.6 * rho), size=2))
        c = float(rng.uniform(0.12, min(0.3, depth)))
        reach = rho - max(a, b)
        if reach <= 0:
            continue
        r, th = reach * math.sqrt(rng.random()), rng.uniform(0, 2 * math.pi)
        y0 = float(rng.uniform(surface + c, yc + lc))
        e = Ellipsoid((cz + r * math.cos(th), cx + r * math.sin(th), y0), (a, b, c))
        if all(math.dist(e.center_mm, o.center_mm) >= max(e.semi_axes_mm) + max(o.semi_axes_mm) for o in drusen):
            drusen.append(e)

    bottom = max(surface + sum(layers), yc + lc, max((e.center_mm[2] + e.semi_axes_mm[2] for e in drusen), default=0))
    dims = (int(math.ceil(Z / dz)), int(math.ceil(X / dx)), int(math.ceil((bottom + 0.05) / dy)))
    spec = PhantomSpec(
        dims=dims,
        spacing=(dz, dx, dy),
        surface_depth_mm=surface,
        layer_thickness_mm=layers,
        lc_thickness_mm=lc,
        bmo_radius_mm=rho,
        bmo_center_mm=(cz, cx),
        swelling_height_mm=h,
        drusen=tuple(drusen),
    )
    spec.validate()
    return spec
