import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from onhscore.metrics import drusen_score, swelling_score
from onhscore.phantom import (
    Ellipsoid,
    PhantomGeometryError,
    PhantomSpec,
    analytic_volumes,
    cap_volume,
    ellipsoid_volume_above,
    gen_labels,
    preset,
    random_spec,
    render_intensity,
    shadow_columns,
    vessel_mask,
    vessel_phantom,
)

SPHERE_03 = 4.0 / 3.0 * math.pi * 0.3 ** 3


def _flat(**kw):
    base = dict(dims=(4, 40, 200), spacing=(0.03, 0.0117, 0.0039), surface_depth_mm=0.0,
                layer_thickness_mm=(0.0,) * 6)
    base.update(kw)
    return PhantomSpec(**base)


def test_empty_spec_is_background():
    assert not gen_labels(_flat()).data.any()


def test_healthy_preset():
    spec = preset("healthy")
    assert spec.swelling_height_mm == 0 and spec.drusen == ()
    assert drusen_score(gen_labels(spec)) == 0.0


def test_single_sphere_voxel_volume():
    # 0.3 mm sphere at 0.02-0.03 mm pitch, centred below the BMO plane
    spec = PhantomSpec(dims=(50, 60, 240), spacing=(0.03, 0.0117, 0.0039), surface_depth_mm=0.05,
                       layer_thickness_mm=(0.1, 0.05, 0.05, 0.03, 0.1, 0.1), lc_thickness_mm=0.2,
                       bmo_radius_mm=0.34, drusen=(Ellipsoid((0.75, 0.351, 0.55), (0.3, 0.3, 0.3)),))
    av = analytic_volumes(spec)
    assert av.drusen_mm3 == pytest.approx(0.1131, abs=5e-5)
    assert drusen_score(gen_labels(spec)) == pytest.approx(SPHERE_03, rel=0.03)


def test_sphere_inside_prelamina_and_below():
    base = dict(dims=(40, 80, 400), spacing=(0.03, 0.0117, 0.0039), surface_depth_mm=0.05,
                layer_thickness_mm=(0.3, 0.2, 0.2, 0.03, 0.1, 0.1), lc_thickness_mm=0.1, bmo_radius_mm=0.45)
    cz, cx = 0.6, 0.468
    inside = PhantomSpec(**base, drusen=(Ellipsoid((cz, cx, 0.4), (0.3, 0.3, 0.3)),))
    deep = PhantomSpec(**base, drusen=(Ellipsoid((cz, cx, 0.78 + 0.31), (0.3, 0.3, 0.3)),))
    plain = analytic_volumes(PhantomSpec(**base))
    assert analytic_volumes(inside).swelling_mm3 == pytest.approx(plain.swelling_mm3)
    assert analytic_volumes(deep).swelling_mm3 == pytest.approx(plain.swelling_mm3 + SPHERE_03)
    assert analytic_volumes(deep).drusen_mm3 == pytest.approx(SPHERE_03)


def test_cap_volume_by_quadrature():
    for rho, h in [(1.0, 0.3), (0.9, 0.9), (0.5, 0.01)]:
        R = (rho ** 2 + h ** 2) / (2 * h)
        # disc radius at height s above the cap base
        area = lambda s: math.pi * (R ** 2 - (R - h + s) ** 2)
        numeric, _ = integrate.quad(area, 0, h)
        assert cap_volume(h, rho) == pytest.approx(numeric, rel=1e-10)


def test_ellipsoid_slice_by_quadrature():
    e = Ellipsoid((0, 0, 1.0), (0.3, 0.2, 0.4))
    for plane in (0.5, 0.7, 1.0, 1.25, 1.5):
        numeric, _ = integrate.quad(lambda y: math.pi * 0.3 * 0.2 * max(0.0, 1 - ((y - 1.0) / 0.4) ** 2),
                                    0.6, min(plane, 1.4))
        assert ellipsoid_volume_above(e, plane) == pytest.approx(numeric, abs=1e-12)


def test_presets_land_on_targets():
    o, p, h = (analytic_volumes(preset(n)) for n in ("odd", "papilledema", "healthy"))
    assert (o.drusen_mm3, o.swelling_mm3) == pytest.approx((0.66, 1.98))
    assert p.swelling_mm3 == pytest.approx(3.43)
    assert h.swelling_mm3 == pytest.approx(1.23)


def test_preset_voxel_scores_close_to_analytic():
    for name in ("healthy", "odd", "papilledema"):
        spec = preset(name)
        lab, av = gen_labels(spec), analytic_volumes(spec)
        assert swelling_score(lab) == pytest.approx(av.swelling_mm3, rel=0.05)
        if av.drusen_mm3:
            assert drusen_score(lab) == pytest.approx(av.drusen_mm3, rel=0.03)


def test_rpe_hole_matches_bmo():
    spec = preset("healthy")
    lab = gen_labels(spec).data
    nb, na, _ = spec.dims
    dz, dx, _ = spec.spacing
    cz, cx = spec.center
    z = (np.arange(nb) + 0.5) * dz
    x = (np.arange(na) + 0.5) * dx
    expected_hole = (z[:, None] - cz) ** 2 + (x[None, :] - cx) ** 2 < spec.bmo_radius_mm ** 2
    assert np.array_equal(~np.any(lab == 4, axis=2), expected_hole)


def test_validation_errors():
    with pytest.raises(PhantomGeometryError):
        gen_labels(_flat(layer_thickness_mm=(1.0,) * 6))
    with pytest.raises(PhantomGeometryError, match="BMO"):
        gen_labels(_flat(layer_thickness_mm=(0.05,) * 6, bmo_radius_mm=0.1,
                         drusen=(Ellipsoid((0.06, 0.234, 0.2), (0.05, 0.05, 0.05)),), bmo_center_mm=(0.06, 0.1)))
    with pytest.raises(PhantomGeometryError, match="hemisphere"):
        preset_spec = preset("healthy")
        replace(preset_spec, swelling_height_mm=1.2).validate()


def test_spec_json_round_trip():
    spec = preset("odd")
    assert PhantomSpec.from_json(spec.to_json()) == spec
    v = vessel_phantom()
    assert PhantomSpec.from_json(v.to_json()) == v


def test_render_pure_reflectivity_map():
    spec = replace(preset("odd"), attenuation_per_mm=(0.0,) * 9, dims=(80, 184, 496))
    lab = gen_labels(spec)
    img = render_intensity(lab, spec)
    expected = np.asarray(spec.reflectivity, dtype=np.float32)[lab.data]
    assert np.array_equal(img.data, expected)


def test_render_slab_attenuation():
    mu = 3.0
    spec = _flat(layer_thickness_mm=(0.39, 0.0, 0.0, 0.0, 0.2, 0.0),
                 attenuation_per_mm=(0, mu, 0, 0, 0, 0, 0, 0, 0))
    lab = gen_labels(spec)
    img = render_intensity(lab, spec).data[0, 0].astype(np.float64)
    n1 = int(np.count_nonzero(lab.data[0, 0] == 1))
    first_deep = np.nonzero(lab.data[0, 0] == 5)[0][0]
    T = n1 * spec.spacing[2]
    assert img[first_deep] / spec.reflectivity[5] == pytest.approx(math.exp(-2 * mu * T), rel=1e-6)


def test_vessel_shadow_closed_form():
    spec = vessel_phantom()
    lab = gen_labels(spec)
    img = render_intensity(lab, spec).data.astype(np.float64)
    mask = vessel_mask(spec)[0]
    col = int(np.argmax(mask.sum(axis=1)))
    path = mask[col].sum() * spec.spacing[2]
    delta_mu = spec.vessels[0].attenuation_per_mm - spec.attenuation_per_mm[1]
    _, clear = shadow_columns(spec)
    ref = int(np.nonzero(clear)[0][0])
    deep = lab.data[0, col] == 5
    ratio = img[0, col, deep].mean() / img[0, ref, deep].mean()
    assert ratio == pytest.approx(math.exp(-2 * delta_mu * path), rel=0.01)


def test_speckle_deterministic():
    spec = replace(vessel_phantom(), speckle_sigma=0.3)
    lab = gen_labels(spec)
    a = render_intensity(lab, spec, seed=7).data
    b = render_intensity(lab, spec, seed=7).data
    c = render_intensity(lab, spec, seed=8).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_random_specs_valid_and_reproducible():
    a = [random_spec(np.random.default_rng(s)) for s in range(5)]
    b = [random_spec(np.random.default_rng(s)) for s in range(5)]
    assert a == b
    for spec in a:
        assert max(spec.spacing) <= 0.03
        assert gen_labels(spec).data.tobytes() == gen_labels(spec).data.tobytes()
