import numpy as np
import pytest

from defectfit.analysis import (
    LatticeMismatch,
    NonpositiveValue,
    TooFewPoints,
    defect_case_set,
    energy_error,
    fit_rate,
    geometry_error,
)
from defectfit.lattice import (DisplacementField, SupercellSpec, build_lattice,
                               global_stencil_norm, min_separation)
from defectfit.potential import EnergyAssembler


def _random_field(lattice, seed, scale=0.02):
    rng = np.random.default_rng(seed)
    return DisplacementField(lattice, scale * rng.standard_normal((lattice.n_sites, 2)))


def test_geometry_error_basics(bravais):
    lat = build_lattice(bravais, SupercellSpec(3))
    u = _random_field(lat, 0)
    assert geometry_error(u, u) == 0.0
    shifted = DisplacementField(lat, u.values + np.array([0.2, -0.7]))
    assert geometry_error(u, shifted) == pytest.approx(0.0, abs=1e-12)
    v = _random_field(lat, 1)
    assert geometry_error(u, v) == geometry_error(v, u)


def test_geometry_error_double_loop_oracle(bravais):
    lat = build_lattice(bravais, SupercellSpec(3))
    u, v = _random_field(lat, 2), _random_field(lat, 3)
    total = 0.0
    for site in range(lat.n_sites):
        nj, _ = lat.nn_neighbors(site)
        for j in nj:
            d = (u.values[j] - v.values[j]) - (u.values[site] - v.values[site])
            total += d @ d
    assert geometry_error(u, v) == pytest.approx(np.sqrt(total), rel=1e-12)


def test_geometry_error_triangle_inequality(bravais):
    lat = build_lattice(bravais, SupercellSpec(3))
    u, v, w = (_random_field(lat, s) for s in (4, 5, 6))
    assert geometry_error(u, w) <= geometry_error(u, v) + geometry_error(v, w) + 1e-12


def test_geometry_error_lattice_mismatch(bravais):
    a = build_lattice(bravais, SupercellSpec(3))
    b = build_lattice(bravais, SupercellSpec(4))
    with pytest.raises(LatticeMismatch):
        geometry_error(_random_field(a, 0), _random_field(b, 0))


def test_energy_error_self_is_zero(eam, bravais):
    lat = build_lattice(bravais, SupercellSpec(4))
    asm = EnergyAssembler(lat, eam)
    u = _random_field(lat, 7, scale=0.005)
    assert energy_error(lat, asm, asm, u, u) == 0.0


def test_fit_rate_exact_power_laws():
    xs = np.array([2.0, 4.0, 8.0, 16.0])
    r = fit_rate([(x, x ** -1.0) for x in xs])
    assert r.slope == pytest.approx(-1.0, abs=1e-12)
    r3 = fit_rate([(x, 7.0 * x ** -3.0) for x in xs])
    assert r3.slope == pytest.approx(-3.0, abs=1e-12)
    assert r3.intercept == pytest.approx(np.log(7.0), abs=1e-12)
    assert r3.r_squared == pytest.approx(1.0, abs=1e-12)
    assert r3.points_used == 4


def test_fit_rate_window_and_errors():
    pts = [(1.0, 1.0), (2.0, 0.5), (4.0, 0.25), (100.0, 1e9)]
    r = fit_rate(pts, window=(1.0, 4.0))
    assert r.slope == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(TooFewPoints):
        fit_rate(pts[:2])
    with pytest.raises(NonpositiveValue):
        fit_rate([(1.0, 1.0), (2.0, -0.5), (3.0, 1.0)])


def test_fit_rate_scale_invariance():
    rng = np.random.default_rng(0)
    pts = [(x, x ** -1.7 * np.exp(0.05 * rng.standard_normal()))
           for x in (2.0, 3.0, 5.0, 9.0)]
    base = fit_rate(pts).slope
    assert fit_rate([(3.0 * x, y) for x, y in pts]).slope == pytest.approx(base, abs=1e-12)
    assert fit_rate([(x, 10.0 * y) for x, y in pts]).slope == pytest.approx(base, abs=1e-12)


def test_defect_case_positions(bravais):
    for n in (2, 3, 4):
        ds = defect_case_set(["vacancy"] * n, 6, bravais)
        lat = build_lattice(bravais, SupercellSpec(30), ds)
        assert min_separation(lat) == pytest.approx(6 * bravais.r0, rel=1e-12)
    mixed = defect_case_set(["interstitial", "vacancy"], 6, bravais)
    assert mixed.kinds[0] == "interstitial"
    assert len(mixed.kinds) == 2
