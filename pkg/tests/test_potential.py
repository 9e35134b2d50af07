import numpy as np
import pytest

from defectfit.lattice import (DefectSet, DisplacementField, SupercellSpec,
                               build_lattice)
from defectfit.potential import (
    EamToyPotential,
    EnergyAssembler,
    InadmissibleConfiguration,
    NoMinimumInBracket,
    calibrate_r0,
    fd_force_error,
    fd_hessian_error,
    triangular_shell_offsets,
)
from conftest import rotation


def _eam_oracle_energy(lattice, pot, u):
    """Slow reference: explicit loops over sites, neighbors, and images."""
    total = 0.0
    for i in range(lattice.n_sites):
        for vals in (u.values, np.zeros_like(u.values)):
            pair = 0.0
            rho = 0.0
            for j in range(lattice.n_sites):
                for ax in (-2, -1, 0, 1, 2):
                    for ay in (-2, -1, 0, 1, 2):
                        if i == j and ax == 0 and ay == 0:
                            continue
                        vec = (lattice.positions[j] + lattice.period @ np.array([ax, ay])
                               - lattice.positions[i] + vals[j] - vals[i])
                        r = np.linalg.norm(vec)
                        if r > pot.r_cut:
                            continue
                        phi, _, _, psi, _, _ = pot._pair_terms(np.array([r]))
                        pair += 0.5 * phi[0]
                        rho += psi[0]
            f, _, _ = pot._embed(np.array([rho]))
            sign = 1.0 if vals is u.values else -1.0
            total += sign * (pair + f[0])
    return total


def test_energy_zero_at_reference(eam, bravais, vac5):
    asm = EnergyAssembler(vac5, eam)
    assert asm.total_energy(DisplacementField.zeros(vac5)) == 0.0


def test_translation_invariance(eam, bravais, hom4):
    asm = EnergyAssembler(hom4, eam)
    u = DisplacementField(hom4, np.tile([0.21, -0.13], (hom4.n_sites, 1)))
    assert asm.total_energy(u) == pytest.approx(0.0, abs=1e-12)


def test_energy_matches_double_loop_oracle(eam, bravais):
    lat = build_lattice(bravais, SupercellSpec(3))
    rng = np.random.default_rng(5)
    u = DisplacementField(lat, 0.01 * bravais.r0 * rng.standard_normal((lat.n_sites, 2)))
    asm = EnergyAssembler(lat, eam)
    fast = asm.total_energy(u)
    slow = _eam_oracle_energy(lat, eam, u)
    assert fast == pytest.approx(slow, rel=1e-12)


def test_forces_zero_on_homogeneous_lattice(eam, hom4):
    asm = EnergyAssembler(hom4, eam)
    f = asm.forces(DisplacementField.zeros(hom4))
    assert np.abs(f).max() < 1e-12


def test_vacancy_forces_localized_and_fd(eam, bravais):
    lat = build_lattice(bravais, SupercellSpec(10),
                        DefectSet.vacancies(bravais, [(0, 0)]))
    asm = EnergyAssembler(lat, eam)
    u = DisplacementField.zeros(lat)
    f = asm.forces(u)
    mag = np.linalg.norm(f, axis=1)
    d = np.linalg.norm(lat.min_image(lat.positions), axis=1)
    ring = d < 1.01 * bravais.r0
    far = d > 3.0 * bravais.r0
    assert mag[ring].min() > 10 * mag[far].max()
    assert fd_force_error(asm, u) < 1e-6


def test_net_force_vanishes(eam, bravais, vac5):
    rng = np.random.default_rng(9)
    u = DisplacementField(vac5, 0.01 * bravais.r0 * rng.standard_normal((vac5.n_sites, 2)))
    asm = EnergyAssembler(vac5, eam)
    f = asm.forces(u)
    scale = np.linalg.norm(f, axis=1).max()
    assert np.abs(f.sum(axis=0)).max() < 1e-10 * max(scale, 1.0)


def test_gradient_checks_on_random_configs(eam, bravais, vac5):
    asm = EnergyAssembler(vac5, eam)
    rng = np.random.default_rng(11)
    for _ in range(3):
        u = DisplacementField(vac5, 0.01 * bravais.r0
                              * rng.standard_normal((vac5.n_sites, 2)))
        assert fd_force_error(asm, u) < 1e-6


def test_hessian_fd_and_symmetry(eam, bravais):
    lat = build_lattice(bravais, SupercellSpec(4),
                        DefectSet.vacancies(bravais, [(0, 0)]))
    asm = EnergyAssembler(lat, eam)
    rng = np.random.default_rng(2)
    u = DisplacementField(lat, 0.01 * bravais.r0 * rng.standard_normal((lat.n_sites, 2)))
    assert fd_hessian_error(asm, u) < 1e-5
    h = asm.hessian(u).toarray()
    assert np.abs(h - h.T).max() < 1e-12 * max(1.0, np.abs(h).max())


def test_hessian_acoustic_sum_rule_and_phonons(eam, bravais, hom4):
    asm = EnergyAssembler(hom4, eam)
    h = asm.hessian(DisplacementField.zeros(hom4)).toarray()
    n = hom4.n_sites
    blocks = h.reshape(n, 2, n, 2).sum(axis=2)
    assert np.abs(blocks).max() < 1e-8
    w = np.linalg.eigvalsh(h)
    assert np.abs(w[:2]).max() < 1e-9        # two rigid translations
    assert w[2] > 0.1                        # phonon stability


def test_locality(eam, bravais):
    # displacing a site farther than 2*r_cut from site 0 leaves V_0 unchanged
    lat = build_lattice(bravais, SupercellSpec(12))
    asm = EnergyAssembler(lat, eam)
    rng = np.random.default_rng(4)
    u = DisplacementField(lat, 0.005 * bravais.r0 * rng.standard_normal((lat.n_sites, 2)))
    e0 = asm.site_energies(u)[0]
    d = np.linalg.norm(lat.min_image(lat.positions - lat.positions[0]), axis=1)
    far = int(np.argmax(d > 2 * eam.r_cut))
    u.values[far] = 0.0
    assert asm.site_energies(u)[0] == e0     # bitwise


def test_isometry_invariance(eam, bravais):
    from defectfit.lattice import BravaisSpec

    lat = build_lattice(bravais, SupercellSpec(4),
                        DefectSet.vacancies(bravais, [(0, 0)]))
    rng = np.random.default_rng(6)
    vals = 0.01 * bravais.r0 * rng.standard_normal((lat.n_sites, 2))
    e = EnergyAssembler(lat, eam).total_energy(DisplacementField(lat, vals))
    rot = rotation(0.83)
    rotated = BravaisSpec(rot @ bravais.cell_matrix, bravais.r0)
    lat_r = build_lattice(rotated, SupercellSpec(4),
                          DefectSet.vacancies(rotated, [(0, 0)]))
    e_r = EnergyAssembler(lat_r, eam).total_energy(
        DisplacementField(lat_r, vals @ rot.T))
    assert e_r == pytest.approx(e, rel=1e-12, abs=1e-12)


def test_inadmissible_configuration_raises(eam, hom4):
    asm = EnergyAssembler(hom4, eam)
    bad = DisplacementField.zeros(hom4)
    nj, nv = hom4.nn_neighbors(0)
    bad.values[0] = nv[0]
    with pytest.raises(InadmissibleConfiguration):
        asm.total_energy(bad)


def test_calibrate_pair_only_single_shell(bravais):
    # nearest neighbors only: equilibrium at the Morse minimum
    pot = EamToyPotential(pair_length=1.0, embed_sqrt=0.0, embed_quad=0.0,
                          r_cut=1.3, taper_width=0.2)
    r0 = calibrate_r0(pot, bracket=(0.7, 1.2))
    # taper starts at 1.1, so the minimum at 1.0 is untouched
    assert r0 == pytest.approx(1.0, abs=1e-8)
    deeper = EamToyPotential(pair_depth=2.0, pair_length=1.0, embed_sqrt=0.0,
                             embed_quad=0.0, r_cut=1.3, taper_width=0.2)
    assert calibrate_r0(deeper, bracket=(0.7, 1.2)) == pytest.approx(r0, abs=1e-8)


def test_calibrate_full_eam_residual(eam, bravais):
    from scipy.optimize import golden

    r0 = calibrate_r0(eam)
    unit = triangular_shell_offsets(type(bravais).triangular(1.0), eam.r_cut / 0.6 + 1)

    def energy(s):
        return eam.site_energy(unit * s)

    s_star = golden(energy, brack=(0.8, r0, 1.3), tol=1e-12)
    assert r0 == pytest.approx(s_star, abs=1e-6)
    h = 1e-6
    deriv = (energy(r0 + h) - energy(r0 - h)) / (2 * h)
    assert abs(deriv) < 1e-8


def test_calibrate_no_minimum(bravais):
    pot = EamToyPotential(pair_depth=0.0, embed_sqrt=0.0, embed_quad=0.0)
    with pytest.raises(NoMinimumInBracket):
        calibrate_r0(pot)
