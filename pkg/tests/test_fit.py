import numpy as np
import pytest

from defectfit.fit import (
    AllColumnsTruncated,
    DimensionMismatch,
    LossWeights,
    assemble,
    fit,
    fit_family,
    predict_observations,
    solve_rrqr,
)
from defectfit.lattice import DefectSet, DisplacementField, SupercellSpec, VACANCY, build_lattice
from defectfit.potential import EnergyAssembler
from defectfit.surrogate import BasisSpec, SurrogateModel, evaluator_for
from defectfit.training import Observation, make_training_domain, sample_configs


def _normal_equations(a, b):
    return np.linalg.solve(a.T @ a, a.T @ b)


def test_solve_rrqr_matches_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.standard_normal((30, 6))
        b = rng.standard_normal(30)
        coef, rank = solve_rrqr(a, b)
        assert rank == 6
        ref = _normal_equations(a, b)
        assert np.abs(coef - ref).max() < 1e-8 * max(1.0, np.abs(ref).max())


def test_solve_rrqr_duplicate_column():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((25, 5))
    a = np.hstack([a, a[:, 2:3]])          # exact duplicate
    b = rng.standard_normal(25)
    coef, rank = solve_rrqr(a, b)
    assert rank == 5
    full = np.linalg.lstsq(a[:, :5], b, rcond=None)
    resid_full = float(np.linalg.norm(a[:, :5] @ full[0] - b))
    resid = float(np.linalg.norm(a @ coef - b))
    assert resid == pytest.approx(resid_full, rel=1e-10)


def test_solve_rrqr_consistent_target():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((20, 4))
    x = rng.standard_normal(4)
    coef, rank = solve_rrqr(a, a @ x)
    assert np.linalg.norm(a @ coef - a @ x) < 1e-10


def test_solve_rrqr_scale_invariance():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((20, 4))
    b = rng.standard_normal(20)
    c1, _ = solve_rrqr(a, b)
    c2, _ = solve_rrqr(1.7e3 * a, 1.7e3 * b)
    assert np.abs(c1 - c2).max() < 1e-12 * max(1.0, np.abs(c1).max())


def test_solve_rrqr_all_truncated():
    with pytest.raises(AllColumnsTruncated):
        solve_rrqr(np.zeros((5, 3)), np.zeros(5))


@pytest.fixture(scope="module")
def small_setup(eam, bravais):
    domain = make_training_domain(4, VACANCY, eam, bravais)
    train = sample_configs(domain, 12, 0.01, seed=21, tag="train")
    test = sample_configs(domain, 5, 0.01, seed=22, tag="test")
    spec = BasisSpec(order=2, max_degree=6, n_radial=5, r_cut=eam.r_cut, m_max=3)
    return domain, train, test, spec


def test_assemble_shapes_and_zero_weight(small_setup):
    domain, train, test, spec = small_setup
    n = domain.lattice.n_sites
    a, b = assemble(train[:2], spec, LossWeights(4.0, 0.0))
    assert a.shape == (2 * (1 + 2 * n), evaluator_for(spec).n_basis)
    force_rows = np.delete(np.arange(len(b)), [0, 1 + 2 * n])
    assert np.all(a[force_rows] == 0.0)
    assert np.all(b[force_rows] == 0.0)


def test_assemble_energy_row_consistency(small_setup, eam):
    domain, train, test, spec = small_setup
    a, b = assemble(train[:3], spec, LossWeights(9.0, 1.0))
    rng = np.random.default_rng(5)
    coef = rng.standard_normal(a.shape[1])
    model = SurrogateModel(spec=spec, coefficients=coef)
    asm = EnergyAssembler(domain.lattice, model)
    n = domain.lattice.n_sites
    for k, obs in enumerate(train[:3]):
        row = a[k * (1 + 2 * n)]
        expected = 3.0 * asm.total_energy(obs.u, check=False)
        assert row @ coef == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_assemble_force_rows_match_model_forces(small_setup):
    domain, train, test, spec = small_setup
    a, b = assemble(train[:2], spec, LossWeights(1.0, 1.0))
    rng = np.random.default_rng(6)
    coef = rng.standard_normal(a.shape[1])
    model = SurrogateModel(spec=spec, coefficients=coef)
    asm = EnergyAssembler(domain.lattice, model)
    n = domain.lattice.n_sites
    f_pred = (a[1:1 + 2 * n] @ coef).reshape(n, 2)
    f_model = asm.forces(train[0].u, check=False)
    assert np.abs(f_pred - f_model).max() < 1e-10 * max(1.0, np.abs(f_model).max())


def test_assemble_rejects_mixed_domains(small_setup, eam, bravais):
    domain, train, test, spec = small_setup
    other = make_training_domain(5, VACANCY, eam, bravais)
    alien = sample_configs(other, 2, 0.01, seed=30)
    with pytest.raises(DimensionMismatch):
        assemble(train[:2] + alien, spec, LossWeights())


def test_fit_realizable_reference(small_setup, bravais):
    # observations generated by a model inside the basis span fit to ~0
    domain, train, test, spec = small_setup
    rng = np.random.default_rng(7)
    ev = evaluator_for(spec)
    truth = SurrogateModel(spec=spec,
                           coefficients=0.1 * rng.standard_normal(ev.n_basis))
    groups = []
    for tag, seed, n in (("train", 31, 14), ("test", 32, 6)):
        obs = sample_configs(domain, n, 0.01, seed=seed, tag=tag)
        energies, forces = predict_observations(obs, truth)
        groups += [Observation(u=o.u, energy=e, forces=f, tag=tag,
                               defect_kind=o.defect_kind)
                   for o, e, f in zip(obs, energies, forces)]
    res = fit(groups, spec, LossWeights(100.0, 1.0), rtol=1e-14)
    assert res.rmse_energy_test < 1e-8
    assert res.rmse_force_test < 1e-8


def test_fit_family_nested_residual_monotone(small_setup):
    domain, train, test, spec = small_setup
    specs = [BasisSpec(order=1, max_degree=4, n_radial=5, r_cut=spec.r_cut, m_max=3),
             BasisSpec(order=2, max_degree=5, n_radial=5, r_cut=spec.r_cut, m_max=3),
             BasisSpec(order=2, max_degree=6, n_radial=5, r_cut=spec.r_cut, m_max=3)]
    results = fit_family(train + test, specs, LossWeights(100.0, 1.0))
    losses = [r.residual_loss for r in results]
    assert losses[2] <= losses[1] * (1 + 1e-9)
    assert losses[1] <= losses[0] * (1 + 1e-9)
    solo = fit(train + test, specs[1], LossWeights(100.0, 1.0))
    assert np.allclose(solo.model.coefficients, results[1].model.coefficients,
                       rtol=0, atol=1e-10)


def test_fit_deterministic(small_setup):
    domain, train, test, spec = small_setup
    r1 = fit(train + test, spec, LossWeights(100.0, 1.0))
    r2 = fit(train + test, spec, LossWeights(100.0, 1.0))
    assert np.array_equal(r1.model.coefficients, r2.model.coefficients)


def test_per_kind_weights():
    w = LossWeights(energy=10.0, force=1.0,
                    per_kind={"interstitial": (100.0, 10.0)})
    assert w.for_kind("vacancy") == (10.0, 1.0)
    assert w.for_kind("interstitial") == (100.0, 10.0)
    with pytest.raises(ValueError):
        LossWeights(energy=0.0, force=0.0)
