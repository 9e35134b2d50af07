import numpy as np
import pytest

from defectfit.fit import LossWeights, fit
from defectfit.lattice import INTERSTITIAL, VACANCY
from defectfit.surrogate import BasisSpec, SurrogateModel
from defectfit.training import (
    MatchingReport,
    make_training_domain,
    matching_report,
    sample_configs,
    spectral_norm,
)


@pytest.fixture(scope="module")
def vac_domain(eam, bravais):
    return make_training_domain(5, VACANCY, eam, bravais)


@pytest.fixture(scope="module")
def vac_samples(vac_domain):
    train = sample_configs(vac_domain, 20, 0.01, seed=7, tag="train")
    test = sample_configs(vac_domain, 8, 0.01, seed=8, tag="test")
    return train + test


@pytest.fixture(scope="module")
def fitted(vac_domain, vac_samples, eam):
    spec = BasisSpec(order=2, max_degree=8, n_radial=6,
                     r_cut=eam.r_cut, m_max=3)
    return fit(vac_samples, spec, LossWeights(100.0, 1.0))


def test_domain_site_counts(eam, bravais):
    dom8 = make_training_domain(8, VACANCY, eam, bravais)
    assert dom8.lattice.n_sites == 63          # 64 cells, one site removed
    assert dom8.equilibrium.converged
    assert dom8.equilibrium.min_hessian_eigenvalue > 0
    dom4 = make_training_domain(4, VACANCY, eam, bravais)
    assert dom4.lattice.n_sites == 15


def test_domain_minimum_size(eam, bravais):
    with pytest.raises(ValueError):
        make_training_domain(3, VACANCY, eam, bravais)


def test_sample_counts_and_determinism(vac_domain):
    a = sample_configs(vac_domain, 5, 0.01, seed=3)
    b = sample_configs(vac_domain, 5, 0.01, seed=3)
    assert len(a) == 5
    for x, y in zip(a, b):
        assert np.array_equal(x.u.values, y.u.values)
        assert x.energy == y.energy
        assert np.array_equal(x.forces, y.forces)
    c = sample_configs(vac_domain, 5, 0.01, seed=4)
    assert not np.array_equal(a[0].u.values, c[0].u.values)


def test_zero_delta_reproduces_equilibrium(vac_domain):
    obs = sample_configs(vac_domain, 3, 0.0, seed=1)
    for o in obs:
        assert np.array_equal(o.u.values, vac_domain.u_bar.values)
        assert np.abs(o.forces).max() <= 1e-8


def test_paper_sized_sampling(vac_domain):
    train = sample_configs(vac_domain, 200, 0.01, seed=11, tag="train")
    test = sample_configs(vac_domain, 50, 0.01, seed=12, tag="test")
    assert len(train) == 200 and len(test) == 50
    assert {o.tag for o in train} == {"train"}
    assert {o.tag for o in test} == {"test"}


def test_matching_report_self_match(vac_samples, vac_domain, fitted, bravais, eam):
    # use the fitted surrogate as its own reference: all epsilons vanish
    model = fitted.model
    sur_domain = make_training_domain(5, VACANCY, model, bravais)
    obs = sample_configs(sur_domain, 6, 0.01, seed=5, tag="test")
    rep = matching_report(sur_domain, obs, model)
    scale = max(1.0, rep.hom_hessian_norm)
    assert rep.eps_E <= 1e-10
    assert rep.eps_F <= 1e-10
    assert rep.eps_FC <= 1e-10 * scale
    assert rep.eps_FC_hom <= 1e-10 * scale


def test_matching_report_fields_nonnegative(vac_domain, vac_samples, fitted):
    rep = matching_report(vac_domain, vac_samples, fitted.model)
    for name in ("eps_E", "eps_F", "eps_FC", "eps_FC_hom", "rmse_E", "rmse_F"):
        assert getattr(rep, name) >= 0.0
    with pytest.raises(ValueError):
        MatchingReport(eps_E=-1.0, eps_F=0, eps_FC=0, eps_FC_hom=0,
                       rmse_E=0, rmse_F=0, hom_hessian_norm=1.0)


def test_matching_linearity_in_coefficient_perturbation(vac_domain, vac_samples, fitted):
    base = fitted.model
    idx = 0
    epss = []
    for t in (1e-3, 1e-2, 1e-1):
        coeff = base.coefficients.copy()
        coeff[idx] += t
        rep = matching_report(vac_domain, vac_samples,
                              SurrogateModel(spec=base.spec, coefficients=coeff))
        base_rep = matching_report(vac_domain, vac_samples, base)
        epss.append((rep.eps_E, rep.eps_F))
    # scaling the perturbation by 10 scales the induced error by ~10
    r_e = epss[2][0] / epss[1][0]
    r_f = epss[2][1] / epss[1][1]
    assert 5 < r_e < 20
    assert 5 < r_f < 20


def test_eps_monotone_under_sample_inclusion(vac_domain, vac_samples, fitted):
    small = matching_report(vac_domain, vac_samples[:10], fitted.model)
    large = matching_report(vac_domain, vac_samples, fitted.model)
    assert large.eps_E >= small.eps_E
    assert large.eps_F >= small.eps_F


def test_eps_fc_hom_independent_of_defect_kind(eam, bravais, fitted, vac_domain,
                                               vac_samples):
    int_domain = make_training_domain(5, INTERSTITIAL, eam, bravais)
    int_obs = sample_configs(int_domain, 4, 0.01, seed=9, tag="test")
    rep_vac = matching_report(vac_domain, vac_samples, fitted.model)
    rep_int = matching_report(int_domain, int_obs, fitted.model)
    assert rep_int.eps_FC_hom == pytest.approx(rep_vac.eps_FC_hom, rel=1e-6)


def test_spectral_norm_against_dense():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((40, 40))
    m = m + m.T
    exact = float(np.abs(np.linalg.eigvalsh(m)).max())
    assert spectral_norm(m, seed=1, max_steps=500) == pytest.approx(exact, rel=1e-4)
