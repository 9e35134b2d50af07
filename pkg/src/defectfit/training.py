"""Training domains, perturbed-configuration sampling, and matching errors.

A training domain is a small periodic cell with a single defect at the
origin, equilibrated under the reference potential and certified strongly
stable.  Training data are random perturbations of that equilibrium with
reference energies and forces attached; the matching report measures how
far a surrogate is from the reference in energy, force, and
force-constant terms near the training equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DefectFitError
from .equilibrate import EquilibriumResult, MinimizerConfig, check_stability, equilibrate
from .lattice import (BravaisSpec, DefectSet, DefectedLattice, DisplacementField,
                      INTERSTITIAL, SupercellSpec, VACANCY, build_lattice,
                      check_admissible)
from .potential import EnergyAssembler, SitePotential

__all__ = [
    "TrainingDomain",
    "Observation",
    "MatchingReport",
    "UnstableTrainingEquilibrium",
    "InadmissibleSample",
    "PowerIterationNotConverged",
    "make_training_domain",
    "sample_configs",
    "matching_report",
    "spectral_norm",
]


class UnstableTrainingEquilibrium(DefectFitError):
    pass


class InadmissibleSample(DefectFitError):
    pass


class PowerIterationNotConverged(DefectFitError):
    pass


@dataclass
class TrainingDomain:
    """Periodic cell of side L with one defect at the origin, equilibrated."""

    L: float
    defect_kind: str
    lattice: DefectedLattice
    equilibrium: EquilibriumResult
    potential: SitePotential
    assembler: EnergyAssembler

    @property
    def u_bar(self) -> DisplacementField:
        return self.equilibrium.u_bar


@dataclass
class Observation:
    """One training/test configuration with reference observations attached."""

    u: DisplacementField
    energy: float
    forces: np.ndarray
    tag: str
    defect_kind: str


@dataclass
class MatchingReport:
    eps_E: float
    eps_F: float
    eps_FC: float
    eps_FC_hom: float
    rmse_E: float
    rmse_F: float
    hom_hessian_norm: float

    def __post_init__(self):
        for name in ("eps_E", "eps_F", "eps_FC", "eps_FC_hom", "rmse_E", "rmse_F"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def make_training_domain(L: float, defect_kind: str, potential: SitePotential,
                         bravais: BravaisSpec,
                         minimizer: MinimizerConfig | None = None) -> TrainingDomain:
    """Build, equilibrate, and stability-check a single-defect training cell.

    ``L`` is the cell side in multiples of the lattice spacing (an integer;
    at least 4).
    """
    r0 = bravais.r0
    if L < 4 - 1e-9:
        raise ValueError("training domain side must be at least 4*r0")
    repeat = int(round(L))
    if abs(L - repeat) > 1e-9:
        raise ValueError("training domain side must be an integer multiple of r0")
    if defect_kind == VACANCY:
        defects = DefectSet.vacancies(bravais, [(0, 0)])
    elif defect_kind == INTERSTITIAL:
        defects = DefectSet.single_interstitial(bravais)
    else:
        raise ValueError(f"unknown defect kind {defect_kind}")
    lattice = build_lattice(bravais, SupercellSpec(repeat), defects)
    assembler = EnergyAssembler(lattice, potential)
    result = equilibrate(lattice, potential, config=minimizer, assembler=assembler)
    c_bar = check_stability(result, potential, assembler=assembler)
    if c_bar <= 0:
        raise UnstableTrainingEquilibrium(
            f"training equilibrium unstable: smallest eigenvalue {c_bar:.3e}")
    return TrainingDomain(L=float(repeat) * r0, defect_kind=defect_kind,
                          lattice=lattice, equilibrium=result,
                          potential=potential, assembler=assembler)


def sample_configs(domain: TrainingDomain, n: int, delta: float, seed: int,
                   tag: str = "train", max_attempts: int = 100) -> list:
    """Draw admissible perturbations of the training equilibrium.

    Each configuration is u_bar plus i.i.d. Gaussian noise of standard
    deviation ``delta * r0`` per coordinate; inadmissible draws are
    rejected and redrawn.  Deterministic for fixed ``seed``.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    rng = np.random.default_rng(seed)
    lat = domain.lattice
    asm = domain.assembler
    sigma = delta * lat.bravais.r0
    out = []
    for _ in range(n):
        for attempt in range(max_attempts):
            vals = domain.u_bar.values + sigma * rng.standard_normal((lat.n_sites, 2))
            u = DisplacementField(lat, vals)
            if check_admissible(u, asm.admissibility_m):
                break
        else:
            raise InadmissibleSample(
                f"no admissible sample after {max_attempts} attempts")
        energy, forces = asm.energy_and_forces(u, check=False)
        out.append(Observation(u=u, energy=energy, forces=forces, tag=tag,
                               defect_kind=domain.defect_kind))
    return out


# ---------------------------------------------------------------------------
# matching conditions


def spectral_norm(matrix, seed: int = 0, max_steps: int = 50,
                  tol: float = 1e-6) -> float:
    """Largest singular value of a symmetric operator by power iteration.

    Falls back to a dense eigensolve when the iteration has not settled
    within ``max_steps`` and the matrix is small; otherwise raises
    :class:`PowerIterationNotConverged`.
    """
    n = matrix.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    est_old = 0.0
    for _ in range(max_steps):
        y = matrix @ x
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0
        x = y / est
        if abs(est - est_old) <= tol * est:
            return est
        est_old = est
    if n <= 4000:
        dense = matrix.toarray() if hasattr(matrix, "toarray") else np.asarray(matrix)
        return float(np.abs(np.linalg.eigvalsh(dense)).max())
    raise PowerIterationNotConverged(
        f"norm estimate not converged after {max_steps} steps")


def matching_report(domain: TrainingDomain, samples, model,
                    seed: int = 0) -> MatchingReport:
    """Energy/force/force-constant discrepancies of a surrogate on a domain.

    Max-type errors are taken over the given samples; the force-constant
    errors are spectral norms of Hessian differences at the training
    equilibrium and on the homogeneous cell of the same size.  RMSE fields
    are computed over the test-tagged samples (all samples when none are
    tagged), per site for energies and per component for forces.
    """
    from .fit import predict_observations

    if not samples:
        raise ValueError("samples must be nonempty")
    lat = domain.lattice
    asm_ref = domain.assembler

    energies, forces = predict_observations(list(samples), model)
    de = np.array([abs(e - s.energy) for e, s in zip(energies, samples)])
    df = np.array([np.linalg.norm(f - s.forces) for f, s in zip(forces, samples)])
    eps_e = float(de.max())
    eps_f = float(df.max())

    n_sites = lat.n_sites
    is_test = np.array([s.tag == "test" for s in samples])
    if not is_test.any():
        is_test[:] = True
    diffs_e = [(energies[i] - samples[i].energy) / n_sites
               for i in np.nonzero(is_test)[0]]
    diffs_f = [forces[i] - samples[i].forces for i in np.nonzero(is_test)[0]]
    rmse_e = float(np.sqrt(np.mean(np.square(diffs_e))))
    rmse_f = float(np.sqrt(np.mean(np.square(np.concatenate(diffs_f).ravel()))))

    asm_sur = EnergyAssembler(lat, model)
    h_ref = asm_ref.hessian(domain.u_bar, check=False)
    h_sur = asm_sur.hessian(domain.u_bar, check=False)
    eps_fc = spectral_norm(h_ref - h_sur, seed=seed)

    hom_lattice = build_lattice(lat.bravais, lat.cell, None)
    asm_ref_h = EnergyAssembler(hom_lattice, domain.potential)
    asm_sur_h = EnergyAssembler(hom_lattice, model)
    zero = DisplacementField.zeros(hom_lattice)
    h_ref_hom = asm_ref_h.hessian(zero, check=False)
    h_sur_hom = asm_sur_h.hessian(zero, check=False)
    eps_fc_hom = spectral_norm(h_ref_hom - h_sur_hom, seed=seed)
    hom_norm = spectral_norm(h_ref_hom, seed=seed)

    return MatchingReport(eps_E=eps_e, eps_F=eps_f, eps_FC=eps_fc,
                          eps_FC_hom=eps_fc_hom, rmse_E=rmse_e, rmse_F=rmse_f,
                          hom_hessian_norm=hom_norm)
