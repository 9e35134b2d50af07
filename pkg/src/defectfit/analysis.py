"""Error metrics on the simulation domain and convergence-rate estimation.

The study driver reproduces the full experiment grid: fit surrogates on
single-defect training cells of increasing size, deploy them on a large
multi-defect simulation cell warm-started from the truncated-core
predictor, and record geometry/energy errors together with the matching
conditions, so that the decay rates against training-cell size and fit
accuracy can be read off.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import DefectFitError
from .lattice import DisplacementField, global_stencil_norm

__all__ = [
    "ErrorPair",
    "RateFit",
    "LatticeMismatch",
    "TooFewPoints",
    "NonpositiveValue",
    "geometry_error",
    "energy_error",
    "fit_rate",
    "defect_case_set",
    "convergence_study",
    "STUDY_COLUMNS",
]


class LatticeMismatch(DefectFitError):
    pass


class TooFewPoints(DefectFitError):
    pass


class NonpositiveValue(DefectFitError):
    pass


@dataclass
class ErrorPair:
    """Geometry and formation-energy error of a surrogate at one grid point."""

    geometry_error: float
    energy_error: float
    L: float
    rmse_F: float
    n_defects: int


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points_used: int


def geometry_error(u_ref: DisplacementField, u_sur: DisplacementField) -> float:
    """Discrete energy norm of the difference of two displacement fields."""
    if u_ref.lattice is not u_sur.lattice:
        if u_ref.lattice.n_sites != u_sur.lattice.n_sites or not np.allclose(
                u_ref.lattice.positions, u_sur.lattice.positions):
            raise LatticeMismatch("displacement fields live on different lattices")
    diff = DisplacementField(u_ref.lattice, u_ref.values - u_sur.values)
    return global_stencil_norm(diff)


def energy_error(lattice, assembler_ref, assembler_sur,
                 u_ref: DisplacementField, u_sur: DisplacementField) -> float:
    """|E_ref(u_ref) - E_sur(u_sur)|, each relative to its own undisplaced state."""
    e_ref = assembler_ref.total_energy(u_ref, check=False)
    e_sur = assembler_sur.total_energy(u_sur, check=False)
    return abs(e_ref - e_sur)


def fit_rate(points, window=None) -> RateFit:
    """Least-squares slope of log y against log x.

    ``points`` is a sequence of (x, y) pairs; ``window`` optionally restricts
    to x in [window[0], window[1]].  All used values must be positive.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if window is not None:
        pts = [(x, y) for x, y in pts if window[0] - 1e-12 <= x <= window[1] + 1e-12]
    if len(pts) < 3:
        raise TooFewPoints(f"need at least 3 points, got {len(pts)}")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise NonpositiveValue("log-log fit requires positive coordinates")
    lx, ly = np.log(xs), np.log(ys)
    a = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(a, ly, rcond=None)
    resid = ly - a @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(slope=float(coef[0]), intercept=float(coef[1]),
                   r_squared=r2, points_used=len(pts))


# ---------------------------------------------------------------------------
# the full experiment grid


STUDY_COLUMNS = ["L", "n_D", "defect_kinds", "n_basis", "rmse_E", "rmse_F",
                 "eps_E", "eps_F", "eps_FC", "eps_FC_hom",
                 "geometry_error", "energy_error", "error"]


def defect_case_set(kinds, L, bravais, core_radius=None):
    """Defect positions for a case at pairwise lattice separation ``L``.

    Vacancies occupy the corners 0, L*a1, L*a2, L*(a1+a2) of a rhombus
    (2, 3 or 4 of them, all nearest pairs exactly L*r0 apart); when an
    interstitial is requested it sits at the triangle center next to the
    origin and the vacancies shift to the remaining corners.
    """
    from .lattice import DefectSet, INTERSTITIAL, VACANCY

    kinds = list(kinds)
    n_int = kinds.count(INTERSTITIAL)
    n_vac = kinds.count(VACANCY)
    if n_int > 1:
        raise ValueError("at most one interstitial per case is supported")
    corners = [(0, 0), (L, 0), (0, L), (L, L)]
    positions = []
    out_kinds = []
    if n_int:
        positions.append(bravais.triangle_center((0, 0)))
        out_kinds.append(INTERSTITIAL)
        corners = corners[1:]
    if n_vac > len(corners):
        raise ValueError("too many defects in one case")
    for ij in corners[:n_vac]:
        positions.append(bravais.site(ij))
        out_kinds.append(VACANCY)
    cr = 1.5 * bravais.r0 if core_radius is None else core_radius
    return DefectSet(kinds=out_kinds, positions=np.array(positions), core_radius=cr)


def _train_seed(base, L, kind):
    return base + 1009 * int(L) + (0 if kind == "vacancy" else 101)


def convergence_study(cfg, minimizer=None, log=None):
    """Run the experiment grid of a run configuration.

    Returns (rows, rates, timings): one row dict per (defect case, L, basis
    spec) grid point in deterministic order, a per-case rate summary, and a
    wall-time record per row.  Stage failures are recorded in the row's
    ``error`` field and the study continues.
    """
    from .equilibrate import MinimizerConfig, build_predictor, equilibrate
    from .fit import fit_family
    from .lattice import SupercellSpec, build_lattice, min_separation
    from .potential import EnergyAssembler
    from .training import make_training_domain, matching_report, sample_configs

    mini = minimizer or MinimizerConfig(g_tol=cfg.minimizer_g_tol,
                                        max_iter=cfg.minimizer_max_iter)
    pot = cfg.potential
    bravais = cfg.bravais
    say = log if log is not None else (lambda msg: None)

    all_kinds = sorted({k for case in cfg.study.defect_cases for k in case})
    cores = {}
    for kind in all_kinds:
        say(f"core solution ({kind}, N={cfg.study.core_N})")
        dset = defect_case_set([kind], 0, bravais)
        core_lat = build_lattice(bravais, SupercellSpec(cfg.study.core_N), dset)
        cores[kind] = equilibrate(core_lat, pot, config=mini).u_bar

    kind_sets = []
    for case in cfg.study.defect_cases:
        ks = tuple(sorted(set(case)))
        if ks not in kind_sets:
            kind_sets.append(ks)

    rows, timings = [], []
    series = {}
    for L in cfg.training.L_values:
        domains = {}
        samples = {}
        for kind in all_kinds:
            say(f"training domain L={L} ({kind})")
            domains[kind] = make_training_domain(L, kind, pot, bravais, minimizer=mini)
            tr = sample_configs(domains[kind], cfg.training.n_train, cfg.training.delta,
                                seed=_train_seed(cfg.training.seed, L, kind), tag="train")
            te = sample_configs(domains[kind], cfg.training.n_test, cfg.training.delta,
                                seed=_train_seed(cfg.training.seed, L, kind) + 499,
                                tag="test")
            samples[kind] = tr + te
        fits = {}
        for ks in kind_sets:
            pooled = [s for kind in ks for s in samples[kind]]
            say(f"fitting L={L} kinds={'+'.join(ks)} "
                f"({len(cfg.basis_ladder)} basis sizes)")
            fits[ks] = fit_family(pooled, list(cfg.basis_ladder), cfg.weights,
                                  rtol=cfg.fit_rtol)
        for case in cfg.study.defect_cases:
            ks = tuple(sorted(set(case)))
            case_label = "+".join(case)
            t_case = time.perf_counter()
            try:
                dset = defect_case_set(case, L, bravais)
                sim_lat = build_lattice(bravais, SupercellSpec(cfg.study.simulation_N), dset)
                z = build_predictor(cores, sim_lat)
                asm_ref = EnergyAssembler(sim_lat, pot)
                ref = equilibrate(sim_lat, pot, u0=z, config=mini, assembler=asm_ref)
            except DefectFitError as exc:
                for res in fits[ks]:
                    rows.append(_failed_row(L, case_label, len(case), res, str(exc)))
                    timings.append(time.perf_counter() - t_case)
                continue
            for res in fits[ks]:
                t_row = time.perf_counter()
                row = {
                    "L": float(L) * bravais.r0,
                    "n_D": len(case),
                    "defect_kinds": case_label,
                    "n_basis": res.model.n_basis,
                    "rmse_E": res.rmse_energy_test,
                    "rmse_F": res.rmse_force_test,
                    "error": "",
                }
                try:
                    say(f"deploy L={L} case={case_label} #B={res.model.n_basis}")
                    reports = [matching_report(domains[k], samples[k], res.model)
                               for k in ks]
                    row["eps_E"] = max(r.eps_E for r in reports)
                    row["eps_F"] = max(r.eps_F for r in reports)
                    row["eps_FC"] = max(r.eps_FC for r in reports)
                    row["eps_FC_hom"] = reports[0].eps_FC_hom
                    asm_sur = EnergyAssembler(sim_lat, res.model)
                    sur = equilibrate(sim_lat, res.model, u0=z, config=mini,
                                      assembler=asm_sur)
                    row["geometry_error"] = geometry_error(ref.u_bar, sur.u_bar)
                    row["energy_error"] = energy_error(sim_lat, asm_ref, asm_sur,
                                                       ref.u_bar, sur.u_bar)
                except DefectFitError as exc:
                    row["error"] = f"{type(exc).__name__}: {exc}"
                    for col in STUDY_COLUMNS:
                        row.setdefault(col, float("nan"))
                rows.append(row)
                timings.append(time.perf_counter() - t_row)
                key = (case_label, "vs_L")
                if res.model.n_basis == max(r.model.n_basis for r in fits[ks]):
                    series.setdefault(key, []).append(row)
                series.setdefault((case_label, f"vs_rmse_L{L}"), []).append(row)

    rates = _rate_summary(series)
    return rows, rates, timings


def _failed_row(L, case_label, n_d, res, message):
    row = {col: float("nan") for col in STUDY_COLUMNS}
    row.update({"L": float(L), "n_D": n_d, "defect_kinds": case_label,
                "n_basis": res.model.n_basis, "error": message})
    return row


def _rate_summary(series):
    out = {}
    for (case_label, name), rows in series.items():
        good = [r for r in rows if not r.get("error")]
        entry = {}
        if name == "vs_L":
            pts_g = [(r["L"], r["geometry_error"]) for r in good]
            pts_e = [(r["L"], r["energy_error"]) for r in good]
        else:
            pts_g = [(r["rmse_F"], r["geometry_error"]) for r in good]
            pts_e = [(r["rmse_F"], r["energy_error"]) for r in good]
        for tag, pts in (("geometry", pts_g), ("energy", pts_e)):
            try:
                rate = fit_rate(pts)
                entry[tag] = {"slope": rate.slope, "intercept": rate.intercept,
                              "r_squared": rate.r_squared, "points": rate.points_used}
            except DefectFitError:
                entry[tag] = None
        out.setdefault(case_label, {})[name] = entry
    return out
