"""Lattice statics: minimize the energy, certify stability, and build the
truncated-core superposition predictor for multi-defect cells.

The minimizer is a nonlinear conjugate-gradient (Polak-Ribiere with restart)
with a strong-Wolfe line search; accepted iterates never increase the
energy.  Convergence is declared on the maximum per-site force norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import line_search

from .errors import DefectFitError
from .lattice import (DefectedLattice, DisplacementField, VACANCY,
                      check_admissible as check_admissible_field,
                      global_stencil_norm)
from .potential import EnergyAssembler, InadmissibleConfiguration, SitePotential

__all__ = [
    "MinimizerConfig",
    "EquilibriumResult",
    "TruncationOperator",
    "NotConverged",
    "LeftAdmissibleSet",
    "EigensolverFailed",
    "EmptyAnnulus",
    "CoreDomainTooSmall",
    "InsufficientShells",
    "equilibrate",
    "check_stability",
    "truncate",
    "build_predictor",
    "check_decay",
]


class NotConverged(DefectFitError):
    pass


class LeftAdmissibleSet(DefectFitError):
    pass


class EigensolverFailed(DefectFitError):
    pass


class EmptyAnnulus(DefectFitError):
    pass


class CoreDomainTooSmall(DefectFitError):
    pass


class InsufficientShells(DefectFitError):
    pass


@dataclass
class MinimizerConfig:
    g_tol: float = 1e-8          # max per-site force norm at convergence
    max_iter: int = 20000
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.4
    max_step: float = 0.5        # line-search upper bound, units of r0
    newton_tol: float = 1e-5     # residual below which Newton polish takes over
    newton_max_iter: int = 30


@dataclass
class EquilibriumResult:
    u_bar: DisplacementField
    energy: float
    residual_force_norm: float
    converged: bool
    n_iterations: int
    min_hessian_eigenvalue: float | None = None
    energy_trace: list = field(default_factory=list, repr=False)

    @property
    def c_bar(self):
        return self.min_hessian_eigenvalue


def _max_site_force(grad_flat: np.ndarray) -> float:
    g = grad_flat.reshape(-1, 2)
    return float(np.sqrt(np.einsum("ij,ij->i", g, g).max()))


def equilibrate(lattice: DefectedLattice, potential: SitePotential,
                u0: DisplacementField | None = None,
                config: MinimizerConfig | None = None,
                assembler: EnergyAssembler | None = None) -> EquilibriumResult:
    """Relax a displacement field to a local energy minimum.

    Starts from ``u0`` (zero if omitted) and returns when the largest
    per-site force norm drops below ``config.g_tol``.  Raises
    :class:`LeftAdmissibleSet` if an iterate violates the non-collision
    constraint and :class:`NotConverged` when the iteration budget runs out.
    """
    cfg = config or MinimizerConfig()
    asm = assembler or EnergyAssembler(lattice, potential)
    if u0 is None:
        u0 = DisplacementField.zeros(lattice)
    if not check_admissible_field(u0, asm.admissibility_m):
        raise LeftAdmissibleSet("starting configuration is inadmissible")

    cache = {}

    def fun_grad(x):
        # inadmissible trial points act as an energy barrier so the line
        # search backs off instead of stepping atoms onto each other
        key = x.tobytes()
        if key not in cache:
            u = DisplacementField(lattice, x.reshape(-1, 2))
            try:
                e, f = asm.energy_and_forces(u)
            except InadmissibleConfiguration:
                cache.clear()
                cache[key] = (np.inf, np.zeros(2 * lattice.n_sites))
            else:
                cache.clear()
                cache[key] = (e, -f.ravel())
        return cache[key]

    def f_only(x):
        return fun_grad(x)[0]

    def g_only(x):
        return fun_grad(x)[1]

    x = u0.values.ravel().copy()
    e, g = fun_grad(x)
    trace = [e]
    d = -g
    n_iter = 0
    e_prev = None
    amax = cfg.max_step * lattice.bravais.r0
    switch = max(cfg.newton_tol, cfg.g_tol)

    import warnings
    from scipy.optimize._linesearch import LineSearchWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LineSearchWarning)
        while _max_site_force(g) > switch and n_iter < cfg.max_iter:
            if float(d @ g) >= 0.0:
                d = -g
            dnorm = float(np.linalg.norm(d))
            ls = line_search(f_only, g_only, x, d, gfk=g, old_fval=e,
                             old_old_fval=e_prev,
                             c1=cfg.wolfe_c1, c2=cfg.wolfe_c2,
                             amax=amax / max(dnorm, 1e-30), maxiter=30)
            alpha = ls[0]
            if alpha is None:
                alpha, e_new = _backtrack(f_only, x, d, e, g, cfg)
                if alpha is None:
                    break
                x_new = x + alpha * d
                g_new = g_only(x_new)
            else:
                x_new = x + alpha * d
                e_new = ls[3] if ls[3] is not None else f_only(x_new)
                g_new = g_only(x_new)
            beta = max(0.0, float(g_new @ (g_new - g)) / max(float(g @ g), 1e-300))
            d = -g_new + beta * d
            x, e_prev, e, g = x_new, e, e_new, g_new
            trace.append(e)
            n_iter += 1

    # Newton polish: with the smooth tail the Wolfe search sits in rounding
    # noise, so the remaining digits come from damped Newton steps on the
    # analytic Hessian (factorized once, refreshed only on stagnation).
    if _max_site_force(g) > cfg.g_tol:
        x, e, g, n_newton = _newton_polish(asm, lattice, fun_grad, x, e, g, cfg, trace)
        n_iter += n_newton

    residual = _max_site_force(g)
    converged = residual <= cfg.g_tol
    if not converged:
        raise NotConverged(
            f"residual force {residual:.3e} above g_tol {cfg.g_tol:.1e} "
            f"after {n_iter} iterations")
    u_final = DisplacementField(lattice, x.reshape(-1, 2))
    if not check_admissible_field(u_final, asm.admissibility_m):
        raise LeftAdmissibleSet("minimizer converged to an inadmissible configuration")
    return EquilibriumResult(
        u_bar=u_final,
        energy=e,
        residual_force_norm=residual,
        converged=converged,
        n_iterations=n_iter,
        energy_trace=trace,
    )


def _newton_polish(asm, lattice, fun_grad, x, e, g, cfg, trace):
    """Damped Newton iterations with translations shifted out of the kernel."""
    solve = None
    n_iter = 0
    res = _max_site_force(g)
    while res > cfg.g_tol and n_iter < cfg.newton_max_iter:
        if solve is None:
            h = asm.hessian(DisplacementField(lattice, x.reshape(-1, 2)), check=False)
            v = _translation_basis(h.shape[0] // 2)
            scale = float(np.abs(h.diagonal()).max()) + 1.0
            hs = (h + sp.csr_matrix((10.0 * scale) * (v @ v.T))).tocsc()
            solve = spla.splu(hs).solve
        step = -solve(g)
        alpha = 1.0
        accepted = False
        for _ in range(12):
            e_new, g_new = fun_grad(x + alpha * step)
            if np.isfinite(e_new) and (
                    _max_site_force(g_new) < res or e_new < e - 1e-14 * (1.0 + abs(e))):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        new_res = _max_site_force(g_new)
        if new_res > 0.5 * res and alpha == 1.0:
            solve = None  # curvature moved; refresh the factorization
        x, e, g, res = x + alpha * step, e_new, g_new, new_res
        trace.append(e)
        n_iter += 1
    return x, e, g, n_iter


def _backtrack(f_only, x, d, e, g, cfg):
    """Armijo backtracking fallback when the Wolfe search fails."""
    slope = float(g @ d)
    alpha = 1.0
    for _ in range(60):
        e_new = f_only(x + alpha * d)
        if e_new <= e + cfg.wolfe_c1 * alpha * slope:
            return alpha, e_new
        alpha *= 0.5
    return None, None


# ---------------------------------------------------------------------------
# stability


def _translation_basis(n_sites: int) -> np.ndarray:
    v = np.zeros((2 * n_sites, 2))
    v[0::2, 0] = 1.0
    v[1::2, 1] = 1.0
    return v / np.sqrt(n_sites)


def check_stability(result: EquilibriumResult, potential: SitePotential,
                    assembler: EnergyAssembler | None = None,
                    dense_threshold: int = 6000, seed: int = 0) -> float:
    """Smallest Hessian eigenvalue orthogonal to rigid translations.

    Positive iff the equilibrium is strongly stable.  Small systems use a
    dense solve; larger ones shift-invert power iteration with the
    translations projected out.  The value is stored on the result.
    """
    lattice = result.u_bar.lattice
    asm = assembler or EnergyAssembler(lattice, potential)
    h = asm.hessian(result.u_bar, check=False)
    n_dof = h.shape[0]
    v = _translation_basis(n_dof // 2)
    if n_dof <= dense_threshold:
        scale = float(np.abs(h.diagonal()).max()) + 1.0
        hd = h.toarray() + (10.0 * scale) * (v @ v.T)
        lam = float(np.linalg.eigvalsh(hd)[0])
    else:
        lam = _shift_invert_smallest(h, v, seed=seed)
    result.min_hessian_eigenvalue = lam
    return lam


def _shift_invert_smallest(h: sp.spmatrix, v: np.ndarray, seed: int = 0,
                           maxiter: int = 500, tol: float = 1e-10) -> float:
    scale = float(np.abs(h.diagonal()).max()) + 1.0
    sigma = -0.05 * scale
    try:
        lu = spla.splu((h - sigma * sp.identity(h.shape[0], format="csr")).tocsc())
    except RuntimeError as exc:
        raise EigensolverFailed(f"factorization failed: {exc}") from exc
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(h.shape[0])
    x -= v @ (v.T @ x)
    x /= np.linalg.norm(x)
    lam_old = np.inf
    for _ in range(maxiter):
        y = lu.solve(x)
        y -= v @ (v.T @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            raise EigensolverFailed("power iteration collapsed onto the projected-out space")
        x = y / ny
        lam = float(x @ (h @ x))
        if abs(lam - lam_old) <= tol * max(abs(lam), 1.0):
            return lam
        lam_old = lam
    raise EigensolverFailed("shift-invert power iteration did not converge")


# ---------------------------------------------------------------------------
# truncation operator and predictor


def _eta(t: np.ndarray) -> np.ndarray:
    """Radial cutoff profile: 1 on [0, 4/6], 0 on [5/6, inf), quintic between."""
    s = np.clip((t - 4.0 / 6.0) * 6.0, 0.0, 1.0)
    val = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    return np.where(t >= 5.0 / 6.0, 0.0, np.where(t <= 4.0 / 6.0, 1.0, val))


@dataclass
class TruncationOperator:
    """Smooth cutoff of a displacement field to a ball around ``center``.

    Subtracts the average of the field over the annulus between radii
    4R/6 and 5R/6 (site average; the interpolant average of the continuum
    definition is equivalent up to quadrature error on a uniform lattice),
    then multiplies by the profile eta(|x - center| / R).
    """

    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)


def truncate(op: TruncationOperator, u: DisplacementField) -> DisplacementField:
    lat = u.lattice
    r0 = lat.bravais.r0
    if op.radius < 3.0 * r0:
        raise ValueError("truncation radius must be at least 3*r0")
    d = np.linalg.norm(lat.min_image(lat.positions - op.center), axis=1)
    ann = (d >= 4.0 * op.radius / 6.0 - 1e-12) & (d <= 5.0 * op.radius / 6.0 + 1e-12)
    if not np.any(ann):
        raise EmptyAnnulus("no lattice sites in the averaging annulus")
    a_r = u.values[ann].mean(axis=0)
    eta = _eta(d / op.radius)
    vals = eta[:, None] * (u.values - a_r)
    vals[eta == 0.0] = 0.0
    return DisplacementField(lat, vals)


def annulus_average(op: TruncationOperator, u: DisplacementField) -> np.ndarray:
    lat = u.lattice
    d = np.linalg.norm(lat.min_image(lat.positions - op.center), axis=1)
    ann = (d >= 4.0 * op.radius / 6.0 - 1e-12) & (d <= 5.0 * op.radius / 6.0 + 1e-12)
    if not np.any(ann):
        raise EmptyAnnulus("no lattice sites in the averaging annulus")
    return u.values[ann].mean(axis=0)


def _core_defect_position(core_lattice: DefectedLattice) -> np.ndarray:
    if core_lattice.n_defects != 1:
        raise ValueError("core solution must come from a single-defect lattice")
    return core_lattice.defect_positions[0]


def build_predictor(core_solution, target: DefectedLattice,
                    radius: float | None = None) -> DisplacementField:
    """Superpose truncated, recentered single-defect cores on a multi-defect cell.

    ``core_solution`` is a displacement field from a large single-defect
    computation, or a dict mapping defect kind to such a field when the
    target mixes kinds.  The default radius is a third of the target's
    minimum defect separation, floored at the smallest radius the
    truncation operator accepts (3*r0); below that floor the truncation
    balls of close defect pairs may overlap, which only degrades the
    predictor, never the corrected equilibrium.
    """
    from .lattice import min_separation

    if target.n_defects < 1:
        raise ValueError("target lattice has no defects")
    cores = core_solution if isinstance(core_solution, dict) else None
    if radius is None:
        radius = max(min_separation(target) / 3.0, 3.0 * target.bravais.r0)

    z = np.zeros((target.n_sites, 2))
    for kind, pos in zip(target.defects.kinds, target.defects.positions):
        core = cores[kind] if cores is not None else core_solution
        core_lat = core.lattice
        core_center = _core_defect_position(core_lat)
        half_period = 0.5 * min(
            float(np.linalg.norm(core_lat.period @ np.array(a)))
            for a in [(1, 0), (0, 1), (1, 1), (1, -1)]
        )
        if radius > half_period:
            raise CoreDomainTooSmall(
                f"core domain half-period {half_period:.3g} does not cover radius {radius:.3g}")
        op = TruncationOperator(core_center, radius)
        trunc = truncate(op, core)
        rel = target.min_image(target.positions - pos)
        d = np.linalg.norm(rel, axis=1)
        sel = np.where(d <= 5.0 * radius / 6.0 + 1e-9)[0]
        for idx in sel:
            core_idx = core_lat.site_index_at(core_center + rel[idx])
            if core_idx is None:
                raise CoreDomainTooSmall(
                    f"no core site at relative position {rel[idx]} (kind {kind})")
            z[idx] += trunc.values[core_idx]
    return DisplacementField(target, z)


# ---------------------------------------------------------------------------
# far-field decay of the core solution


def shell_max_stencil_norms(u: DisplacementField, center: np.ndarray):
    """Max per-site stencil norm over integer-radius shells around ``center``."""
    lat = u.lattice
    d = np.linalg.norm(lat.min_image(lat.positions - center), axis=1)
    shell = np.round(d / lat.bravais.r0).astype(int)
    diff = u.values[lat.nn_j] - u.values[lat.nn_i]
    site_sq = np.bincount(lat.nn_i, weights=np.einsum("ij,ij->i", diff, diff),
                          minlength=lat.n_sites)
    site_norm = np.sqrt(site_sq)
    n_shell = shell.max() + 1
    out = np.zeros(n_shell)
    np.maximum.at(out, shell, site_norm)
    return np.arange(n_shell), out


def check_decay(core_solution: DisplacementField,
                window: tuple | None = None,
                min_points: int = 3):
    """Log-log slope of the shell-max stencil norm against distance.

    The fit window defaults to [5*r0, 0.4 * domain radius]; raises
    :class:`InsufficientShells` when fewer than ``min_points`` shells with a
    positive norm fall inside it.
    """
    from .analysis import fit_rate

    lat = core_solution.lattice
    r0 = lat.bravais.r0
    center = lat.defect_positions[0] if lat.n_defects else np.zeros(2)
    radii, norms = shell_max_stencil_norms(core_solution, center)
    if window is None:
        domain_radius = 0.5 * min(
            float(np.linalg.norm(lat.period @ np.array(a)))
            for a in [(1, 0), (0, 1), (1, 1), (1, -1)]
        )
        window = (5.0 * r0, 0.4 * domain_radius)
    sel = (radii * r0 >= window[0] - 1e-12) & (radii * r0 <= window[1] + 1e-12) & (norms > 0)
    if sel.sum() < min_points:
        raise InsufficientShells(
            f"only {int(sel.sum())} usable shells in window {window}")
    rate = fit_rate(list(zip(radii[sel] * r0, norms[sel])))
    return rate.slope
