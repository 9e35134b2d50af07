"""Site potentials and energy assembly on defected lattices.

A site potential maps a neighbor environment (offset vectors within a
cutoff) to a site energy; the assembler sums site energies over the
representative sites of a periodic lattice and differentiates through the
displacement field.  All energies reported by the assembler are differences
relative to the undisplaced reference configuration, so the energy of
``u == 0`` is exactly zero on any lattice.

The reference model is an EAM-style toy potential: a Morse pair term plus
an embedding function of an exponentially decaying pair density, both
multiplied by a C2 taper so that interactions vanish smoothly at the
cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .errors import DefectFitError
from .lattice import DefectedLattice, DisplacementField, check_admissible

__all__ = [
    "SitePotential",
    "EamToyPotential",
    "EnergyAssembler",
    "InadmissibleConfiguration",
    "NoMinimumInBracket",
    "calibrate_r0",
    "triangular_shell_offsets",
    "fd_force_error",
    "fd_hessian_error",
]


class InadmissibleConfiguration(DefectFitError):
    pass


class NoMinimumInBracket(DefectFitError):
    pass


class SitePotential:
    """Interface: site energy, gradient and Hessian w.r.t. neighbor offsets.

    Environments come as padded arrays ``env`` of shape (batch, k, 2) with a
    boolean ``mask``; masked slots must not influence any output.  Entries
    beyond ``r_cut`` contribute nothing (the potentials taper to zero), so a
    neighbor list built with a skin margin is safe to evaluate.
    """

    r_cut: float

    def energy_batch(self, env: np.ndarray, mask: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient_batch(self, env: np.ndarray, mask: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian_batch(self, env: np.ndarray, mask: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # single-environment conveniences, mostly for tests
    def site_energy(self, env: np.ndarray) -> float:
        env = np.asarray(env, dtype=float)
        mask = np.ones(len(env), dtype=bool)
        return float(self.energy_batch(env[None], mask[None])[0])

    def site_gradient(self, env: np.ndarray) -> np.ndarray:
        env = np.asarray(env, dtype=float)
        mask = np.ones(len(env), dtype=bool)
        return self.gradient_batch(env[None], mask[None])[0]

    def site_hessian(self, env: np.ndarray) -> np.ndarray:
        env = np.asarray(env, dtype=float)
        mask = np.ones(len(env), dtype=bool)
        return self.hessian_batch(env[None], mask[None])[0]


def _taper(r, r_cut, width):
    """C2 cutoff profile: 1 below r_cut-width, 0 above r_cut; returns value and
    first two derivatives."""
    s = np.clip((r - (r_cut - width)) / width, 0.0, 1.0)
    t = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    dt = -30.0 * s**2 * (1.0 - s) ** 2 / width
    ddt = -60.0 * s * (1.0 - 3.0 * s + 2.0 * s**2) / width**2
    inside = r <= r_cut - width
    outside = r >= r_cut
    for a in (dt, ddt):
        a[inside | outside] = 0.0
    t[inside] = 1.0
    t[outside] = 0.0
    return t, dt, ddt


@dataclass
class EamToyPotential(SitePotential):
    """Morse pair term plus sqrt/quadratic embedding of an exponential density.

    V(env) = 1/2 sum_j phi(r_j) + F(sum_j psi(r_j)) with
    phi = Morse(depth, stiffness, pair_length) * taper,
    psi = exp(-density_decay * r) * taper,
    F(t) = embed_sqrt * sqrt(t) + embed_quad * t^2.
    """

    pair_depth: float = 1.0
    pair_stiffness: float = 4.0
    pair_length: float = 1.0
    density_decay: float = 3.0
    embed_sqrt: float = -1.5
    embed_quad: float = 1.0
    r_cut: float = None
    taper_width: float = None

    def __post_init__(self):
        # default cutoff keeps two neighbor shells yet stays below half the
        # smallest admitted training cell (4*r0), so every training domain
        # contains isolated-defect environments
        if self.r_cut is None:
            self.r_cut = 1.9 * self.pair_length
        if self.taper_width is None:
            self.taper_width = 0.4 * self.pair_length
        if not 0 < self.taper_width < self.r_cut:
            raise ValueError("taper width must lie in (0, r_cut)")

    # -- scalar profiles -----------------------------------------------------

    def _pair_terms(self, r):
        """phi, psi and their first two derivatives at distances r (tapered)."""
        de, a, re = self.pair_depth, self.pair_stiffness, self.pair_length
        e1 = np.exp(-a * (r - re))
        e2 = e1 * e1
        m = de * (e2 - 2.0 * e1)
        dm = de * (-2.0 * a * e2 + 2.0 * a * e1)
        ddm = de * (4.0 * a * a * e2 - 2.0 * a * a * e1)
        p = np.exp(-self.density_decay * r)
        dp = -self.density_decay * p
        ddp = self.density_decay**2 * p
        t, dt, ddt = _taper(r, self.r_cut, self.taper_width)
        phi = m * t
        dphi = dm * t + m * dt
        ddphi = ddm * t + 2.0 * dm * dt + m * ddt
        psi = p * t
        dpsi = dp * t + p * dt
        ddpsi = ddp * t + 2.0 * dp * dt + p * ddt
        return phi, dphi, ddphi, psi, dpsi, ddpsi

    def _embed(self, rho):
        c1, c2 = self.embed_sqrt, self.embed_quad
        rho = np.asarray(rho, dtype=float)
        safe = np.maximum(rho, 1e-300)
        s = np.sqrt(safe)
        f = np.where(rho > 0, c1 * s + c2 * rho * rho, 0.0)
        df = np.where(rho > 0, 0.5 * c1 / s + 2.0 * c2 * rho, 0.0)
        ddf = np.where(rho > 0, -0.25 * c1 / (safe * s) + 2.0 * c2, 0.0)
        return f, df, ddf

    def _radii(self, env, mask):
        r = np.linalg.norm(env, axis=-1)
        live = mask & (r <= self.r_cut)
        r_safe = np.where(live, r, 1.0)
        return r, r_safe, live

    # -- batch API -----------------------------------------------------------

    def energy_batch(self, env, mask):
        r, r_safe, live = self._radii(env, mask)
        phi, _, _, psi, _, _ = self._pair_terms(r_safe)
        phi = np.where(live, phi, 0.0)
        psi = np.where(live, psi, 0.0)
        f, _, _ = self._embed(psi.sum(axis=-1))
        return 0.5 * phi.sum(axis=-1) + f

    def gradient_batch(self, env, mask):
        r, r_safe, live = self._radii(env, mask)
        _, dphi, _, psi, dpsi, _ = self._pair_terms(r_safe)
        psi = np.where(live, psi, 0.0)
        _, df, _ = self._embed(psi.sum(axis=-1))
        coef = np.where(live, 0.5 * dphi + df[:, None] * dpsi, 0.0) / r_safe
        return coef[..., None] * env

    def hessian_batch(self, env, mask):
        b, k = mask.shape
        r, r_safe, live = self._radii(env, mask)
        _, dphi, ddphi, psi, dpsi, ddpsi = self._pair_terms(r_safe)
        psi = np.where(live, psi, 0.0)
        _, df, ddf = self._embed(psi.sum(axis=-1))
        rhat = env / r_safe[..., None]
        rhat = np.where(live[..., None], rhat, 0.0)
        arad = np.where(live, 0.5 * ddphi + df[:, None] * ddpsi, 0.0)
        atan = np.where(live, (0.5 * dphi + df[:, None] * dpsi) / r_safe, 0.0)
        eye = np.eye(2)
        out = np.zeros((b, k, 2, k, 2))
        diag = (arad - atan)[..., None, None] * np.einsum("bkx,bky->bkxy", rhat, rhat) \
            + atan[..., None, None] * eye
        idx = np.arange(k)
        out[:, idx, :, idx, :] = diag.transpose(1, 0, 2, 3)
        dvec = np.where(live, dpsi, 0.0)[..., None] * rhat
        out += ddf[:, None, None, None, None] * np.einsum("bkx,bly->bkxly", dvec, dvec)
        return out


class EnergyAssembler:
    """Total energy, forces and force constants of a potential on a lattice.

    Energies are differences relative to the undisplaced reference: the
    per-site reference energies are cached at construction and subtracted,
    which realizes the convention that every site potential vanishes on the
    zero displacement.
    """

    def __init__(self, lattice: DefectedLattice, potential: SitePotential,
                 admissibility_m: float = 0.5, skin: float = 0.3):
        self.lattice = lattice
        self.potential = potential
        self.admissibility_m = admissibility_m
        self.r_list = potential.r_cut + skin * lattice.bravais.r0
        self.table = lattice.env_table(self.r_list)
        env0, mask = self.table.environments(np.zeros((lattice.n_sites, 2)))
        self._ref_site_energies = potential.energy_batch(env0, mask)

    def _require_admissible(self, u: DisplacementField):
        if not check_admissible(u, self.admissibility_m):
            raise InadmissibleConfiguration(
                f"configuration violates the m={self.admissibility_m} separation bound")

    def total_energy(self, u: DisplacementField, check: bool = True) -> float:
        if check:
            self._require_admissible(u)
        env, mask = self.table.environments(u.values)
        site_e = self.potential.energy_batch(env, mask)
        return float(np.sum(site_e - self._ref_site_energies))

    def site_energies(self, u: DisplacementField) -> np.ndarray:
        env, mask = self.table.environments(u.values)
        return self.potential.energy_batch(env, mask) - self._ref_site_energies

    def forces(self, u: DisplacementField, check: bool = True) -> np.ndarray:
        if check:
            self._require_admissible(u)
        env, mask = self.table.environments(u.values)
        g = self.potential.gradient_batch(env, mask)
        return self._scatter_gradient(g)

    def _scatter_gradient(self, g):
        grad = np.zeros((self.lattice.n_sites, 2))
        np.add.at(grad, self.table.pad_j.ravel(),
                  g.reshape(-1, 2))
        grad -= g.sum(axis=1)
        return -grad

    def energy_and_forces(self, u: DisplacementField, check: bool = True):
        if check:
            self._require_admissible(u)
        env, mask = self.table.environments(u.values)
        site_e = self.potential.energy_batch(env, mask)
        g = self.potential.gradient_batch(env, mask)
        return float(np.sum(site_e - self._ref_site_energies)), self._scatter_gradient(g)

    def hessian(self, u: DisplacementField, check: bool = True, chunk: int = 256) -> sp.csr_matrix:
        """Second derivative of the total energy, as a sparse (2n, 2n) matrix."""
        if check:
            self._require_admissible(u)
        n = self.lattice.n_sites
        t = self.table
        env_all, mask_all = t.environments(u.values)
        rows, cols, vals = [], [], []
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            env, mask = env_all[lo:hi], mask_all[lo:hi]
            blocks = self.potential.hessian_batch(env, mask)  # (c, k, 2, k, 2)
            c, k = mask.shape
            nbr = t.pad_j[lo:hi]
            self_idx = np.arange(lo, hi)
            row_sum = blocks.sum(axis=3)          # (c, k, 2, 2): sum over l
            col_sum = blocks.sum(axis=1)          # (c, 2, l... actually (c,2,k,2)
            tot = row_sum.sum(axis=1)             # (c, 2, 2)
            # neighbor-neighbor blocks
            ra = np.repeat(nbr[:, :, None], k, axis=2)       # (c,k,k) row site
            ca = np.repeat(nbr[:, None, :], k, axis=1)       # (c,k,k) col site
            _emit(rows, cols, vals, ra, ca, blocks.transpose(0, 1, 3, 2, 4))
            # self-neighbor and neighbor-self blocks
            _emit(rows, cols, vals, np.broadcast_to(self_idx[:, None], (c, k)), nbr,
                  -col_sum.transpose(0, 2, 1, 3))
            _emit(rows, cols, vals, nbr, np.broadcast_to(self_idx[:, None], (c, k)),
                  -row_sum)
            # self-self block
            _emit(rows, cols, vals, self_idx, self_idx, tot)
        h = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * n, 2 * n),
        ).tocsr()
        h.eliminate_zeros()
        return h


def _emit(rows, cols, vals, r_site, c_site, blocks):
    """Append 2x2 blocks at (row site, col site) to COO triplets.

    ``blocks[..., x, y]`` adds to entry (2*r_site + x, 2*c_site + y).
    """
    r_site = np.asarray(r_site)
    blocks = np.ascontiguousarray(blocks)
    base_r = (2 * r_site)[..., None, None]
    base_c = (2 * c_site)[..., None, None]
    x = np.array([[0, 0], [1, 1]])
    y = np.array([[0, 1], [0, 1]])
    rr = np.broadcast_to(base_r + x, blocks.shape).ravel()
    cc = np.broadcast_to(base_c + y, blocks.shape).ravel()
    rows.append(rr)
    cols.append(cc)
    vals.append(blocks.ravel())


# ---------------------------------------------------------------------------
# homogeneous-lattice helpers


def triangular_shell_offsets(bravais, radius):
    """Offsets of the homogeneous lattice within a radius of the origin."""
    a = bravais.matrix
    nmax = int(np.ceil(radius / bravais.r0)) + 2
    ii, jj = np.meshgrid(np.arange(-nmax, nmax + 1), np.arange(-nmax, nmax + 1), indexing="ij")
    ij = np.stack([ii.ravel(), jj.ravel()], axis=1)
    off = ij.astype(float) @ a.T
    d = np.linalg.norm(off, axis=1)
    keep = (d > 1e-12) & (d <= radius)
    off = off[keep]
    order = np.lexsort((np.round(off[:, 1], 9), np.round(off[:, 0], 9)))
    return off[order]


def homogeneous_energy_per_atom(potential: SitePotential, bravais, spacing: float) -> float:
    """Energy per atom of the homogeneous lattice at the given spacing."""
    scale = spacing / bravais.r0
    off = triangular_shell_offsets(bravais, potential.r_cut / min(scale, 1.0) + bravais.r0)
    return potential.site_energy(off * scale)


def calibrate_r0(potential: SitePotential, bravais=None,
                 bracket=(0.6, 1.6), tol: float = 1e-12) -> float:
    """Lattice spacing that minimizes the homogeneous energy per atom.

    Scans the bracket (given in units of the potential's pair length) for a
    sign change of the derivative of the energy per atom with respect to
    uniform scaling, then polishes the root.  Raises
    :class:`NoMinimumInBracket` when no interior minimum exists.
    """
    from .lattice import BravaisSpec

    if bravais is None:
        bravais = BravaisSpec.triangular(1.0)
    ref = getattr(potential, "pair_length", 1.0)
    unit = triangular_shell_offsets(
        BravaisSpec(bravais.cell_matrix, 1.0), potential.r_cut / (bracket[0] * ref) + 1.0)

    def deriv(s):
        env = unit * s
        g = potential.site_gradient(env)
        return float(np.einsum("ij,ij->", g, unit))

    lo, hi = bracket[0] * ref, bracket[1] * ref
    grid = np.linspace(lo, hi, 81)
    dv = np.array([deriv(s) for s in grid])
    sign_change = np.where((dv[:-1] < 0) & (dv[1:] > 0))[0]
    if len(sign_change) == 0:
        raise NoMinimumInBracket(f"no energy minimum for spacings in [{lo:.3g}, {hi:.3g}]")
    k = sign_change[0]
    r0 = brentq(deriv, grid[k], grid[k + 1], xtol=tol)
    if abs(deriv(r0)) > 1e-10:
        raise NoMinimumInBracket("derivative did not vanish at the bracketed minimum")
    return float(r0)


# ---------------------------------------------------------------------------
# finite-difference checks


def fd_force_error(assembler: EnergyAssembler, u: DisplacementField,
                   step: float | None = None) -> float:
    """Max relative error of analytic forces against central differences."""
    lat = assembler.lattice
    h = (1e-5 * lat.bravais.r0) if step is None else step
    f = assembler.forces(u, check=False)
    fd = np.zeros_like(f)
    vals = u.values.copy()
    for i in range(lat.n_sites):
        for x in range(2):
            for s, sgn in ((h, 1.0), (-h, -1.0)):
                vals[i, x] += s
                e = assembler.total_energy(DisplacementField(lat, vals), check=False)
                fd[i, x] -= sgn * e
                vals[i, x] -= s
    fd /= 2.0 * h
    scale = max(np.abs(f).max(), np.abs(fd).max(), 1e-14)
    return float(np.abs(f - fd).max() / scale)


def fd_hessian_error(assembler: EnergyAssembler, u: DisplacementField,
                     step: float | None = None) -> float:
    """Max relative error of the analytic Hessian against differenced forces."""
    lat = assembler.lattice
    h = (1e-5 * lat.bravais.r0) if step is None else step
    hess = assembler.hessian(u, check=False).toarray()
    n2 = 2 * lat.n_sites
    fd = np.zeros((n2, n2))
    vals = u.values.copy()
    for i in range(lat.n_sites):
        for x in range(2):
            col = 2 * i + x
            vals[i, x] += h
            fp = assembler.forces(DisplacementField(lat, vals), check=False)
            vals[i, x] -= 2 * h
            fm = assembler.forces(DisplacementField(lat, vals), check=False)
            vals[i, x] += h
            fd[:, col] = -(fp - fm).ravel() / (2.0 * h)
    scale = max(np.abs(hess).max(), np.abs(fd).max(), 1e-14)
    return float(np.abs(hess - fd).max() / scale)
