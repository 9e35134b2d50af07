"""Periodic 2D Bravais supercells with point defects.

Builds the homogeneous lattice, removes/inserts defect sites, and provides
the geometric machinery everything else rests on: image-resolved neighbor
pairs within a cutoff, nearest-neighbor sets for the discrete energy norm,
stencil norms of displacement fields, and the non-collision admissibility
check.

Conventions
-----------
* Cell matrices act on column vectors; columns are the primitive vectors.
* The periodic cell is ``Omega_N = B * (-N/2, N/2]^2`` and displacement
  fields store one value per representative site; differences across the
  boundary are resolved through image shift vectors, never by duplicating
  sites.
* Nearest-neighbor sets are image-resolved: on small cells a pair of sites
  can be nearest neighbors through two distinct periodic images and then
  contributes twice to the stencil norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .errors import DefectFitError

__all__ = [
    "VACANCY",
    "INTERSTITIAL",
    "BravaisSpec",
    "SupercellSpec",
    "DefectSet",
    "DefectedLattice",
    "DisplacementField",
    "SingularCell",
    "DefectOutsideCell",
    "OverlappingDefects",
    "build_lattice",
    "min_separation",
    "stencil_norm",
    "global_stencil_norm",
    "check_admissible",
    "to_xyz",
]

VACANCY = "vacancy"
INTERSTITIAL = "interstitial"

#: sites closer than this to a defect core get their neighbor sets recomputed
#: from the equidistance criterion instead of the fixed-shell rule
_NN_REGION_FACTOR = 3.5

#: candidate pairs for the equidistance criterion (2*r0 plus slack)
_NN_CANDIDATE_FACTOR = 2.005


class SingularCell(DefectFitError):
    pass


class DefectOutsideCell(DefectFitError):
    pass


class OverlappingDefects(DefectFitError):
    pass


@dataclass
class BravaisSpec:
    """Homogeneous Bravais lattice ``A * Z^d`` with ``A = r0 * cell_matrix``.

    ``cell_matrix`` holds the primitive vectors at unit spacing in its
    columns; ``r0`` is the physical lattice spacing.
    """

    cell_matrix: np.ndarray
    r0: float
    dimension: int = 2

    def __post_init__(self):
        self.cell_matrix = np.asarray(self.cell_matrix, dtype=float)
        if self.dimension != 2:
            raise ValueError("only d=2 lattices are supported")
        if self.cell_matrix.shape != (2, 2):
            raise ValueError("cell_matrix must be 2x2")
        if abs(np.linalg.det(self.cell_matrix)) < 1e-12:
            raise SingularCell("cell_matrix is singular")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")

    @classmethod
    def triangular(cls, r0: float) -> "BravaisSpec":
        """Triangular lattice: primitive vectors (1,0) and (1/2, sqrt(3)/2)."""
        m = np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2.0]])
        return cls(cell_matrix=m, r0=r0)

    @property
    def matrix(self) -> np.ndarray:
        """Scaled cell matrix ``A`` (columns are the primitive vectors)."""
        return self.r0 * self.cell_matrix

    def site(self, ij) -> np.ndarray:
        """Cartesian position of the lattice point with integer coords ij."""
        return self.matrix @ np.asarray(ij, dtype=float)

    def triangle_center(self, ij=(0, 0)) -> np.ndarray:
        """Centroid of the elementary triangle with corners ij, ij+e1, ij+e2.

        Used as the default interstitial insertion point: it is the
        highest-symmetry position of the triangular lattice that is not a
        lattice site (distance ``r0/sqrt(3)`` from three sites).
        """
        a = self.matrix
        return a @ np.asarray(ij, dtype=float) + (a[:, 0] + a[:, 1]) / 3.0


@dataclass
class SupercellSpec:
    """Periodic supercell: ``repeat`` copies of the cell spanned by ``B``.

    ``B = A @ coeffs`` with an integer coefficient matrix, identity by
    default.  The periodicity vectors are the columns of ``repeat * B``.
    """

    repeat: int
    coeffs: np.ndarray | None = None

    def __post_init__(self):
        if self.repeat < 1:
            raise ValueError("repeat must be a positive integer")
        if self.coeffs is not None:
            self.coeffs = np.asarray(self.coeffs)
            if self.coeffs.shape != (2, 2):
                raise ValueError("coeffs must be 2x2")
            if not np.issubdtype(self.coeffs.dtype, np.integer):
                raise ValueError("coeffs must be integers (columns of B lie on the lattice)")
            if abs(round(np.linalg.det(self.coeffs))) == 0:
                raise SingularCell("supercell coefficient matrix is singular")

    def cell_vectors(self, bravais: BravaisSpec) -> np.ndarray:
        c = np.eye(2) if self.coeffs is None else self.coeffs.astype(float)
        return bravais.matrix @ c


@dataclass
class DefectSet:
    """Point defects: per-defect kind ("vacancy" / "interstitial") and position."""

    kinds: list
    positions: np.ndarray
    core_radius: float = 1.5

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if len(self.kinds) != len(self.positions):
            raise ValueError("kinds and positions length mismatch")
        if self.n_defects < 1:
            raise ValueError("need at least one defect")
        for k in self.kinds:
            if k not in (VACANCY, INTERSTITIAL):
                raise ValueError(f"unknown defect kind: {k}")
        if not self.core_radius > 0:
            raise ValueError("core_radius must be positive")

    @property
    def n_defects(self) -> int:
        return len(self.kinds)

    @classmethod
    def vacancies(cls, bravais: BravaisSpec, cells, core_radius: float | None = None):
        """Vacancies at the lattice points with the given integer coords."""
        pos = np.array([bravais.site(ij) for ij in cells], dtype=float)
        cr = 1.5 * bravais.r0 if core_radius is None else core_radius
        return cls(kinds=[VACANCY] * len(cells), positions=pos, core_radius=cr)

    @classmethod
    def single_interstitial(cls, bravais: BravaisSpec, cell=(0, 0), core_radius=None):
        cr = 1.5 * bravais.r0 if core_radius is None else core_radius
        return cls(
            kinds=[INTERSTITIAL],
            positions=bravais.triangle_center(cell)[None, :],
            core_radius=cr,
        )


class _EnvTable:
    """Per-site neighbor environments within a cutoff, padded for batching.

    ``vec[p]`` is the reference offset (including the image shift) from site
    ``i[p]`` to its neighbor ``j[p]``; padded views expose the same data as
    (n_sites, k_max) arrays with a boolean mask.
    """

    def __init__(self, n_sites, pi, pj, pvec):
        order = np.lexsort((np.round(pvec[:, 1] * 1e8), np.round(pvec[:, 0] * 1e8), pj, pi))
        self.i = pi[order]
        self.j = pj[order]
        self.vec = pvec[order]
        counts = np.bincount(self.i, minlength=n_sites)
        self.indptr = np.concatenate([[0], np.cumsum(counts)])
        self.n_sites = n_sites
        self.k_max = int(counts.max()) if len(counts) else 0
        slot = np.arange(len(self.i)) - self.indptr[self.i]
        self.pad_j = np.zeros((n_sites, self.k_max), dtype=np.int64)
        self.pad_vec = np.zeros((n_sites, self.k_max, 2))
        self.mask = np.zeros((n_sites, self.k_max), dtype=bool)
        self.pad_j[self.i, slot] = self.j
        self.pad_vec[self.i, slot] = self.vec
        self.mask[self.i, slot] = True

    def environments(self, u_values: np.ndarray):
        """Deformed neighbor offsets for each site given displacements."""
        env = self.pad_vec + u_values[self.pad_j] - u_values[:, None, :]
        return np.where(self.mask[:, :, None], env, 0.0), self.mask


class DefectedLattice:
    """Immutable periodic site set with neighbor structure.

    Built by :func:`build_lattice`; not meant to be constructed directly.
    """

    def __init__(self, bravais, cell, defects, positions, site_keys, added_mask):
        self.bravais = bravais
        self.cell = cell
        self.defects = defects
        self.positions = positions
        self.n_sites = len(positions)
        self.period = cell.cell_vectors(bravais) * cell.repeat
        self.period_inv = np.linalg.inv(self.period)
        self.added_mask = added_mask
        # integer keys on a 1/3-subgrid: exact for lattice sites and for
        # triangle-center interstitials alike
        self._key_to_index = {tuple(k): idx for idx, k in enumerate(site_keys)}
        self._site_keys = site_keys
        self._pair_cache = {}
        self._env_cache = {}
        self._image_points = None
        self._image_ids = None
        self._image_tree = None
        self._image_shells = 0
        self.nn_indptr = None
        self.nn_j = None
        self.nn_vec = None

    # -- periodic geometry -------------------------------------------------

    def min_image(self, vecs: np.ndarray) -> np.ndarray:
        """Wrap difference vectors到 the centered periodic cell."""
        v = np.atleast_2d(vecs)
        f = v @ self.period_inv.T
        f -= np.round(f)
        out = f @ self.period.T
        return out if vecs.ndim > 1 else out[0]

    def _images(self, n_shells: int = 1):
        if self._image_points is None or self._image_shells < n_shells:
            rng = range(-n_shells, n_shells + 1)
            shifts = [self.period @ np.array([ax, ay]) for ax in rng for ay in rng]
            pts = np.concatenate([self.positions + s for s in shifts])
            ids = np.tile(np.arange(self.n_sites), len(shifts))
            self._image_points = pts
            self._image_ids = ids
            self._image_tree = cKDTree(pts)
            self._image_shells = n_shells
        return self._image_points, self._image_ids, self._image_tree

    def pairs_within(self, r: float):
        """Directed image-resolved pairs (i, j, offset vector) with |offset| <= r.

        On small cells a cutoff may exceed half the period; a site then sees
        several images of the same neighbor and each image is its own pair.
        """
        key = round(float(r), 9)
        if key in self._pair_cache:
            return self._pair_cache[key]
        # enough image shells that every offset within r is represented
        n_shells = int(np.floor(r * np.linalg.norm(self.period_inv, 2) + 1.0 - 1e-9))
        pts, ids, tree = self._images(max(1, n_shells))
        hits = tree.query_ball_point(self.positions, r + 1e-12)
        pi, pj, pvec = [], [], []
        for i, hit in enumerate(hits):
            hit = np.asarray(hit, dtype=np.int64)
            vec = pts[hit] - self.positions[i]
            keep = np.einsum("ij,ij->i", vec, vec) > 1e-20
            pi.append(np.full(keep.sum(), i, dtype=np.int64))
            pj.append(ids[hit[keep]])
            pvec.append(vec[keep])
        pi = np.concatenate(pi) if pi else np.zeros(0, dtype=np.int64)
        pj = np.concatenate(pj) if pj else np.zeros(0, dtype=np.int64)
        pvec = np.concatenate(pvec) if pvec else np.zeros((0, 2))
        self._pair_cache[key] = (pi, pj, pvec)
        return self._pair_cache[key]

    def env_table(self, r: float) -> _EnvTable:
        key = round(float(r), 9)
        if key not in self._env_cache:
            self._env_cache[key] = _EnvTable(self.n_sites, *self.pairs_within(r))
        return self._env_cache[key]

    def site_index_at(self, position: np.ndarray):
        """Index of the site at the given reference position, or None."""
        key = tuple(self._position_key(position, self.bravais))
        return self._key_to_index.get(key)

    @staticmethod
    def _position_key(position, bravais):
        f = 3.0 * (np.linalg.inv(bravais.matrix) @ np.asarray(position, dtype=float))
        k = np.round(f).astype(np.int64)
        if np.max(np.abs(f - k)) > 1e-6:
            return np.array([np.iinfo(np.int64).min, 0])  # off-grid sentinel
        return k

    @property
    def defect_positions(self) -> np.ndarray:
        return self.defects.positions if self.defects is not None else np.zeros((0, 2))

    @property
    def n_defects(self) -> int:
        return self.defects.n_defects if self.defects is not None else 0

    # -- nearest-neighbor structure -----------------------------------------

    def nn_neighbors(self, site: int):
        """Indices and reference offsets of the nearest-neighbor set of a site."""
        lo, hi = self.nn_indptr[site], self.nn_indptr[site + 1]
        return self.nn_j[lo:hi], self.nn_vec[lo:hi]


@dataclass
class DisplacementField:
    """One displacement vector per representative site; periodic by construction."""

    lattice: DefectedLattice
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.lattice.n_sites, 2):
            raise ValueError("values must have shape (n_sites, 2)")

    @classmethod
    def zeros(cls, lattice: DefectedLattice) -> "DisplacementField":
        return cls(lattice, np.zeros((lattice.n_sites, 2)))

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.lattice, self.values.copy())

    def __add__(self, other: "DisplacementField") -> "DisplacementField":
        if other.lattice is not self.lattice:
            raise ValueError("displacement fields live on different lattices")
        return DisplacementField(self.lattice, self.values + other.values)


# ---------------------------------------------------------------------------
# construction


def _homogeneous_sites(bravais: BravaisSpec, cell: SupercellSpec):
    """Lattice points of A*Z^2 inside Omega_N = B(-N/2, N/2]^2, scan-ordered."""
    n = cell.repeat
    b = cell.cell_vectors(bravais)
    if abs(np.linalg.det(b)) < 1e-12:
        raise SingularCell("supercell matrix B is singular")
    binv = np.linalg.inv(b)
    coeffs = np.eye(2, dtype=np.int64) if cell.coeffs is None else cell.coeffs
    # bounding box of integer coords covering the cell
    corners = np.array([[x, y] for x in (-n / 2, n / 2) for y in (-n / 2, n / 2)])
    ij_corners = corners @ coeffs.T.astype(float)
    lo = np.floor(ij_corners.min(axis=0)).astype(int) - 1
    hi = np.ceil(ij_corners.max(axis=0)).astype(int) + 1
    ii, jj = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    ij = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pos = ij.astype(float) @ bravais.matrix.T
    frac = pos @ binv.T
    eps = 1e-9
    keep = np.all((frac > -n / 2 + eps) & (frac <= n / 2 + eps), axis=1)
    ij, pos = ij[keep], pos[keep]
    order = np.lexsort((ij[:, 0], ij[:, 1]))
    return ij[order], pos[order]


def build_lattice(bravais: BravaisSpec, cell: SupercellSpec,
                  defects: DefectSet | None = None) -> DefectedLattice:
    """Construct the periodic defected site set and its neighbor structure.

    Vacancy positions must coincide with lattice sites; interstitials are
    inserted verbatim and must keep at least ``0.3*r0`` from every site.
    """
    ij, pos = _homogeneous_sites(bravais, cell)
    period = cell.cell_vectors(bravais) * cell.repeat
    period_inv = np.linalg.inv(period)
    r0 = bravais.r0

    keys = [DefectedLattice._position_key(p, bravais) for p in pos]
    keep = np.ones(len(pos), dtype=bool)
    added_pos = []

    if defects is not None:
        frac = defects.positions @ period_inv.T
        if np.any(frac <= -0.5 - 1e-9) or np.any(frac > 0.5 + 1e-9):
            raise DefectOutsideCell("defect position outside the periodic cell")
        _check_defect_separation(defects, period)
        key_map = {tuple(k): idx for idx, k in enumerate(keys)}
        for kind, p in zip(defects.kinds, defects.positions):
            if kind == VACANCY:
                key = tuple(DefectedLattice._position_key(p, bravais))
                idx = key_map.get(key)
                if idx is None or not keep[idx]:
                    raise DefectOutsideCell(f"vacancy position {p} is not an occupied lattice site")
                keep[idx] = False
            else:
                d = np.linalg.norm(_min_image_static(pos - p, period, period_inv), axis=1)
                if d.min() < 0.3 * r0 - 1e-12:
                    raise OverlappingDefects("interstitial too close to a lattice site")
                added_pos.append(p)

    final_pos = [pos[keep]]
    added_mask = [np.zeros(int(keep.sum()), dtype=bool)]
    if added_pos:
        final_pos.append(np.array(added_pos))
        added_mask.append(np.ones(len(added_pos), dtype=bool))
    final_pos = np.concatenate(final_pos)
    added_mask = np.concatenate(added_mask)
    final_keys = [DefectedLattice._position_key(p, bravais) for p in final_pos]

    lat = DefectedLattice(bravais, cell, defects, final_pos, final_keys, added_mask)
    _build_nn_sets(lat)
    counts = np.diff(lat.nn_indptr)
    if counts.min() < 3:
        raise DefectFitError("a site has fewer than 3 nearest neighbors")
    return lat


def _min_image_static(vecs, period, period_inv):
    f = vecs @ period_inv.T
    f -= np.round(f)
    return f @ period.T


def _check_defect_separation(defects: DefectSet, period):
    if defects.n_defects < 2:
        return
    sep = _pairwise_defect_separation(defects.positions, period)
    if sep < 2.0 * defects.core_radius - 1e-12:
        raise OverlappingDefects(
            f"defect separation {sep:.6g} below 2*core_radius {2 * defects.core_radius:.6g}")


def _pairwise_defect_separation(positions, period):
    period_inv = np.linalg.inv(period)
    best = np.inf
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            d = positions[j] - positions[i]
            for ax in (-1, 0, 1):
                for ay in (-1, 0, 1):
                    best = min(best, float(np.linalg.norm(d + period @ np.array([ax, ay]))))
    return best


def min_separation(lattice: DefectedLattice) -> float:
    """Minimum distance among all periodic images of distinct defect cores.

    For a single defect this is the shortest periodicity vector (distance
    to the defect's own nearest image).
    """
    period = lattice.period
    shortest_period = min(
        float(np.linalg.norm(period @ np.array(a)))
        for a in [(1, 0), (0, 1), (1, 1), (1, -1)]
    )
    if lattice.n_defects <= 1:
        return shortest_period
    pairwise = _pairwise_defect_separation(lattice.defect_positions, period)
    return min(pairwise, shortest_period)


# ---------------------------------------------------------------------------
# nearest-neighbor sets

def _build_nn_sets(lat: DefectedLattice):
    r0 = lat.bravais.r0
    band = (0.99 * r0, 1.01 * r0)
    pi, pj, pvec = lat.pairs_within(_NN_CANDIDATE_FACTOR * r0)
    dist = np.linalg.norm(pvec, axis=1)

    if lat.n_defects == 0:
        sel = (dist >= band[0]) & (dist <= band[1])
        _store_nn(lat, pi[sel], pj[sel], pvec[sel])
        return

    dp = lat.defect_positions
    dmin = np.full(lat.n_sites, np.inf)
    for p in dp:
        d = np.linalg.norm(lat.min_image(lat.positions - p), axis=1)
        dmin = np.minimum(dmin, d)
    in_region = dmin <= _NN_REGION_FACTOR * r0

    plain = (dist >= band[0]) & (dist <= band[1]) & ~in_region[pi] & ~in_region[pj]
    keep_i = [pi[plain]]
    keep_j = [pj[plain]]
    keep_v = [pvec[plain]]

    # image-resolved candidate pairs touching the defect regions, deduplicated
    cand = np.where(in_region[pi] | in_region[pj])[0]
    seen = set()
    for p in cand:
        i, j, v = int(pi[p]), int(pj[p]), pvec[p]
        if i < j or (i == j and (v[0], v[1]) <= (-v[0], -v[1])):
            key = (i, j, round(v[0] * 1e6), round(v[1] * 1e6))
        else:
            key = (j, i, round(-v[0] * 1e6), round(-v[1] * 1e6))
        if key in seen:
            continue
        seen.add(key)
        if _voronoi_pair(lat, i, v):
            keep_i += [np.array([i]), np.array([j])]
            keep_j += [np.array([j]), np.array([i])]
            keep_v += [v[None, :], -v[None, :]]

    _store_nn(lat, np.concatenate(keep_i), np.concatenate(keep_j), np.concatenate(keep_v))


def _store_nn(lat, pi, pj, pvec):
    pi = pi.astype(np.int64)
    pj = pj.astype(np.int64)
    order = np.lexsort((np.round(pvec[:, 1] * 1e8), np.round(pvec[:, 0] * 1e8), pj, pi))
    lat.nn_j = pj[order]
    lat.nn_vec = pvec[order]
    counts = np.bincount(pi[order], minlength=lat.n_sites)
    lat.nn_indptr = np.concatenate([[0], np.cumsum(counts)])
    lat.nn_i = pi[order]


def _voronoi_pair(lat: DefectedLattice, i: int, vec: np.ndarray) -> bool:
    """Equidistance criterion for one image-resolved pair.

    True iff some point is equidistant from the two sites and at least as
    close to them as to every other site: the pair's Voronoi cells touch.
    The witness is searched on the perpendicular bisector of the pair.
    """
    r0 = lat.bravais.r0
    p = lat.positions[i]
    q = p + vec
    mid = 0.5 * (p + q)
    d = q - p
    that = np.array([-d[1], d[0]]) / np.linalg.norm(d)

    pts, _, tree = lat._images()
    near = tree.query_ball_point(mid, 4.6 * r0)
    others = pts[near]
    keep = (np.linalg.norm(others - p, axis=1) > 1e-9) & (np.linalg.norm(others - q, axis=1) > 1e-9)
    others = others[keep]
    if len(others) == 0:
        return True

    def gap(s):
        a = mid + s * that
        return float(np.linalg.norm(a - p) - np.linalg.norm(others - a, axis=1).min())

    span = 2.2 * r0
    grid = np.linspace(-span, span, 221)
    pts_on_line = mid[None, :] + grid[:, None] * that[None, :]
    d_pair = np.linalg.norm(pts_on_line - p, axis=1)
    d_other = np.linalg.norm(pts_on_line[:, None, :] - others[None, :, :], axis=2).min(axis=1)
    vals = d_pair - d_other
    k = int(np.argmin(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(gap, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12 * r0})
    best = min(vals[k], float(res.fun))
    return best <= 1e-7 * r0


# ---------------------------------------------------------------------------
# stencil norms and admissibility


def stencil_norm(u: DisplacementField, site: int) -> float:
    """Root-sum-square of nearest-neighbor displacement differences at a site."""
    lat = u.lattice
    nj, _ = lat.nn_neighbors(site)
    diff = u.values[nj] - u.values[site]
    return float(np.sqrt(np.einsum("ij,ij->", diff, diff)))

def global_stencil_norm(u: DisplacementField) -> float:
    """Discrete energy norm: sqrt of the sum of squared per-site stencil norms."""
    lat = u.lattice
    diff = u.values[lat.nn_j] - u.values[lat.nn_i]
    return float(np.sqrt(np.einsum("ij,ij->", diff, diff)))


def check_admissible(u: DisplacementField, m: float, pair_cutoff_factor: float = 3.0) -> bool:
    """True iff deformed distances exceed ``m`` times reference distances.

    Checked for all image-resolved pairs within ``pair_cutoff_factor * r0``
    of each other in the reference configuration; for the small displacement
    fields this package works with, farther pairs cannot violate the bound.
    """
    if not m > 0:
        raise ValueError("m must be positive")
    lat = u.lattice
    pi, pj, pvec = lat.pairs_within(pair_cutoff_factor * lat.bravais.r0)
    if len(pi) == 0:
        return True
    deformed = pvec + u.values[pj] - u.values[pi]
    return bool(np.all(np.linalg.norm(deformed, axis=1) > m * np.linalg.norm(pvec, axis=1)))


def to_xyz(lattice: DefectedLattice, comment: str = "") -> str:
    """Site list as XYZ-style text: count, comment, then one `index x y` per line."""
    lines = [str(lattice.n_sites), comment]
    for i, (x, y) in enumerate(lattice.positions):
        lines.append(f"{i} {x:.12g} {y:.12g}")
    return "\n".join(lines) + "\n"
