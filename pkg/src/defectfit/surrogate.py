"""Linear invariant cluster-expansion surrogate for 2D site potentials.

One-particle functions are products of a radial polynomial and a circular
harmonic, phi_km(g) = P_k(r) * exp(i m theta).  Neighbor-summed densities
A_km = sum_j phi_km(g_j) are correlated up to a maximum order; products with
zero total angular index are rotation invariant, and keeping one
representative of each complex-conjugate pair (the real part) adds
reflection invariance.  Permutation invariance is automatic from the
density sums.

The model is linear in its coefficients, so fitting reduces to a linear
least-squares problem; this module also produces the per-configuration
design rows (energies) and blocks (forces) that the fit module stacks.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DefectFitError
from .potential import SitePotential

__all__ = [
    "BasisSpec",
    "BasisFunction",
    "SurrogateModel",
    "EmptyBasis",
    "NeighborAtZeroDistance",
    "build_basis",
    "evaluator_for",
    "evaluate_site",
    "site_gradient",
    "design_row",
    "model_to_json",
    "model_from_json",
]

#: width of the C2 radial envelope, as a fraction of the cutoff
_ENVELOPE_FRACTION = 0.4

#: rational distance transform x(r): polynomial resolution concentrates
#: where t(r) = 1/(1 + (r/r1)^q) varies, i.e. around r1, and collapses in
#: the weakly interacting tail near the cutoff, which keeps fitted radial
#: profiles from oscillating in barely constrained regions
_TRANSFORM_Q = 3.0
_TRANSFORM_R1_FRACTION = 0.4

_DISTANCE_FLOOR = 1e-12


class EmptyBasis(DefectFitError):
    pass


class NeighborAtZeroDistance(DefectFitError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Size parameters of the invariant basis.

    ``order`` is the maximum correlation order (body order minus one),
    ``max_degree`` bounds the total degree sum(k + |m|) of each product,
    ``n_radial`` is the number of radial polynomials, and ``m_max`` bounds
    each angular index.
    """

    order: int
    max_degree: int
    n_radial: int
    r_cut: float
    m_max: int

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError("correlation order must be 1, 2 or 3")
        if self.n_radial < 1 or self.m_max < 0:
            raise ValueError("basis size parameters must be nonnegative")
        if not self.r_cut > 0:
            raise ValueError("r_cut must be positive")


@dataclass(frozen=True)
class BasisFunction:
    """One invariant product, stored as a sorted tuple of (k, m) pairs."""

    kms: tuple

    @property
    def order(self) -> int:
        return len(self.kms)

    @property
    def degree(self) -> int:
        return sum(k + abs(m) for k, m in self.kms)


def build_basis(spec: BasisSpec) -> list:
    """Enumerate the invariant basis, sorted by (order, degree, indices).

    Products are lexicographically ordered tuples of one-particle indices
    with zero total angular index; of each pair related by negating all
    angular indices (complex conjugation) only the lexicographically
    smaller member is kept.
    """
    one_particle = [(k, m) for k in range(spec.n_radial)
                    for m in range(-spec.m_max, spec.m_max + 1)
                    if k + abs(m) <= spec.max_degree]
    out = []
    for order in range(1, spec.order + 1):
        for tup in itertools.combinations_with_replacement(sorted(one_particle), order):
            if sum(m for _, m in tup) != 0:
                continue
            if sum(k + abs(m) for k, m in tup) > spec.max_degree:
                continue
            conj = tuple(sorted((k, -m) for k, m in tup))
            if conj < tup:
                continue
            out.append(BasisFunction(kms=tup))
    if not out:
        raise EmptyBasis("no basis functions survive the degree/order bounds")
    out.sort(key=lambda f: (f.order, f.degree, f.kms))
    return out


# ---------------------------------------------------------------------------
# radial basis


def _smoothstep_down(s):
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _envelope(r, r_cut):
    w = _ENVELOPE_FRACTION * r_cut
    s = np.clip((r - (r_cut - w)) / w, 0.0, 1.0)
    v = _smoothstep_down(s)
    dv = -30.0 * s**2 * (1.0 - s) ** 2 / w
    ddv = -60.0 * s * (1.0 - 3.0 * s + 2.0 * s**2) / w**2
    outside = r >= r_cut
    v = np.where(outside, 0.0, v)
    dv = np.where(outside | (r <= r_cut - w), 0.0, dv)
    ddv = np.where(outside | (r <= r_cut - w), 0.0, ddv)
    return v, dv, ddv


def _transform(r, r_cut):
    """Map distances to [-1, 1] through the rational profile; returns x, x', x''."""
    r1 = _TRANSFORM_R1_FRACTION * r_cut
    q = _TRANSFORM_Q
    s = (r / r1) ** q
    t = 1.0 / (1.0 + s)
    r_safe = np.maximum(r, 1e-30)
    ds = q * s / r_safe
    dds = q * (q - 1.0) * s / r_safe**2
    dt = -ds * t * t
    ddt = (-dds + 2.0 * ds * ds * t) * t * t
    t_cut = 1.0 / (1.0 + (r_cut / r1) ** q)
    scale = 2.0 / (1.0 - t_cut)
    return scale * (t - t_cut) - 1.0, scale * dt, scale * ddt


def _radial_basis(r, n_radial, r_cut):
    """Chebyshev polynomials in the transformed distance times the C2 envelope.

    Returns value, first and second derivative arrays of shape
    ``r.shape + (n_radial,)``.
    """
    x, dx, ddx = _transform(r, r_cut)
    shape = r.shape + (n_radial,)
    t = np.zeros(shape)
    dt = np.zeros(shape)
    ddt = np.zeros(shape)
    t[..., 0] = 1.0
    if n_radial > 1:
        t[..., 1] = x
        dt[..., 1] = 1.0
    for k in range(2, n_radial):
        t[..., k] = 2.0 * x * t[..., k - 1] - t[..., k - 2]
        dt[..., k] = 2.0 * t[..., k - 1] + 2.0 * x * dt[..., k - 1] - dt[..., k - 2]
        ddt[..., k] = 4.0 * dt[..., k - 1] + 2.0 * x * ddt[..., k - 1] - ddt[..., k - 2]
    env, denv, ddenv = _envelope(r, r_cut)
    val = t * env[..., None]
    dval = (dt * dx[..., None]) * env[..., None] + t * denv[..., None]
    ddval = (ddt * dx[..., None] ** 2 * env[..., None]
             + dt * ddx[..., None] * env[..., None]
             + 2.0 * dt * dx[..., None] * denv[..., None]
             + t * ddenv[..., None])
    return val, dval, ddval


# ---------------------------------------------------------------------------
# evaluation engine


class _EnvCache:
    """Geometry and one-particle tables for a padded batch of environments."""

    def __init__(self, env, mask, spec):
        env = np.asarray(env, dtype=float)
        r = np.linalg.norm(env, axis=-1)
        live = mask & (r <= spec.r_cut)
        if np.any(live & (r < _DISTANCE_FLOOR)):
            raise NeighborAtZeroDistance("neighbor at zero distance from the center site")
        r_safe = np.where(live, np.maximum(r, _DISTANCE_FLOOR), 1.0)
        self.live = live
        self.r = r_safe
        self.rhat = np.where(live[..., None], env / r_safe[..., None], 0.0)
        self.that = np.stack([-self.rhat[..., 1], self.rhat[..., 0]], axis=-1)
        rad, drad, ddrad = _radial_basis(r_safe, spec.n_radial, spec.r_cut)
        self.rad = np.where(live[..., None], rad, 0.0)
        self.drad = np.where(live[..., None], drad, 0.0)
        self.ddrad = np.where(live[..., None], ddrad, 0.0)
        z = self.rhat[..., 0] + 1j * self.rhat[..., 1]
        mm = spec.m_max
        e = np.empty(r_safe.shape + (2 * mm + 1,), dtype=complex)
        e[..., mm] = 1.0
        for m in range(1, mm + 1):
            e[..., mm + m] = e[..., mm + m - 1] * z
            e[..., mm - m] = np.conj(e[..., mm + m])
        self.ang = np.where(live[..., None], e, 0.0)
        self.m_values = np.arange(-mm, mm + 1)

    def densities(self):
        # A[b, k, m-column]
        return np.einsum("bjk,bjm->bkm", self.rad, self.ang)


class BasisEvaluator:
    """Vectorized evaluation of the invariant basis and its derivatives."""

    def __init__(self, spec: BasisSpec):
        self.spec = spec
        self.functions = build_basis(spec)
        self.n_basis = len(self.functions)
        self.n_channels = spec.n_radial * (2 * spec.m_max + 1)
        self._by_order = {}
        col = 0
        for order in (1, 2, 3):
            fns = [f for f in self.functions if f.order == order]
            if not fns:
                continue
            ch = np.array([[self._channel(k, m) for k, m in f.kms] for f in fns],
                          dtype=np.int64)
            cols = np.arange(col, col + len(fns))
            self._by_order[order] = (ch, cols)
            col += len(fns)

    def _channel(self, k, m):
        return k * (2 * self.spec.m_max + 1) + (m + self.spec.m_max)

    # -- values --------------------------------------------------------------

    def cache(self, env, mask) -> _EnvCache:
        return _EnvCache(env, mask, self.spec)

    def design_values(self, cache: _EnvCache) -> np.ndarray:
        """Basis values for every environment in the batch: (batch, n_basis)."""
        a = cache.densities()
        aflat = a.reshape(a.shape[0], -1)
        out = np.empty((a.shape[0], self.n_basis))
        for order, (ch, cols) in self._by_order.items():
            prod = aflat[:, ch[:, 0]]
            for alpha in range(1, order):
                prod = prod * aflat[:, ch[:, alpha]]
            out[:, cols] = prod.real
        return out

    # -- adjoint weights for a fixed coefficient vector ------------------------

    def _model_weights(self, coeff, aflat):
        """w[b, ch] = sum over basis fns and slots of c * (product of other slots)."""
        b = aflat.shape[0]
        w = np.zeros((b, self.n_channels), dtype=complex)
        for order, (ch, cols) in self._by_order.items():
            c = coeff[cols]
            if order == 1:
                np.add.at(w, (slice(None), ch[:, 0]),
                          np.broadcast_to(c, (b, len(c))))
                continue
            cols_a = [aflat[:, ch[:, al]] for al in range(order)]
            for alpha in range(order):
                partial = None
                for beta in range(order):
                    if beta == alpha:
                        continue
                    partial = cols_a[beta] if partial is None else partial * cols_a[beta]
                wt = w.T
                np.add.at(wt, ch[:, alpha], (c * partial).T)
        return w

    def model_energy(self, coeff, cache):
        return self.design_values(cache) @ coeff

    def model_gradient(self, coeff, cache) -> np.ndarray:
        """d(site energy)/d(neighbor position): (batch, k, 2)."""
        a = cache.densities()
        aflat = a.reshape(a.shape[0], -1)
        w = self._model_weights(coeff, aflat)
        mm = self.spec.m_max
        w3 = w.reshape(-1, self.spec.n_radial, 2 * mm + 1)
        s_rad = np.einsum("bkm,bjk->bjm", w3, cache.drad.astype(complex))
        s_ang = np.einsum("bkm,bjk->bjm", w3, cache.rad.astype(complex))
        g_r = np.einsum("bjm,bjm->bj", s_rad, cache.ang).real
        im_scaled = (1j * cache.m_values)[None, None, :] * cache.ang / cache.r[..., None]
        g_t = np.einsum("bjm,bjm->bj", s_ang, im_scaled).real
        out = g_r[..., None] * cache.rhat + g_t[..., None] * cache.that
        return np.where(cache.live[..., None], out, 0.0)

    # -- second derivatives ----------------------------------------------------

    def _pair_weights(self, coeff, aflat):
        """W2[b, ch1, ch2]: second-order adjoint weights for a coefficient vector."""
        b = aflat.shape[0]
        nch = self.n_channels
        w2 = np.zeros((b, nch * nch), dtype=complex)
        for order, (ch, cols) in self._by_order.items():
            if order == 1:
                continue
            c = coeff[cols]
            idx = list(range(order))
            for alpha in range(order):
                for beta in range(order):
                    if alpha == beta:
                        continue
                    rest = [g for g in idx if g not in (alpha, beta)]
                    if rest:
                        src = aflat[:, ch[:, rest[0]]]
                        vals = c * src
                    else:
                        vals = np.broadcast_to(c.astype(complex), (b, len(c)))
                    flat = ch[:, alpha] * nch + ch[:, beta]
                    w2t = w2.T
                    np.add.at(w2t, flat, vals.T)
        return w2.reshape(b, nch, nch)

    def model_hessian(self, coeff, cache) -> np.ndarray:
        """d2(site energy)/d(neighbor positions)2: (batch, k, 2, k, 2)."""
        a = cache.densities()
        b, kn = cache.r.shape
        aflat = a.reshape(b, -1)
        dphi = self._one_particle_gradients(cache)        # (b, kn, 2, nch)
        w2 = self._pair_weights(coeff, aflat)
        tmp = np.einsum("bjxc,bcd->bjxd", dphi, w2)
        h = np.einsum("bjxd,blyd->bjxly", tmp, dphi).real
        w = self._model_weights(coeff, aflat)
        h += self._diagonal_second_terms(w, cache)
        return h

    def _one_particle_gradients(self, cache) -> np.ndarray:
        """dphi_ch(g_j)/dg: complex (batch, k, 2, n_channels)."""
        mm = self.spec.m_max
        b, kn = cache.r.shape
        rad_part = cache.drad[..., :, None] * cache.ang[..., None, :]
        ang_part = (cache.rad[..., :, None] * cache.ang[..., None, :]
                    * (1j * cache.m_values)[None, None, None, :]
                    / cache.r[..., None, None])
        out = (rad_part[..., None, :, :] * cache.rhat[..., :, None, None]
               + ang_part[..., None, :, :] * cache.that[..., :, None, None])
        # shape (b, kn, 2, K, 2M+1) -> flatten channels
        return out.reshape(b, kn, 2, self.n_channels)

    def _diagonal_second_terms(self, w, cache) -> np.ndarray:
        mm = self.spec.m_max
        b, kn = cache.r.shape
        w3 = w.reshape(b, self.spec.n_radial, 2 * mm + 1)
        c_dd = np.einsum("bkm,bjk->bjm", w3, cache.ddrad.astype(complex))
        c_d = np.einsum("bkm,bjk->bjm", w3, cache.drad.astype(complex))
        c_0 = np.einsum("bkm,bjk->bjm", w3, cache.rad.astype(complex))
        ang = cache.ang
        m = cache.m_values[None, None, :]
        t_rr = np.einsum("bjm,bjm->bj", c_dd, ang).real
        t_perp = np.einsum("bjm,bjm->bj", c_d, ang).real / cache.r
        t_tt = np.einsum("bjm,bjm->bj", c_0, (m**2) * ang).real / cache.r**2
        cross = np.einsum("bjm,bjm->bj",
                          c_d / cache.r[..., None] - c_0 / (cache.r**2)[..., None],
                          (1j * m) * ang).real
        rr = np.einsum("bjx,bjy->bjxy", cache.rhat, cache.rhat)
        tt = np.einsum("bjx,bjy->bjxy", cache.that, cache.that)
        rt = np.einsum("bjx,bjy->bjxy", cache.rhat, cache.that)
        eye = np.eye(2)
        blocks = (t_rr[..., None, None] * rr
                  + t_perp[..., None, None] * (eye - rr)
                  - t_tt[..., None, None] * tt
                  + cross[..., None, None] * (rt + rt.transpose(0, 1, 3, 2)))
        blocks = np.where(cache.live[..., None, None], blocks, 0.0)
        out = np.zeros((b, kn, 2, kn, 2))
        idx = np.arange(kn)
        out[:, idx, :, idx, :] = blocks.transpose(1, 0, 2, 3)
        return out

    # -- per-basis-function force blocks (for least-squares assembly) ---------

    def force_design_block(self, cache, pad_j, site_indices, n_sites) -> np.ndarray:
        """Gradient rows of the summed basis: (2*n_sites, n_basis).

        Entry (2p+x, f) is d/du[p,x] of sum over the batch sites of
        B_f(environment); the batch must cover each listed site once.
        """
        a = cache.densities()
        b, kn = cache.r.shape
        aflat = a.reshape(b, -1)
        dphi = self._one_particle_gradients(cache)   # (b, kn, 2, nch)
        rows = np.zeros((2 * n_sites, self.n_basis))
        ff = np.empty((b, kn, 2, self.n_basis))
        for order, (ch, cols) in self._by_order.items():
            acc = None
            cols_a = [aflat[:, ch[:, al]] for al in range(order)]
            for alpha in range(order):
                partial = None
                for beta in range(order):
                    if beta == alpha:
                        continue
                    partial = cols_a[beta] if partial is None else partial * cols_a[beta]
                grad_part = dphi[:, :, :, ch[:, alpha]]
                if partial is None:
                    term = grad_part.real
                else:
                    term = (grad_part * partial[:, None, None, :]).real
                acc = term if acc is None else acc + term
            ff[:, :, :, cols] = acc
        ff[~cache.live] = 0.0
        flat_j = pad_j.ravel()
        contrib = ff.reshape(b * kn, 2, self.n_basis)
        for x in (0, 1):
            np.add.at(rows, 2 * flat_j + x, contrib[:, x, :])
        center = np.asarray(site_indices, dtype=np.int64)
        own = ff.sum(axis=1)   # (b, 2, n_basis)
        for x in (0, 1):
            np.add.at(rows, 2 * center + x, -own[:, x, :])
        return rows


_EVALUATORS: dict = {}


def evaluator_for(spec: BasisSpec) -> BasisEvaluator:
    if spec not in _EVALUATORS:
        _EVALUATORS[spec] = BasisEvaluator(spec)
    return _EVALUATORS[spec]


# ---------------------------------------------------------------------------
# the fitted model


@dataclass
class SurrogateModel(SitePotential):
    """Linear invariant site potential: energy = design row . coefficients."""

    spec: BasisSpec
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        ev = evaluator_for(self.spec)
        if self.coefficients.shape != (ev.n_basis,):
            raise ValueError(
                f"coefficient vector length {self.coefficients.shape} does not match "
                f"basis size {ev.n_basis}")

    @property
    def r_cut(self) -> float:
        return self.spec.r_cut

    @property
    def n_basis(self) -> int:
        return len(self.coefficients)

    @property
    def evaluator(self) -> BasisEvaluator:
        return evaluator_for(self.spec)

    def energy_batch(self, env, mask, chunk: int = 2048):
        ev = self.evaluator
        out = np.empty(len(env))
        for lo in range(0, len(env), chunk):
            cache = ev.cache(env[lo:lo + chunk], mask[lo:lo + chunk])
            out[lo:lo + chunk] = ev.model_energy(self.coefficients, cache)
        return out

    def gradient_batch(self, env, mask, chunk: int = 2048):
        ev = self.evaluator
        out = np.empty(env.shape)
        for lo in range(0, len(env), chunk):
            cache = ev.cache(env[lo:lo + chunk], mask[lo:lo + chunk])
            out[lo:lo + chunk] = ev.model_gradient(self.coefficients, cache)
        return out

    def hessian_batch(self, env, mask, chunk: int = 128):
        ev = self.evaluator
        b, kn = mask.shape
        out = np.empty((b, kn, 2, kn, 2))
        for lo in range(0, b, chunk):
            cache = ev.cache(env[lo:lo + chunk], mask[lo:lo + chunk])
            out[lo:lo + chunk] = ev.model_hessian(self.coefficients, cache)
        return out


# ---------------------------------------------------------------------------
# single-environment conveniences


def _single(env):
    env = np.asarray(env, dtype=float)
    if env.ndim != 2 or env.shape[1] != 2:
        raise ValueError("environment must be a list of 2D offset vectors")
    mask = np.ones(len(env), dtype=bool)
    return env[None], mask[None]


def evaluate_site(model: SurrogateModel, environment) -> float:
    env, mask = _single(environment)
    return float(model.energy_batch(env, mask)[0])


def site_gradient(model: SurrogateModel, environment) -> np.ndarray:
    env, mask = _single(environment)
    return model.gradient_batch(env, mask)[0]


def design_row(spec: BasisSpec, environment) -> np.ndarray:
    """Basis values at one environment, ordered like build_basis."""
    ev = evaluator_for(spec)
    env, mask = _single(environment)
    return ev.design_values(ev.cache(env, mask))[0]


# ---------------------------------------------------------------------------
# serialization


_FORMAT_VERSION = 1


def model_to_json(model: SurrogateModel) -> str:
    doc = {
        "format_version": _FORMAT_VERSION,
        "spec": {
            "order": model.spec.order,
            "max_degree": model.spec.max_degree,
            "n_radial": model.spec.n_radial,
            "r_cut": model.spec.r_cut,
            "m_max": model.spec.m_max,
        },
        "coefficients": [c.hex() for c in model.coefficients.tolist()],
    }
    return json.dumps(doc, indent=1)


def model_from_json(text: str) -> SurrogateModel:
    doc = json.loads(text)
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')}")
    spec = BasisSpec(**doc["spec"])
    coeff = np.array([float.fromhex(c) for c in doc["coefficients"]])
    return SurrogateModel(spec=spec, coefficients=coeff)
