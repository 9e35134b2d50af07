"""Weighted linear least squares for the surrogate coefficients.

Observations stack into one design matrix: per configuration one energy row
(the summed basis row relative to the undisplaced cell) scaled by
sqrt(W_E), and one row per displacement coordinate for the forces scaled by
sqrt(W_F).  The system is solved by column-pivoted QR with pivot
truncation, which regularizes near-dependent basis functions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DefectFitError
from .lattice import DisplacementField
from .surrogate import BasisSpec, SurrogateModel, evaluator_for

__all__ = [
    "LossWeights",
    "FitResult",
    "DimensionMismatch",
    "AllColumnsTruncated",
    "assemble",
    "solve_rrqr",
    "fit",
    "fit_family",
]


class DimensionMismatch(DefectFitError):
    pass


class AllColumnsTruncated(DefectFitError):
    pass


#: exponent of the degree-based column scaling applied before the pivoted QR.
#: Columns are first normalized to unit norm and then damped by
#: prod_alpha (1 + k_alpha + |m_alpha|)^-p, so the pivoting prefers
#: low-degree representatives among near-dependent columns and the pivot
#: truncation acts as a smoothness prior; coefficients are mapped back to
#: the unscaled basis afterwards, which shrinks whatever weight falls on
#: high-degree functions and keeps the model tame outside the training
#: distribution.
SMOOTHNESS_EXPONENT = 2.0


def smoothness_scale(functions, exponent: float = SMOOTHNESS_EXPONENT) -> np.ndarray:
    out = np.empty(len(functions))
    for i, f in enumerate(functions):
        s = 1.0
        for k, m in f.kms:
            s /= (1.0 + k + abs(m)) ** exponent
        out[i] = s
    return out


def _column_preconditioner(a, functions, exponent: float = None) -> np.ndarray:
    p = SMOOTHNESS_EXPONENT if exponent is None else exponent
    norms = np.linalg.norm(a, axis=0)
    norms[norms == 0.0] = 1.0
    return smoothness_scale(functions, p) / norms


@dataclass
class LossWeights:
    """Energy/force weights of the least-squares loss, optionally per defect kind."""

    energy: float = 100.0
    force: float = 1.0
    per_kind: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.energy < 0 or self.force < 0 or self.energy + self.force == 0:
            raise ValueError("weights must be nonnegative with a positive sum")

    def for_kind(self, kind: str):
        if kind in self.per_kind:
            we, wf = self.per_kind[kind]
            return float(we), float(wf)
        return self.energy, self.force


@dataclass
class FitResult:
    model: SurrogateModel
    effective_rank: int
    residual_loss: float
    rmse_energy_train: float
    rmse_force_train: float
    rmse_energy_test: float
    rmse_force_test: float
    n_rows: int
    wall_time: float


def assemble(samples, spec: BasisSpec, weights: LossWeights):
    """Design matrix and target vector for samples from one training domain.

    Row layout per sample: first the energy row, then d*n force rows in
    site-major order.  Zero weights keep their rows at zero scale so the
    matrix shape does not depend on the weights.
    """
    if not samples:
        raise ValueError("samples must be nonempty")
    lat = samples[0].u.lattice
    for s in samples:
        if s.u.lattice is not lat:
            raise DimensionMismatch("all samples must come from one training domain")
    ev = evaluator_for(spec)
    table = lat.env_table(spec.r_cut + 0.3 * lat.bravais.r0)
    n = lat.n_sites
    site_idx = np.arange(n)
    we, wf = weights.for_kind(samples[0].defect_kind)
    swe, swf = np.sqrt(we), np.sqrt(wf)

    env0, mask0 = table.environments(np.zeros((n, 2)))
    row0 = ev.design_values(ev.cache(env0, mask0)).sum(axis=0)

    rows_per = 1 + 2 * n
    a = np.empty((rows_per * len(samples), ev.n_basis))
    b = np.empty(rows_per * len(samples))
    for s_idx, s in enumerate(samples):
        base = s_idx * rows_per
        env, mask = table.environments(s.u.values)
        cache = ev.cache(env, mask)
        a[base] = swe * (ev.design_values(cache).sum(axis=0) - row0)
        b[base] = swe * s.energy
        block = ev.force_design_block(cache, table.pad_j, site_idx, n)
        a[base + 1:base + rows_per] = swf * (-block)
        b[base + 1:base + rows_per] = swf * s.forces.ravel()
    return a, b


def solve_rrqr(matrix: np.ndarray, target: np.ndarray, rtol: float = 1e-6):
    """Least squares by column-pivoted QR with pivot truncation.

    Columns whose pivot magnitude falls below ``rtol`` times the largest
    pivot are dropped; their coefficients are returned as exact zeros.
    Returns (coefficients, effective rank).
    """
    if matrix.ndim != 2 or len(matrix) != len(target):
        raise DimensionMismatch("matrix and target shapes are inconsistent")
    if not 0 < rtol < 1:
        raise ValueError("rtol must lie in (0, 1)")
    q, r, piv = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] <= 0.0:
        raise AllColumnsTruncated("design matrix is numerically zero")
    below = np.nonzero(diag < rtol * diag[0])[0]
    rank = int(below[0]) if below.size else len(diag)
    if rank == 0:
        raise AllColumnsTruncated("all pivots fall below the truncation threshold")
    qtb = q.T @ target
    sol = scipy.linalg.solve_triangular(r[:rank, :rank], qtb[:rank])
    coef = np.zeros(matrix.shape[1])
    coef[piv[:rank]] = sol
    return coef, rank


def _group_by_domain(samples):
    groups = []
    seen = {}
    for s in samples:
        key = id(s.u.lattice)
        if key not in seen:
            seen[key] = len(groups)
            groups.append([])
        groups[seen[key]].append(s)
    return groups


def predict_observations(group, model):
    """Model energies and forces for observations sharing one lattice.

    Builds all sample environments as one padded batch, so the cost is a
    handful of vectorized potential evaluations rather than one call per
    sample.  Returns (energies (S,), forces (S, n, 2)).
    """
    lat = group[0].u.lattice
    table = lat.env_table(model.r_cut + 0.3 * lat.bravais.r0)
    n, k = table.mask.shape
    s = len(group)
    u = np.stack([obs.u.values for obs in group])            # (S, n, 2)
    env = table.pad_vec[None] + u[:, table.pad_j] - u[:, :, None, :]
    env = np.where(table.mask[None, :, :, None], env, 0.0).reshape(s * n, k, 2)
    mask = np.broadcast_to(table.mask[None], (s, n, k)).reshape(s * n, k)
    env0, mask0 = table.environments(np.zeros((n, 2)))
    ref_sum = float(model.energy_batch(env0, mask0).sum())
    energies = model.energy_batch(env, mask).reshape(s, n).sum(axis=1) - ref_sum
    g = model.gradient_batch(env, mask).reshape(s, n, k, 2)
    grad = np.zeros((s * n, 2))
    flat_idx = (np.arange(s)[:, None, None] * n + table.pad_j[None]).ravel()
    np.add.at(grad, flat_idx, g.reshape(-1, 2))
    grad -= g.sum(axis=2).reshape(s * n, 2)
    return energies, -grad.reshape(s, n, 2)


def _rmse_by_tag(samples, model):
    """Per-site energy RMSE and per-component force RMSE, split by tag."""
    out = {}
    for group in _group_by_domain(samples):
        n = group[0].u.lattice.n_sites
        energies, forces = predict_observations(group, model)
        for s, e, f in zip(group, energies, forces):
            rec = out.setdefault(s.tag, ([], []))
            rec[0].append((e - s.energy) / n)
            rec[1].append((f - s.forces).ravel())
    result = {}
    for tag, (de, df) in out.items():
        result[tag] = (float(np.sqrt(np.mean(np.square(de)))),
                       float(np.sqrt(np.mean(np.square(np.concatenate(df))))))
    return result


def fit(samples, spec: BasisSpec, weights: LossWeights | None = None,
        rtol: float = 1e-6) -> FitResult:
    """Assemble, solve, and score one surrogate fit.

    Samples may mix training domains (e.g. a vacancy and an interstitial
    cell); each domain is assembled with its per-kind weights and the
    blocks are stacked.  RMSE metrics are reported per tag over the train
    and test splits.
    """
    t0 = time.perf_counter()
    weights = weights or LossWeights()
    train = [s for s in samples if s.tag == "train"]
    if not train:
        raise ValueError("no train-tagged samples to fit on")
    blocks = [assemble(group, spec, weights) for group in _group_by_domain(train)]
    a = np.vstack([blk[0] for blk in blocks])
    b = np.concatenate([blk[1] for blk in blocks])
    scale = _column_preconditioner(a, evaluator_for(spec).functions)
    coef, rank = solve_rrqr(a * scale[None, :], b, rtol=rtol)
    coef *= scale
    resid = a @ coef - b
    model = SurrogateModel(spec=spec, coefficients=coef)
    scores = _rmse_by_tag([s for s in samples], model)
    e_tr, f_tr = scores.get("train", (np.nan, np.nan))
    e_te, f_te = scores.get("test", (np.nan, np.nan))
    return FitResult(model=model, effective_rank=rank,
                     residual_loss=float(resid @ resid),
                     rmse_energy_train=e_tr, rmse_force_train=f_tr,
                     rmse_energy_test=e_te, rmse_force_test=f_te,
                     n_rows=len(b), wall_time=time.perf_counter() - t0)


def _column_mapping(spec_small: BasisSpec, spec_big: BasisSpec):
    big_index = {f.kms: i for i, f in enumerate(evaluator_for(spec_big).functions)}
    cols = []
    for f in evaluator_for(spec_small).functions:
        if f.kms not in big_index:
            raise DimensionMismatch(
                f"{spec_small} is not nested inside {spec_big}")
        cols.append(big_index[f.kms])
    return np.array(cols, dtype=np.int64)


def fit_family(samples, specs, weights: LossWeights | None = None,
               rtol: float = 1e-6) -> list:
    """Fit a family of basis specs from one assembled design matrix.

    All specs must share the cutoff; the design matrix is assembled once
    for their envelope (elementwise maximum of order, degree, radial count
    and angular bound) and each member is solved on its column subset.
    """
    weights = weights or LossWeights()
    r_cuts = {s.r_cut for s in specs}
    if len(r_cuts) != 1:
        raise DimensionMismatch("all specs in a family must share r_cut")
    big = BasisSpec(order=max(s.order for s in specs),
                    max_degree=max(s.max_degree for s in specs),
                    n_radial=max(s.n_radial for s in specs),
                    r_cut=r_cuts.pop(),
                    m_max=max(s.m_max for s in specs))
    train = [s for s in samples if s.tag == "train"]
    if not train:
        raise ValueError("no train-tagged samples to fit on")
    t0 = time.perf_counter()
    blocks = [assemble(group, big, weights) for group in _group_by_domain(train)]
    a = np.vstack([blk[0] for blk in blocks])
    b = np.concatenate([blk[1] for blk in blocks])
    assembly_time = time.perf_counter() - t0
    results = []
    for spec in specs:
        t1 = time.perf_counter()
        cols = _column_mapping(spec, big)
        sub = a[:, cols]
        scale = _column_preconditioner(sub, evaluator_for(spec).functions)
        coef, rank = solve_rrqr(sub * scale[None, :], b, rtol=rtol)
        coef *= scale
        resid = sub @ coef - b
        model = SurrogateModel(spec=spec, coefficients=coef)
        scores = _rmse_by_tag(samples, model)
        e_tr, f_tr = scores.get("train", (np.nan, np.nan))
        e_te, f_te = scores.get("test", (np.nan, np.nan))
        solve_time = time.perf_counter() - t1
        results.append(FitResult(
            model=model, effective_rank=rank, residual_loss=float(resid @ resid),
            rmse_energy_train=e_tr, rmse_force_train=f_tr,
            rmse_energy_test=e_te, rmse_force_test=f_te,
            n_rows=len(b),
            wall_time=solve_time + assembly_time / len(specs)))
    return results
