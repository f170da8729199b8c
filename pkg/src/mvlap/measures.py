"""Empirical measures, transport metrics, and control occupation measures.

Weighted point masses on R^d (:class:`DiscreteMeasure`) and on path space
(:class:`PathMeasure`), the order-one Wasserstein and bounded-Lipschitz
metrics, and the per-particle moment functionals of realized controls.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import csr_matrix

EXACT_ATOM_LIMIT = 512

WEIGHT_TOL = 1e-12


class MeasureError(ValueError):
    pass


def _check_weights(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise MeasureError("weights must be nonnegative")
    if abs(float(np.sum(w)) - 1.0) > WEIGHT_TOL:
        raise MeasureError(f"weights sum to {np.sum(w)!r}, expected 1 within {WEIGHT_TOL}")
    return w


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point masses on R^d; atoms shape (n, d), weights sum to 1."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if not np.all(np.isfinite(atoms)):
            raise MeasureError("atoms must be finite")
        w = _check_weights(self.weights)
        if w.shape != (atoms.shape[0],):
            raise MeasureError("weights shape must match atom count")
        atoms.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @staticmethod
    def uniform(atoms) -> "DiscreteMeasure":
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        n = atoms.shape[0]
        return DiscreteMeasure(atoms, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x_{j + 1}" for j in range(self.dim)] + ["weight"])
            for atom, w in zip(self.atoms, self.weights):
                writer.writerow([repr(v) for v in atom] + [repr(w)])


@dataclass(frozen=True)
class PathMeasure:
    """Weighted point masses on path space, referencing a path ensemble."""

    ensemble: object  # sim.PathEnsemble (duck-typed: .values, .grid)
    weights: np.ndarray

    def __post_init__(self):
        w = _check_weights(self.weights)
        if w.shape != (self.ensemble.values.shape[0],):
            raise MeasureError("weights shape must match ensemble size")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @staticmethod
    def uniform(ensemble) -> "PathMeasure":
        n = ensemble.values.shape[0]
        return PathMeasure(ensemble, np.full(n, 1.0 / n))

    @property
    def paths(self) -> np.ndarray:
        return self.ensemble.values

    @property
    def grid(self) -> np.ndarray:
        return self.ensemble.grid


@dataclass(frozen=True)
class ControlRecord:
    """Realized per-particle control values on the step grid, (N, steps, d1)."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise MeasureError("control record must have shape (N, steps, d1)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_particles(self) -> int:
        return self.values.shape[0]

    def norms(self) -> np.ndarray:
        """Per-particle per-step Euclidean norms |u_i(t_k)|, shape (N, steps)."""
        return np.sqrt(np.sum(self.values * self.values, axis=-1))

    def first_moments(self) -> np.ndarray:
        """Per-particle integral of |u| dt (left rule)."""
        return np.sum(self.norms(), axis=-1) * self.dt

    def second_moments(self) -> np.ndarray:
        """Per-particle integral of |u|^2 dt (left rule)."""
        return np.sum(np.sum(self.values * self.values, axis=-1), axis=-1) * self.dt

    def mean_second_moment(self) -> float:
        """Particle average of the integrated squared control."""
        return float(np.mean(self.second_moments()))


@dataclass(frozen=True)
class OccupationMeasure:
    """Uniform measure over aligned (state path, control row, noise path) triples."""

    states: object  # sim.PathEnsemble
    controls: ControlRecord
    noise: object   # sim.NoiseEnsemble
    weights: np.ndarray

    def __post_init__(self):
        n = self.states.values.shape[0]
        if self.controls.values.shape[0] != n or self.noise.increments.shape[0] != n:
            raise MeasureError("occupation measure components disagree on particle count")
        if self.controls.values.shape[1] != self.states.values.shape[1] - 1:
            raise MeasureError("occupation measure components disagree on time grid")
        w = _check_weights(self.weights)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def control_cost(self) -> float:
        """Average integrated squared control over the triples."""
        return self.controls.mean_second_moment()


# ---------------------------------------------------------------------------
# operations

def empirical_marginal(ens, t: float) -> DiscreteMeasure:
    """Equal-weight atoms at the ensemble states at grid time ``t``.

    ``t`` must lie on the grid; off-grid times raise with the nearest grid
    time named (no interpolation).
    """
    grid = np.asarray(ens.grid, dtype=float)
    idx = int(np.argmin(np.abs(grid - t)))
    tol = 1e-9 * max(1.0, float(grid[-1]))
    if abs(grid[idx] - t) > tol:
        raise MeasureError(
            f"time {t!r} is off the grid; nearest grid time is {grid[idx]!r}"
        )
    return DiscreteMeasure.uniform(ens.values[:, idx, :])


def _as_atoms(m: DiscreteMeasure):
    return np.asarray(m.atoms, dtype=float), np.asarray(m.weights, dtype=float)


def _w1_sorted_1d(x1, w1, x2, w2) -> float:
    """Exact order-one transport cost on the line via the CDF difference."""
    o1 = np.argsort(x1, kind="stable")
    o2 = np.argsort(x2, kind="stable")
    x1, w1 = x1[o1], w1[o1]
    x2, w2 = x2[o2], w2[o2]
    pts = np.concatenate([x1, x2])
    order = np.argsort(pts, kind="stable")
    pts = pts[order]
    df = np.concatenate([w1, -w2])[order]
    cdf_gap = np.cumsum(df)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(pts)))


def _cost_matrix(a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    diff = a1[:, None, :] - a2[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _w1_exact_lp(a1, w1, a2, w2) -> float:
    """Exact transport LP on the cost matrix (HiGHS)."""
    n1, n2 = len(w1), len(w2)
    cost = _cost_matrix(a1, a2)
    rows, cols, data = [], [], []
    for i in range(n1):
        rows.extend([i] * n2)
        cols.extend(range(i * n2, (i + 1) * n2))
        data.extend([1.0] * n2)
    for j in range(n2):
        rows.extend([n1 + j] * n1)
        cols.extend(range(j, n1 * n2, n2))
        data.extend([1.0] * n1)
    a_eq = csr_matrix((data, (rows, cols)), shape=(n1 + n2, n1 * n2))
    # drop the last (redundant) marginal constraint for numerical stability
    res = linprog(
        cost.ravel(),
        A_eq=a_eq[:-1],
        b_eq=np.concatenate([w1, w2])[:-1],
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise MeasureError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _sinkhorn_w1(a1, w1, a2, w2, epsilon: Optional[float], max_iter=2000, tol=1e-10):
    """Entropic transport cost in the log domain; returns (value, info)."""
    cost = _cost_matrix(a1, a2)
    scale = float(np.median(cost[cost > 0])) if np.any(cost > 0) else 1.0
    eps = float(epsilon) if epsilon is not None else 0.01 * scale
    logw1 = np.log(np.maximum(w1, 1e-300))
    logw2 = np.log(np.maximum(w2, 1e-300))
    f = np.zeros(len(w1))
    g = np.zeros(len(w2))
    kernel = -cost / eps
    for _ in range(max_iter):
        f_new = -eps * _logsumexp_rows(kernel + (g + logw2)[None, :])
        g_new = -eps * _logsumexp_rows((kernel + (f_new + logw1)[:, None]).T)
        gap = float(np.max(np.abs(g_new - g))) if len(g) else 0.0
        f, g = f_new, g_new
        if gap < tol:
            break
    log_plan = (f[:, None] + g[None, :] - cost) / eps + logw1[:, None] + logw2[None, :]
    plan = np.exp(log_plan)
    plan_sum = plan.sum()
    if plan_sum > 0:
        plan = plan / plan_sum
    value = float(np.sum(plan * cost))
    # entropic bias is bounded by eps * log(n1 * n2)
    bound = eps * math.log(max(len(w1) * len(w2), 2))
    return value, {"method": "sinkhorn", "epsilon": eps, "error_bound": bound,
                   "approximate": True}


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def wasserstein1(m1: DiscreteMeasure, m2: DiscreteMeasure, detail: bool = False,
                 epsilon: Optional[float] = None):
    """Order-one Wasserstein distance between discrete measures.

    Exact for d = 1 (any size) and for d > 1 up to 512 atoms per side
    (assignment for uniform equal-count measures, transport LP otherwise).
    Larger multivariate inputs fall back to an entropic approximation; the
    result then carries an ``approximate`` flag and error bound when
    ``detail=True`` (and a warning either way).
    """
    a1, w1 = _as_atoms(m1)
    a2, w2 = _as_atoms(m2)
    if a1.shape[1] != a2.shape[1]:
        raise MeasureError("measures have different dimensions")
    info = {"method": "exact", "approximate": False}
    if a1.shape[1] == 1:
        value = _w1_sorted_1d(a1[:, 0], w1, a2[:, 0], w2)
        info["method"] = "sorted_1d"
    elif len(w1) <= EXACT_ATOM_LIMIT and len(w2) <= EXACT_ATOM_LIMIT:
        uniform = (
            len(w1) == len(w2)
            and np.allclose(w1, 1.0 / len(w1), rtol=0, atol=1e-15)
            and np.allclose(w2, 1.0 / len(w2), rtol=0, atol=1e-15)
        )
        if uniform:
            cost = _cost_matrix(a1, a2)
            rows, cols = linear_sum_assignment(cost)
            value = float(cost[rows, cols].sum() / len(w1))
            info["method"] = "assignment"
        else:
            value = _w1_exact_lp(a1, w1, a2, w2)
            info["method"] = "transport_lp"
    else:
        value, info = _sinkhorn_w1(a1, w1, a2, w2, epsilon)
        warnings.warn(
            "wasserstein1: atom count above exact-solver limit; "
            f"entropic approximation used (epsilon={info['epsilon']:.3g}, "
            f"bias bound {info['error_bound']:.3g})",
            stacklevel=2,
        )
    if detail:
        return value, info
    return value


def bounded_lipschitz(m1: DiscreteMeasure, m2: DiscreteMeasure) -> float:
    """Bounded-Lipschitz distance: sup over f with sup|f| <= 1, Lip(f) <= 1.

    Exact in dimension one (linear program over function values on the merged
    support).  In higher dimension the value is a certified lower bound from
    a finite family of clipped linear test functions.
    """
    a1, w1 = _as_atoms(m1)
    a2, w2 = _as_atoms(m2)
    if a1.shape[1] != a2.shape[1]:
        raise MeasureError("measures have different dimensions")
    if a1.shape[1] == 1:
        return _bl_exact_1d(a1[:, 0], w1, a2[:, 0], w2)
    return _bl_lower_bound(a1, w1, a2, w2)


def _bl_exact_1d(x1, w1, x2, w2) -> float:
    pts, inv = np.unique(np.concatenate([x1, x2]), return_inverse=True)
    n = len(pts)
    signed = np.zeros(n)
    np.add.at(signed, inv[: len(x1)], w1)
    np.add.at(signed, inv[len(x1):], -w2)
    if n == 1:
        return 0.0
    # maximize signed . f  s.t. |f_i| <= 1, |f_{i+1} - f_i| <= pts_{i+1} - pts_i
    gaps = np.diff(pts)
    n_pairs = n - 1
    rows, cols, data = [], [], []
    for i in range(n_pairs):
        rows.extend([2 * i, 2 * i, 2 * i + 1, 2 * i + 1])
        cols.extend([i + 1, i, i + 1, i])
        data.extend([1.0, -1.0, -1.0, 1.0])
    a_ub = csr_matrix((data, (rows, cols)), shape=(2 * n_pairs, n))
    b_ub = np.repeat(gaps, 2)
    res = linprog(
        -signed, A_ub=a_ub, b_ub=b_ub, bounds=(-1.0, 1.0), method="highs"
    )
    if not res.success:
        raise MeasureError(f"bounded-Lipschitz LP failed: {res.message}")
    return float(max(-res.fun, 0.0))


def _bl_lower_bound(a1, w1, a2, w2) -> float:
    d = a1.shape[1]
    directions = [np.eye(d)[j] for j in range(d)]
    directions.append(np.full(d, 1.0 / math.sqrt(d)))
    if d >= 2:
        alt = np.ones(d)
        alt[1::2] = -1.0
        directions.append(alt / np.linalg.norm(alt))
    best = 0.0
    proj_all = np.concatenate([a1, a2], axis=0)
    for v in directions:
        p1 = a1 @ v
        p2 = a2 @ v
        offsets = np.quantile(proj_all @ v, np.linspace(0.05, 0.95, 9))
        for b in offsets:
            f1 = np.clip(p1 - b, -1.0, 1.0)
            f2 = np.clip(p2 - b, -1.0, 1.0)
            best = max(best, abs(float(w1 @ f1 - w2 @ f2)))
    return best


def relaxed_moments(rec: ControlRecord, particle: int) -> dict:
    """First and second time-integrated moments of one particle's control."""
    if not (0 <= particle < rec.n_particles):
        raise MeasureError(f"particle index {particle} out of range")
    norms = rec.norms()[particle]
    first = float(np.sum(norms) * rec.dt)
    second = float(np.sum(norms * norms) * rec.dt)
    if not (math.isfinite(first) and math.isfinite(second)):
        raise MeasureError("control record has non-finite moments")
    return {"first": first, "second": second}


def occupation_measure(out) -> OccupationMeasure:
    """Uniform occupation measure over a controlled run's aligned triples."""
    if out.controls is None:
        raise MeasureError("occupation measure needs a controlled simulation output")
    n = out.states.values.shape[0]
    return OccupationMeasure(
        states=out.states,
        controls=out.controls,
        noise=out.noise,
        weights=np.full(n, 1.0 / n),
    )
