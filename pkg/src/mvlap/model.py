"""Coefficient models, initial conditions, and run configuration.

A coefficient model is a pair of functions (drift, diffusion) evaluated on
(time, state, measure features).  Markovian models see the current state as
an ``(..., d)`` array; path-dependent models see the whole grid prefix as an
``(..., k+1, d)`` array together with the grid spacing.  Both kinds see the
empirical measure through :class:`MeasureFeatures`.  All builtin families
broadcast over arbitrary leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

MARKOVIAN = "markovian"
PATH_DEPENDENT = "path_dependent"

_INIT_BRANCH = 0x494E


class ModelError(ValueError):
    """Raised for malformed model specs or incompatible dimensions."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MeasureFeatures:
    """Finite-dimensional view of an empirical measure.

    ``mean`` and ``second_moment`` are per-coordinate moments with shape
    ``(..., d)``, broadcastable against the state batch they were computed
    from.  ``support`` optionally carries the raw weighted sample for
    coefficient models that need more than moments.
    """

    mean: np.ndarray
    second_moment: np.ndarray
    support: Optional[np.ndarray] = None
    support_weights: Optional[np.ndarray] = None

    @property
    def moments(self) -> list[np.ndarray]:
        return [self.mean, self.second_moment]

    @staticmethod
    def from_states(x: np.ndarray, weights: Optional[np.ndarray] = None,
                    keep_support: bool = False) -> "MeasureFeatures":
        """Moments of the weighted sample ``x`` with shape ``(..., n, d)``.

        The reduction runs over the second-to-last axis in a fixed order, so
        repeated calls on the same sample are bit-identical.
        """
        x = np.asarray(x, dtype=float)
        if weights is None:
            mean = np.mean(x, axis=-2, keepdims=True)
            second = np.mean(x * x, axis=-2, keepdims=True)
        else:
            w = np.asarray(weights, dtype=float)[..., :, None]
            mean = np.sum(w * x, axis=-2, keepdims=True)
            second = np.sum(w * (x * x), axis=-2, keepdims=True)
        return MeasureFeatures(
            mean=mean,
            second_moment=second,
            support=x if keep_support else None,
            support_weights=weights if keep_support else None,
        )


@dataclass(frozen=True)
class CoefficientModel:
    """Drift/diffusion pair with its evaluation convention.

    ``drift(t, x, m) -> (..., d)`` and ``diffusion(t, x, m) -> (..., d, d1)``
    (anything broadcastable to that shape is accepted, e.g. a constant
    ``(d, d1)`` matrix).  Path-dependent models receive
    ``(t, prefix, m, dt)`` instead, with ``prefix`` of shape ``(..., k+1, d)``.
    """

    drift: Callable
    diffusion: Callable
    kind: str = MARKOVIAN
    name: str = "custom"
    params: dict = field(default_factory=dict)
    identity_diffusion: bool = False

    def __post_init__(self):
        if self.kind not in (MARKOVIAN, PATH_DEPENDENT):
            raise ModelError(f"unknown model kind {self.kind!r}")

    @property
    def path_dependent(self) -> bool:
        return self.kind == PATH_DEPENDENT

    def drift_at(self, t, x, m, prefix=None, dt=None):
        """Evaluate drift with the convention matching ``kind``."""
        if self.path_dependent:
            return self.drift(t, prefix, m, dt)
        return self.drift(t, x, m)

    def diffusion_at(self, t, x, m, prefix=None, dt=None):
        if self.path_dependent:
            return self.diffusion(t, prefix, m, dt)
        return self.diffusion(t, x, m)


# ---------------------------------------------------------------------------
# builtin families

def _constant_matrix(sigma0: float, d: int, d1: int) -> np.ndarray:
    sig = sigma0 * np.eye(d, d1)
    sig.setflags(write=False)
    return sig


def constant_diffusion(sigma0: float, d: int = 1, d1: int = 1) -> Callable:
    """Diffusion ``sigma0 * I`` as a ``(d, d1)`` constant."""
    sig = _constant_matrix(float(sigma0), d, d1)

    def diffusion(t, x, m):
        return sig

    return diffusion


def zero_drift(sigma0: float = 1.0, d: int = 1, d1: int = 1) -> CoefficientModel:
    """No drift, constant diffusion."""

    def drift(t, x, m):
        return np.zeros_like(np.asarray(x, dtype=float))

    return CoefficientModel(
        drift=drift,
        diffusion=constant_diffusion(sigma0, d, d1),
        name="ZeroDrift",
        params={"sigma0": float(sigma0), "d": d, "d1": d1},
        identity_diffusion=(sigma0 == 1.0 and d == d1),
    )


def mean_field_ou(a: float = 1.0, couple: float = 0.0, sigma0: float = 1.0,
                  d: int = 1, d1: int = 1) -> CoefficientModel:
    """Linear relaxation toward ``couple`` times the empirical mean.

    drift(x, m) = -a * (x - couple * mean(m)); constant diffusion sigma0.
    """
    a = float(a)
    couple = float(couple)

    def drift(t, x, m):
        return -a * (np.asarray(x, dtype=float) - couple * m.mean)

    return CoefficientModel(
        drift=drift,
        diffusion=constant_diffusion(sigma0, d, d1),
        name="MeanFieldOU",
        params={"a": a, "couple": couple, "sigma0": float(sigma0), "d": d, "d1": d1},
        identity_diffusion=(sigma0 == 1.0 and d == d1),
    )


def curie_weiss_double_well(beta: float = 1.0, kappa: float = 1.0,
                            sigma0: float = 1.0, d: int = 1, d1: int = 1) -> CoefficientModel:
    """Quartic double-well gradient plus attraction to the empirical mean.

    drift(x, m) = beta * (x - x^3) + kappa * (mean(m) - x), coordinatewise.
    """
    beta = float(beta)
    kappa = float(kappa)

    def drift(t, x, m):
        x = np.asarray(x, dtype=float)
        return beta * (x - x ** 3) + kappa * (m.mean - x)

    return CoefficientModel(
        drift=drift,
        diffusion=constant_diffusion(sigma0, d, d1),
        name="CurieWeissDoubleWell",
        params={"beta": beta, "kappa": kappa, "sigma0": float(sigma0), "d": d, "d1": d1},
        identity_diffusion=(sigma0 == 1.0 and d == d1),
    )


def prefix_value_at(prefix: np.ndarray, dt: float, s: float,
                    initial: Optional[np.ndarray] = None) -> np.ndarray:
    """Linear interpolation of a grid path prefix at time ``s``.

    ``prefix`` has shape ``(..., k+1, d)`` with entry j at time ``j*dt``.
    Times before 0 return the value at time 0 (constant pre-history), or
    ``initial`` when supplied.
    """
    prefix = np.asarray(prefix, dtype=float)
    k = prefix.shape[-2] - 1
    if s <= 0.0:
        if initial is not None:
            return np.asarray(initial, dtype=float)
        return prefix[..., 0, :]
    pos = s / dt
    j0 = min(int(math.floor(pos)), k)
    j1 = min(j0 + 1, k)
    frac = pos - j0
    if j1 == j0 or frac == 0.0:
        return prefix[..., j0, :]
    return (1.0 - frac) * prefix[..., j0, :] + frac * prefix[..., j1, :]


def delayed_linear(lag: float = 0.5, gain: float = 1.0, sigma0: float = 0.0,
                   d: int = 1, d1: int = 1) -> CoefficientModel:
    """Linear drift on the lagged state: drift(t, path) = -gain * path(t - lag).

    History before time 0 is the value at time 0.  ``lag = 0`` reduces to the
    Markovian drift ``-gain * x``.
    """
    lag = float(lag)
    gain = float(gain)
    if lag < 0:
        raise ModelError("lag must be nonnegative")
    sig = _constant_matrix(float(sigma0), d, d1)

    def drift(t, prefix, m, dt):
        return -gain * prefix_value_at(prefix, dt, t - lag)

    def diffusion(t, prefix, m, dt):
        return sig

    return CoefficientModel(
        drift=drift,
        diffusion=diffusion,
        kind=PATH_DEPENDENT,
        name="DelayedLinear",
        params={"lag": lag, "gain": gain, "sigma0": float(sigma0), "d": d, "d1": d1},
        identity_diffusion=(sigma0 == 1.0 and d == d1),
    )


_FAMILIES: dict[str, Callable[..., CoefficientModel]] = {
    "ZeroDrift": zero_drift,
    "MeanFieldOU": mean_field_ou,
    "CurieWeissDoubleWell": curie_weiss_double_well,
    "DelayedLinear": delayed_linear,
}

_FAMILY_PARAM_ALIASES = {"tau_del": "lag"}


def register_model(name: str, builder: Callable[..., CoefficientModel]) -> None:
    """Register a custom family for :func:`build_model`."""
    _FAMILIES[name] = builder


def build_model(spec: Mapping) -> CoefficientModel:
    """Construct a model from a flat spec, e.g. {"family": "ZeroDrift", "sigma0": 1}.

    Identical specs produce functionally identical models.
    """
    if "family" not in spec:
        raise ModelError("model spec needs a 'family' key")
    name = spec["family"]
    try:
        builder = _FAMILIES[name]
    except KeyError:
        raise ModelError(
            f"unknown model family {name!r}; known: {sorted(_FAMILIES)}"
        ) from None
    kwargs = {
        _FAMILY_PARAM_ALIASES.get(k, k): v for k, v in spec.items() if k != "family"
    }
    try:
        return builder(**kwargs)
    except TypeError as exc:
        raise ModelError(f"bad parameters for family {name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# initial conditions and run configuration

@dataclass(frozen=True)
class InitialCondition:
    """Deterministic point list or an i.i.d. sampler for particle starts."""

    mode: str  # "list" | "iid"
    points: Optional[np.ndarray] = None          # (N, d) for mode="list"
    sampler: Optional[Mapping] = None            # spec for mode="iid"
    sampler_fn: Optional[Callable] = None        # custom: (rng, n, d) -> (n, d)

    @staticmethod
    def deterministic(points: Sequence) -> "InitialCondition":
        pts = _readonly(np.atleast_2d(np.asarray(points, dtype=float)))
        return InitialCondition(mode="list", points=pts)

    @staticmethod
    def point(x: Sequence, ) -> "InitialCondition":
        """All particles start at the same point (an ``N``-fold point list)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return InitialCondition(mode="iid", sampler={"kind": "point", "x": x.tolist()})

    @staticmethod
    def iid_normal(mean: Sequence, std: float) -> "InitialCondition":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return InitialCondition(
            mode="iid", sampler={"kind": "normal", "mean": mean.tolist(), "std": float(std)}
        )

    @staticmethod
    def iid_custom(fn: Callable) -> "InitialCondition":
        return InitialCondition(mode="iid", sampler_fn=fn)

    @property
    def stochastic(self) -> bool:
        """Whether materialization consumes random draws."""
        if self.mode == "list":
            return False
        if self.sampler_fn is not None:
            return True
        kind = (self.sampler or {}).get("kind")
        return kind == "normal" and float(self.sampler.get("std", 0.0)) != 0.0

    def materialize(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        """Draw the (n, d) initial state block."""
        if self.mode == "list":
            pts = np.asarray(self.points, dtype=float)
            if pts.shape != (n, d):
                raise ModelError(
                    f"initial point list has shape {pts.shape}, expected {(n, d)}"
                )
            return pts.copy()
        if self.sampler_fn is not None:
            out = np.asarray(self.sampler_fn(rng, n, d), dtype=float)
            if out.shape != (n, d):
                raise ModelError("custom initial sampler returned wrong shape")
            return out
        kind = self.sampler["kind"]
        if kind == "point":
            x = np.asarray(self.sampler["x"], dtype=float).reshape(1, -1)
            if x.shape[1] != d:
                raise ModelError("initial point dimension mismatch")
            return np.repeat(x, n, axis=0)
        if kind == "normal":
            mean = np.asarray(self.sampler["mean"], dtype=float).reshape(1, -1)
            std = float(self.sampler["std"])
            if mean.shape[1] != d:
                raise ModelError("initial mean dimension mismatch")
            if std == 0.0:
                return np.repeat(mean, n, axis=0)
            return mean + std * rng.standard_normal((n, d))
        raise ModelError(f"unknown initial sampler kind {kind!r}")


@dataclass(frozen=True)
class SimConfig:
    """Discretization and ensemble configuration with a uniform time grid."""

    N: int
    d: int = 1
    d1: int = 1
    T: float = 1.0
    steps: int = 100
    initial: InitialCondition = field(
        default_factory=lambda: InitialCondition.point([0.0])
    )
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ModelError("N must be >= 1")
        if self.steps < 1:
            raise ModelError("steps must be >= 1")
        if not (self.T > 0):
            raise ModelError("T must be > 0")
        if self.d < 1 or self.d1 < 1:
            raise ModelError("d and d1 must be >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def initial_states(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if rng is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_INIT_BRANCH,))
            rng = np.random.Generator(np.random.Philox(ss))
        return self.initial.materialize(self.N, self.d, rng)


# ---------------------------------------------------------------------------
# coercivity validator

def validate_coercivity(model: CoefficientModel, radius: float, samples: int,
                        seed: int = 0, measure_draws: int = 4) -> dict:
    """Spot-check the quadratic growth bound on sampled states and measures.

    Samples states on shells of increasing radius and random moment features,
    and returns the smallest constant C with
    ``2 <b(x, m), x> + trace(sigma sigma^T)(x, m) <= C (1 + |x|^2)``
    over all sampled points.  Non-finite coefficient outputs are reported in
    ``violations`` rather than raised; a strong increase of the fitted
    constant across shells is reported as a ``ratio_growth`` violation.
    """
    if radius <= 0:
        raise ModelError("radius must be > 0")
    if samples < 1:
        raise ModelError("samples must be >= 1")
    d = int(model.params.get("d", 1))
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(0xC0,)))
    )
    shells = [0.25 * radius, 0.5 * radius, 0.75 * radius, radius]
    per_shell = max(1, samples // len(shells))
    violations: list[dict] = []
    shell_max: list[float] = []
    c_estimate = -math.inf
    for r in shells:
        best = -math.inf
        for _ in range(per_shell):
            u = rng.standard_normal(d)
            norm = np.linalg.norm(u)
            x = (r * u / norm) if norm > 0 else np.zeros(d)
            scale = rng.uniform(0.0, 1.0) ** (1.0 / d)
            x = scale * x
            mean = rng.uniform(-radius, radius, size=d)
            spread = rng.uniform(0.0, radius, size=d)
            feats = MeasureFeatures(mean=mean, second_moment=mean ** 2 + spread ** 2)
            try:
                if model.path_dependent:
                    prefix = np.repeat(x[None, :], 2, axis=0)
                    b = np.asarray(model.drift_at(0.0, x, feats, prefix=prefix, dt=1.0))
                    sig = np.asarray(
                        model.diffusion_at(0.0, x, feats, prefix=prefix, dt=1.0)
                    )
                else:
                    b = np.asarray(model.drift(0.0, x, feats))
                    sig = np.asarray(model.diffusion(0.0, x, feats))
            except Exception as exc:  # a crash counts as a violation, not an abort
                violations.append({"x": x.tolist(), "reason": f"evaluation error: {exc}"})
                continue
            sig = np.broadcast_to(sig, (d, sig.shape[-1]))
            lhs = 2.0 * float(np.dot(b.reshape(-1), x)) + float(np.sum(sig * sig))
            if not math.isfinite(lhs):
                violations.append({"x": x.tolist(), "reason": "non-finite coefficient output"})
                continue
            ratio = lhs / (1.0 + float(np.dot(x, x)))
            best = max(best, ratio)
            c_estimate = max(c_estimate, ratio)
        shell_max.append(best)
    finite = [v for v in shell_max if math.isfinite(v)]
    if len(finite) >= 2 and finite[0] > 0 and finite[-1] > 4.0 * max(finite[0], 1e-12):
        violations.append(
            {
                "reason": "ratio_growth",
                "detail": f"shell maxima {finite} grow with radius; bound looks non-coercive",
            }
        )
    return {"C_estimate": c_estimate, "violations": violations}
