"""Time-discretized engines for interacting, controlled, limit, and delay systems.

All engines share one explicit Euler-Maruyama core.  Per step the empirical
measure of the whole ensemble is reduced once (before any particle moves) and
fed to the coefficients; the step is otherwise data-parallel in the particle
axis.  Noise comes from counter-based per-particle streams, so outputs are
bit-reproducible from the configuration alone, independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .measures import ControlRecord, DiscreteMeasure, PathMeasure, wasserstein1
from .model import (
    MARKOVIAN,
    PATH_DEPENDENT,
    CoefficientModel,
    MeasureFeatures,
    SimConfig,
)

_NOISE_BRANCH = 0x4E4F
_REPLICATE_BRANCH = 0x5245
_INIT_BRANCH = 0x494E


class SimulationError(RuntimeError):
    pass


def _philox(seed: int, spawn_key: tuple) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def particle_rng(seed: int, stream_id: int) -> np.random.Generator:
    """Counter-based stream for one particle, keyed by (seed, stream id)."""
    return _philox(seed, (_NOISE_BRANCH, int(stream_id)))


def replicate_rng(seed: int, replicate: int, branch: int = _NOISE_BRANCH) -> np.random.Generator:
    """Counter-based stream for one Monte Carlo replicate."""
    return _philox(seed, (_REPLICATE_BRANCH, int(replicate), branch))


@dataclass(frozen=True)
class NoiseEnsemble:
    """Gaussian increments (N, steps, d1) with variance dt per coordinate."""

    increments: np.ndarray
    stream_ids: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        ids = np.asarray(self.stream_ids)
        if inc.ndim != 3:
            raise SimulationError("noise increments must have shape (N, steps, d1)")
        if ids.shape != (inc.shape[0],):
            raise SimulationError("stream_ids must have one entry per particle")
        inc.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "stream_ids", ids)

    def paths(self) -> np.ndarray:
        """Cumulative noise paths (N, steps+1, d1), starting at zero."""
        inc = self.increments
        out = np.zeros((inc.shape[0], inc.shape[1] + 1, inc.shape[2]))
        np.cumsum(inc, axis=1, out=out[:, 1:, :])
        return out

    @staticmethod
    def zeros(cfg: SimConfig) -> "NoiseEnsemble":
        return NoiseEnsemble(
            np.zeros((cfg.N, cfg.steps, cfg.d1)), np.arange(cfg.N)
        )


def draw_noise(cfg: SimConfig, stream_ids: Optional[Sequence[int]] = None) -> NoiseEnsemble:
    """Draw the per-particle Wiener increments for one run.

    Stream ``i`` is keyed by ``(cfg.seed, stream_ids[i])`` alone, so permuting
    the labels permutes the draws and nothing else changes.
    """
    ids = np.arange(cfg.N) if stream_ids is None else np.asarray(stream_ids)
    if ids.shape != (cfg.N,):
        raise SimulationError("stream_ids must have length N")
    root = np.sqrt(cfg.dt)
    inc = np.empty((cfg.N, cfg.steps, cfg.d1))
    for i, sid in enumerate(ids):
        inc[i] = particle_rng(cfg.seed, int(sid)).standard_normal((cfg.steps, cfg.d1))
    inc *= root
    return NoiseEnsemble(inc, ids)


@dataclass(frozen=True)
class PathEnsemble:
    """Discretized trajectories (N, steps+1, d) on a shared uniform grid."""

    values: np.ndarray
    grid: np.ndarray
    meta: SimConfig

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        g = np.asarray(self.grid, dtype=float)
        v.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "grid", g)


@dataclass(frozen=True)
class SimOutput:
    states: PathEnsemble
    noise: NoiseEnsemble
    controls: Optional[ControlRecord]
    blow_up: bool = False
    first_bad_step: Optional[int] = None
    model: Optional[CoefficientModel] = None

    def path_measure(self) -> PathMeasure:
        return PathMeasure.uniform(self.states)


@dataclass(frozen=True)
class McKeanVlasovResult:
    """Fixed-point marginal flow of the limit dynamics plus the final ensemble."""

    flow: list
    ensemble: PathEnsemble
    residual: float
    residual_trace: list
    converged: bool


def _policy_is_zero(policy) -> bool:
    return policy is None or bool(getattr(policy, "is_zero", False))


def _check_policy_binding(model: CoefficientModel, policy) -> None:
    if policy is None:
        return
    if getattr(policy, "requires_identity_diffusion", False) and not model.identity_diffusion:
        raise SimulationError(
            "gradient-field policy requires an identity diffusion matrix; "
            f"model {model.name!r} does not provide one"
        )


def _euler_core(model: CoefficientModel, x0: np.ndarray, noise: np.ndarray,
                dt: float, grid: np.ndarray, policy=None,
                frozen_features: Optional[list] = None,
                record_controls: bool = False):
    """Shared Euler-Maruyama loop over batched ensembles.

    ``x0``: (R, N, d); ``noise``: (R, N, steps, d1).  Returns
    (values (R, N, steps+1, d), controls or None, blow_up (R,) bool,
    first_bad (R,) int with -1 for clean runs).
    """
    r_b, n, d = x0.shape
    steps = noise.shape[2]
    d1 = noise.shape[3]
    values = np.empty((r_b, n, steps + 1, d))
    values[:, :, 0, :] = x0
    controls = np.zeros((r_b, n, steps, d1)) if record_controls else None
    alive = np.ones(r_b, dtype=bool)
    first_bad = np.full(r_b, -1, dtype=np.int64)
    use_control = policy is not None and not _policy_is_zero(policy)
    path_dep = model.path_dependent

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        x = values[:, :, 0, :].copy()
        for k in range(steps):
            t = float(grid[k])
            if frozen_features is not None:
                feats = frozen_features[k]
            else:
                feats = MeasureFeatures.from_states(x)
            prefix = values[:, :, : k + 1, :] if path_dep else None
            try:
                b = model.drift_at(t, x, feats, prefix=prefix, dt=dt)
                sig = model.diffusion_at(t, x, feats, prefix=prefix, dt=dt)
            except Exception as exc:
                raise SimulationError(
                    f"coefficient evaluation failed at step {k} (t={t}): {exc}"
                ) from exc
            dw = noise[:, :, k, :]
            if use_control or record_controls:
                try:
                    u = np.asarray(policy.evaluate(t, x, feats), dtype=float)
                except Exception as exc:
                    raise SimulationError(
                        f"policy evaluation failed at step {k} (t={t}): {exc}"
                    ) from exc
                u = np.broadcast_to(u, (r_b, n, d1))
                if record_controls:
                    controls[:, :, k, :] = u
            if use_control:
                eff = u * dt + dw
            else:
                eff = dw
            x = x + np.asarray(b) * dt + np.einsum("...ij,...j->...i",
                                                   np.asarray(sig), eff)
            values[:, :, k + 1, :] = x
            if not np.all(np.isfinite(x)):
                ok = np.all(np.isfinite(x.reshape(r_b, -1)), axis=1)
                newly_dead = alive & ~ok
                if np.any(newly_dead):
                    first_bad[newly_dead] = k + 1
                    alive &= ok

    for e in np.nonzero(first_bad >= 0)[0]:
        bad = first_bad[e]
        values[e, :, bad:, :] = np.nan
        if controls is not None and bad < steps:
            controls[e, :, bad:, :] = np.nan
    return values, controls, first_bad >= 0, first_bad


def _materialize_initial(cfg: SimConfig) -> np.ndarray:
    return cfg.initial_states()


def simulate_uncontrolled(cfg: SimConfig, model: CoefficientModel) -> SimOutput:
    """Interacting ensemble under the raw dynamics.

    Step: X_{k+1} = X_k + b(t_k, X_k, mu_k) dt + sigma(t_k, X_k, mu_k) dW_k,
    with mu_k the empirical measure of all particles at step k.
    """
    if model.path_dependent:
        raise SimulationError("use simulate_delay for path-dependent models")
    return _simulate(cfg, model, policy=None, noise_override=None)


def simulate_controlled(cfg: SimConfig, model: CoefficientModel, policy,
                        noise_override: Optional[NoiseEnsemble] = None) -> SimOutput:
    """Controlled ensemble: the step gains sigma(.) u_i(t_k) dt.

    ``u_i`` is evaluated from the policy at (t_k, state, empirical features)
    and the realized values are recorded.  ``noise_override`` (including an
    all-zeros ensemble) replaces the internal draws; this is a test hook.
    """
    if model.path_dependent:
        raise SimulationError("use simulate_delay for path-dependent models")
    return _simulate(cfg, model, policy=policy, noise_override=noise_override,
                     record_controls=True)


def simulate_delay(cfg: SimConfig, model: CoefficientModel,
                   policy=None) -> SimOutput:
    """Ensemble driven by path-dependent coefficients.

    The drift/diffusion receive the already-computed grid prefix by
    reference; requesting times beyond the prefix is a contract violation
    and aborts with the offending step in the message.
    """
    if not model.path_dependent:
        raise SimulationError("simulate_delay needs a path-dependent model")
    return _simulate(cfg, model, policy=policy, noise_override=None,
                     record_controls=policy is not None)


def _simulate(cfg: SimConfig, model: CoefficientModel, policy,
              noise_override: Optional[NoiseEnsemble] = None,
              record_controls: bool = False) -> SimOutput:
    _check_policy_binding(model, policy)
    noise = noise_override if noise_override is not None else draw_noise(cfg)
    if noise.increments.shape != (cfg.N, cfg.steps, cfg.d1):
        raise SimulationError(
            f"noise shape {noise.increments.shape} does not match config "
            f"{(cfg.N, cfg.steps, cfg.d1)}"
        )
    x0 = _materialize_initial(cfg)
    grid = cfg.grid
    values, controls, blown, first_bad = _euler_core(
        model,
        x0[None, :, :],
        noise.increments[None, :, :, :],
        cfg.dt,
        grid,
        policy=policy,
        record_controls=record_controls,
    )
    rec = ControlRecord(controls[0], cfg.dt) if record_controls else None
    return SimOutput(
        states=PathEnsemble(values[0], grid, cfg),
        noise=noise,
        controls=rec,
        blow_up=bool(blown[0]),
        first_bad_step=int(first_bad[0]) if blown[0] else None,
        model=model,
    )


def simulate_mckean_vlasov(cfg: SimConfig, model: CoefficientModel,
                           picard_iters: int) -> McKeanVlasovResult:
    """Fixed-point iteration for the limit marginal flow.

    ``cfg.N`` is reinterpreted as the sample size M.  Iterate k simulates M
    independent copies driven by the frozen flow of iterate k-1 (the first
    iterate freezes the features of the initial distribution); the residual
    is the largest order-one Wasserstein gap between consecutive flows over
    the grid.  Noise is shared across iterates, so the map is deterministic.
    """
    if picard_iters < 1:
        raise SimulationError("picard_iters must be >= 1")
    if model.path_dependent:
        raise SimulationError("limit iteration supports Markovian models only")
    m_samples = cfg.N
    noise = draw_noise(cfg)
    x0 = _materialize_initial(cfg)
    grid = cfg.grid

    init_feats = MeasureFeatures.from_states(x0[None, :, :])
    frozen = [init_feats] * cfg.steps
    flow: list = []
    values = None
    residual = np.inf
    residual_trace: list = []
    for it in range(picard_iters):
        values, _, blown, _ = _euler_core(
            model, x0[None, :, :], noise.increments[None, :, :, :],
            cfg.dt, grid, policy=None, frozen_features=frozen,
        )
        if blown[0]:
            raise SimulationError("limit iteration blew up; refine the model or grid")
        new_flow = [DiscreteMeasure.uniform(values[0, :, k, :])
                    for k in range(cfg.steps + 1)]
        if flow:
            residual = max(
                wasserstein1(a, b) for a, b in zip(new_flow, flow)
            )
            residual_trace.append(float(residual))
        flow = new_flow
        frozen = [
            MeasureFeatures.from_states(values[0, :, k, :][None, :, :])
            for k in range(cfg.steps)
        ]
    converged = True
    if len(residual_trace) >= 3:
        tail = residual_trace[-3:]
        converged = not (tail[0] <= tail[1] <= tail[2])
    ensemble = PathEnsemble(values[0], grid, cfg)
    return McKeanVlasovResult(
        flow=flow,
        ensemble=ensemble,
        residual=float(residual) if residual_trace else 0.0,
        residual_trace=residual_trace,
        converged=converged,
    )
