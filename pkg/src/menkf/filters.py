"""Analysis kernels and the assimilation drivers.

Three drivers share one analysis ingredient, the localized Kalman gradient
-P_tilde grad_i V: the standard EnKF applies it as an instantaneous
pseudo-time flow at each observation time, the mollified filter (MEnKF)
injects it into the model dynamics as a hat-weighted forcing spread over the
observation window, and the IAU variant re-integrates each window with the
flow's increment distributed by the same hat weights.  A closed-form Kalman
update is kept alongside as the verification oracle.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels as K
from .integrate import StepConvergenceError, StepperConfig, step_ensemble
from .model import ModelParams, imbalance_norm
from .obsmodel import ObservationOperator, ObservationStream
from .stats import InflationSpec, LocalizationSpec, inflate, localization_taper

__all__ = [
    "FilterConfig",
    "AnalysisDivergedError",
    "RunResult",
    "hat",
    "MollifierWeights",
    "mollifier_weights",
    "kalman_oracle",
    "analysis_flow",
    "run_enkf_standard",
    "run_menkf",
    "run_iau_enkf",
    "run_filter",
]

FILTER_SCHEMES = ("enkf_standard", "menkf", "iau_enkf")
DIVERGENCE_THRESHOLD = 1e6


@dataclass(frozen=True)
class FilterConfig:
    """Assimilation configuration shared by all drivers.

    mollifier_eps defaults to dt_obs/2 (one observation in support per
    step); analysis_substeps is the pseudo-time resolution of the standard
    analysis flow; model_gamma is the artificial wave damping used by the
    damped-model filter variants (the truth always runs undamped).
    """

    scheme: str
    dt: float
    dt_obs: float
    mollifier_eps: float | None = None
    localization: LocalizationSpec = field(default_factory=LocalizationSpec)
    inflation: InflationSpec = field(default_factory=InflationSpec)
    analysis_substeps: int = 200
    model_gamma: float = 0.0

    def __post_init__(self):
        if self.scheme not in FILTER_SCHEMES:
            raise ValueError(f"scheme must be one of {FILTER_SCHEMES}, got {self.scheme!r}")
        if self.dt <= 0 or self.dt_obs <= 0:
            raise ValueError("dt and dt_obs must be positive")
        ratio = self.dt_obs / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"dt_obs must be an integer multiple of dt (got ratio {ratio})"
            )
        if self.mollifier_eps is None:
            object.__setattr__(self, "mollifier_eps", 0.5 * self.dt_obs)
        if self.mollifier_eps <= 0:
            raise ValueError("mollifier_eps must be positive")
        if self.analysis_substeps < 1:
            raise ValueError("analysis_substeps must be >= 1")
        if self.model_gamma < 0:
            raise ValueError("model_gamma must be nonnegative")

    @property
    def steps_per_cycle(self) -> int:
        return round(self.dt_obs / self.dt)


class AnalysisDivergedError(RuntimeError):
    """The analysis flow produced a non-finite state."""


def hat(s):
    """Standard hat function psi(s) = 1 - |s| for |s| <= 1, else 0."""
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(s, dtype=float)))


@dataclass(frozen=True)
class MollifierWeights:
    """Hat-mollifier weights alpha_j^k on the model-step grid.

    step_obs[k] is None or a pair (obs indices, weights) of the observations
    with nonzero weight at step k; c[j] is the per-observation normalization
    constant making dt * sum_k alpha_j^k = 1 even when the horizon clips the
    support of a boundary observation.
    """

    n_steps: int
    dt: float
    eps: float
    step_obs: list
    c: np.ndarray

    def at_step(self, k: int):
        return self.step_obs[k]


def mollifier_weights(n_steps: int, dt: float, obs_times, eps: float) -> MollifierWeights:
    """Weights alpha_j^k = (c_j/eps) psi((t_k - t_j)/eps), normalized per obs.

    Observation times must lie on the model-step grid t_k = k*dt.  Hat
    values below 1e-12 (support-edge round-off) are clipped to zero so the
    weight support is enumerated exactly; the normalization runs over the
    surviving steps, so boundary observations with clipped support still
    integrate to one.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    if eps <= 0:
        raise ValueError("mollifier eps must be positive")
    per_step = [None] * n_steps
    acc = [None] * n_steps
    c = np.empty(obs_times.size)
    e = eps / dt
    for j, tj in enumerate(obs_times):
        r = round(tj / dt)
        if abs(r * dt - tj) > 1e-6 * dt:
            raise ValueError(
                f"observation time {tj} does not lie on the step grid (dt={dt})"
            )
        k_lo = max(0, math.floor(r - e))
        k_hi = min(n_steps - 1, math.ceil(r + e))
        ks = np.arange(k_lo, k_hi + 1)
        psi = hat((ks - r) / e)
        psi[psi < 1e-12] = 0.0
        keep = psi > 0
        ks, psi = ks[keep], psi[keep]
        if ks.size == 0:
            raise ValueError(f"observation {j} has no model step inside its support")
        total = psi.sum()
        c[j] = eps / (dt * total)
        alpha = psi / (dt * total)
        for k, a in zip(ks, alpha):
            if acc[k] is None:
                acc[k] = ([], [])
            acc[k][0].append(j)
            acc[k][1].append(a)
    for k, entry in enumerate(acc):
        if entry is not None:
            per_step[k] = (np.array(entry[0], dtype=np.intp), np.array(entry[1]))
    return MollifierWeights(n_steps=n_steps, dt=dt, eps=eps, step_obs=per_step, c=c)


def _obs_matrix(hop):
    return hop.matrix if isinstance(hop, ObservationOperator) else np.asarray(hop, float)


def kalman_oracle(mean, cov, hop, R, y):
    """Closed-form Kalman update in the stable gain form.

    K = P H^T (H P H^T + R)^{-1}; mean_a = mean + K(y - H mean);
    cov_a = (I - K H) P.  Serves as the verification target for the
    pseudo-time analysis flow.
    """
    H = _obs_matrix(hop)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    y = np.asarray(y, dtype=float)
    S = H @ cov @ H.T + np.asarray(R, dtype=float)
    gain = np.linalg.solve(S.T, H @ cov.T).T
    mean_a = mean + gain @ (y - H @ mean)
    cov_a = cov - gain @ H @ cov
    return mean_a, cov_a


@dataclass(frozen=True)
class _ObsContext:
    """Precomputed per-run observation quantities for the fast kernel path.

    Falls back to dense NumPy formulas when R is not diagonal (the
    experiments always use diagonal R; the dense path serves the generic
    verification problems).
    """

    hop: ObservationOperator
    R: np.ndarray
    rinv_diag: np.ndarray | None
    taper: np.ndarray | None
    csub: np.ndarray | None

    @classmethod
    def build(cls, hop, R, taper):
        R = np.asarray(R, dtype=float)
        diag = None
        if R.ndim == 2 and np.count_nonzero(R - np.diag(np.diagonal(R))) == 0:
            diag = np.ascontiguousarray(1.0 / np.diagonal(R))
        csub = None
        if taper is not None and diag is not None:
            csub = np.ascontiguousarray(taper[:, hop.cols])
        return cls(hop=hop, R=R, rinv_diag=diag, taper=taper, csub=csub)

    def increment(self, E, a_sum, yw):
        """Forcing -P_tilde * sum_j alpha_j grad_i V_j folded into (a_sum, yw)."""
        if self.rinv_diag is not None:
            return K.analysis_increment(
                E, self.hop.rows, self.hop.cols, self.hop.vals,
                self.rinv_diag, a_sum, np.ascontiguousarray(yw), self.csub,
            )
        return _dense_increment(E, self.hop.matrix, self.R, a_sum, yw, self.taper)


def _dense_increment(E, H, R, a_sum, yw, taper):
    m = E.shape[0]
    W = E @ H.T
    arg = a_sum * (W + W.mean(axis=0)) - 2.0 * np.asarray(yw, dtype=float)
    V = 0.5 * np.linalg.solve(R, arg.T).T
    G = V @ H
    dev = E - E.mean(axis=0)
    P = dev.T @ dev / (m - 1)
    if taper is not None:
        P = P * taper
    return -(G @ P)


def analysis_flow(E, hop, R, y, taper=None, n_substeps=200, snapshots_at=None):
    """Integrate the ensemble analysis flow dz_i/ds = -P_tilde grad_i V, s in [0,1].

    The (optionally tapered) covariance is recomputed from the current
    ensemble at every right-hand-side evaluation; pseudo-time integration is
    the explicit midpoint rule with step 1/n_substeps.  With snapshots_at
    (fractions of s that are multiples of 1/n_substeps) also returns a dict
    of intermediate ensembles, leaving the trajectory unchanged.
    """
    E = np.ascontiguousarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("analysis flow needs an (m, d) ensemble with m >= 2")
    if not isinstance(hop, ObservationOperator):
        hop = ObservationOperator(kind="custom_rows", matrix=np.asarray(hop, float),
                                  n_grid=E.shape[1] // 3 or 1)
    ctx = _ObsContext.build(hop, R, taper)
    y = np.ascontiguousarray(y, dtype=float)
    ds = 1.0 / n_substeps

    marks = []
    if snapshots_at:
        for s in sorted(snapshots_at):
            ksub = s * n_substeps
            if abs(ksub - round(ksub)) > 1e-9:
                raise ValueError(f"snapshot s={s} is not a multiple of 1/n_substeps")
            marks.append((int(round(ksub)), s))
        if marks and marks[-1][0] > n_substeps:
            raise ValueError("snapshots beyond s = 1 are not part of the flow")

    snaps = {}
    done = 0
    for ksub, s in marks:
        E = _flow_segment(E, ctx, y, ksub - done, ds)
        snaps[s] = E.copy()
        done = ksub
    E = _flow_segment(E, ctx, y, n_substeps - done, ds)
    return (E, snaps) if snapshots_at else E


def _flow_segment(E, ctx: _ObsContext, y, n_substeps, ds):
    if n_substeps == 0:
        return E
    if ctx.rinv_diag is not None:
        hop = ctx.hop
        E, status = K.analysis_flow(
            E, hop.rows, hop.cols, hop.vals, ctx.rinv_diag, y, ctx.csub,
            n_substeps, ds,
        )
        if status:
            raise AnalysisDivergedError(
                "non-finite ensemble during the analysis flow"
            )
        return E
    for _ in range(n_substeps):
        D1 = _dense_increment(E, ctx.hop.matrix, ctx.R, 1.0, y, ctx.taper)
        Es = E + (0.5 * ds) * D1
        D2 = _dense_increment(Es, ctx.hop.matrix, ctx.R, 1.0, y, ctx.taper)
        E = E + ds * D2
        if not np.isfinite(E).all():
            raise AnalysisDivergedError("non-finite ensemble during the analysis flow")
    return E


@dataclass
class RunResult:
    """Per-run assimilation record.

    Cycle series cover the completed cycles only (a diverged run is
    truncated at the cycle that tripped the guard); the imbalance series is
    per model step.  RMSE entries are NaN when no truth was supplied;
    summary fields and the config echo are filled by experiment.run_twin.
    """

    scheme: str
    cycle_times: np.ndarray
    rmse_x: np.ndarray
    rmse_h: np.ndarray
    imbalance_cycle: np.ndarray
    analysis_means: np.ndarray
    step_times: np.ndarray
    imbalance_steps: np.ndarray
    diverged: bool
    diverged_cycle: int | None
    walltime: float = 0.0
    config: dict = field(default_factory=dict)
    summary_rmse_x: float = math.nan
    summary_rmse_h: float = math.nan

    @property
    def n_cycles(self) -> int:
        return self.cycle_times.size


class _RunLog:
    """Shared bookkeeping for the three drivers."""

    def __init__(self, scheme, p, cfg, n_cycles, n_steps, truth_at_cycles, d):
        self.scheme = scheme
        self.p = p
        self.cfg = cfg
        self.truth = truth_at_cycles
        self.cycle_times = np.empty(n_cycles)
        self.rmse_x = np.full(n_cycles, np.nan)
        self.rmse_h = np.full(n_cycles, np.nan)
        self.imb_cycle = np.empty(n_cycles)
        self.means = np.empty((n_cycles, d))
        self.step_times = np.empty(n_steps)
        self.imb_steps = np.empty(n_steps)
        self.n_cycles_done = 0
        self.n_steps_done = 0
        self.diverged = False
        self.diverged_cycle = None

    def record_step(self, t, E):
        self.step_times[self.n_steps_done] = t
        self.imb_steps[self.n_steps_done] = imbalance_norm(E, self.p)
        self.n_steps_done += 1

    def record_cycle(self, j, t, E):
        n = self.p.n_grid
        mean = E.mean(axis=0)
        self.cycle_times[j] = t
        self.means[j] = mean
        self.imb_cycle[j] = imbalance_norm(E, self.p)
        if self.truth is not None:
            err = mean - self.truth[j]
            self.rmse_x[j] = np.sqrt(np.mean(err[:n] ** 2))
            self.rmse_h[j] = np.sqrt(np.mean(err[n : 2 * n] ** 2))
        self.n_cycles_done = j + 1

    def mark_diverged(self, cycle_1based):
        self.diverged = True
        self.diverged_cycle = cycle_1based

    def result(self, walltime) -> RunResult:
        c = self.n_cycles_done
        s = self.n_steps_done
        return RunResult(
            scheme=self.scheme,
            cycle_times=self.cycle_times[:c].copy(),
            rmse_x=self.rmse_x[:c].copy(),
            rmse_h=self.rmse_h[:c].copy(),
            imbalance_cycle=self.imb_cycle[:c].copy(),
            analysis_means=self.means[:c].copy(),
            step_times=self.step_times[:s].copy(),
            imbalance_steps=self.imb_steps[:s].copy(),
            diverged=self.diverged,
            diverged_cycle=self.diverged_cycle,
            walltime=walltime,
        )


def _blown_up(E) -> bool:
    return (not np.isfinite(E).all()) or np.max(np.abs(E)) > DIVERGENCE_THRESHOLD


def _common_setup(p, cfg, stream, E0):
    # copy: E0 may be shared across runs (the sweep caches it)
    E = np.atleast_2d(np.array(E0, dtype=float, order="C"))
    if E.shape[0] < 2:
        raise ValueError("drivers need an ensemble with m >= 2 members")
    taper = (
        localization_taper(p.n_grid, cfg.localization)
        if cfg.localization.enabled
        else None
    )
    times = np.asarray(stream.times, dtype=float)
    return E, taper, times, time.perf_counter()


def run_enkf_standard(p: ModelParams, stepper: StepperConfig, hop, stream: ObservationStream,
                      E0, cfg: FilterConfig, truth_at_cycles=None) -> RunResult:
    """Standard EnKF: forecast over each window, instantaneous analysis at t_j.

    Inflation follows every model step; the analysis is the localized
    pseudo-time flow applied in one shot at observation time, which is what
    makes its increments impulsive and balance-breaking.
    """
    E, taper, times, t0 = _common_setup(p, cfg, stream, E0)
    spc = cfg.steps_per_cycle
    M = times.size
    log = _RunLog("enkf_standard", p, cfg, M, M * spc, truth_at_cycles, E.shape[1])
    if M == 0:
        return log.result(time.perf_counter() - t0)
    ctx = _ObsContext.build(hop, stream.R, taper)

    for j in range(M):
        t_base = times[j] - cfg.dt_obs
        for k in range(spc):
            try:
                E = step_ensemble(E, p, stepper)
            except StepConvergenceError:
                log.mark_diverged(j + 1)
                break
            E = inflate(E, cfg.inflation, p.n_grid)
            log.record_step(t_base + (k + 1) * cfg.dt, E)
            if _blown_up(E):
                log.mark_diverged(j + 1)
                break
        if log.diverged:
            break
        try:
            E = _flow_segment(
                E, ctx, np.ascontiguousarray(stream.values[j]),
                cfg.analysis_substeps, 1.0 / cfg.analysis_substeps,
            )
        except AnalysisDivergedError:
            log.mark_diverged(j + 1)
            break
        if _blown_up(E):
            log.mark_diverged(j + 1)
            break
        log.record_cycle(j, times[j], E)
    return log.result(time.perf_counter() - t0)


def run_menkf(p: ModelParams, stepper: StepperConfig, hop, stream: ObservationStream,
              E0, cfg: FilterConfig, truth_at_cycles=None) -> RunResult:
    """Mollified EnKF: hat-weighted analysis forcing inside the model dynamics.

    One time loop; at each step the (localized) covariance and potential
    gradients are evaluated once from the step-start snapshot and enter the
    stepper as an explicit forcing rate, weighted by the mollifier.  The run
    extends eps beyond the last observation so every observation receives
    its full hat support.
    """
    E, taper, times, t0 = _common_setup(p, cfg, stream, E0)
    spc = cfg.steps_per_cycle
    M = times.size
    tail = math.ceil(cfg.mollifier_eps / cfg.dt - 1e-9)
    n_steps = M * spc + tail if M else 0
    log = _RunLog("menkf", p, cfg, M, n_steps, truth_at_cycles, E.shape[1])
    if M == 0:
        return log.result(time.perf_counter() - t0)
    weights = mollifier_weights(n_steps, cfg.dt, times, cfg.mollifier_eps)
    ctx = _ObsContext.build(hop, stream.R, taper)
    Y = np.asarray(stream.values, dtype=float)

    for k in range(n_steps):
        wk = weights.at_step(k)
        if wk is None:
            forcing = None
        else:
            jidx, alpha = wk
            a_sum = float(alpha.sum())
            yw = alpha @ Y[jidx]
            forcing = ctx.increment(E, a_sum, yw)
        try:
            E = step_ensemble(E, p, stepper, forcing_rate=forcing)
        except StepConvergenceError:
            log.mark_diverged(min(M, k // spc + 1))
            break
        E = inflate(E, cfg.inflation, p.n_grid)
        log.record_step((k + 1) * cfg.dt, E)
        if _blown_up(E):
            log.mark_diverged(min(M, k // spc + 1))
            break
        if (k + 1) % spc == 0 and (k + 1) // spc <= M:
            j = (k + 1) // spc - 1
            log.record_cycle(j, times[j], E)
    return log.result(time.perf_counter() - t0)


def run_iau_enkf(p: ModelParams, stepper: StepperConfig, hop, stream: ObservationStream,
                 E0, cfg: FilterConfig, truth_at_cycles=None) -> RunResult:
    """Incremental analysis update: re-integrate each window with the
    analysis increment injected as a hat-weighted forcing.

    Window j is centered on t_j.  The ensemble is forecast from the window
    start to t_j, the standard localized analysis flow provides per-member
    increments there, and the window is then re-integrated from its start
    with the increment applied at rate g_k (hat weights, dt*sum g_k = 1).
    Each window is therefore integrated twice up to analysis time.
    """
    E, taper, times, t0 = _common_setup(p, cfg, stream, E0)
    spc = cfg.steps_per_cycle
    if spc % 2:
        raise ValueError("IAU needs an even number of steps per cycle")
    if abs(cfg.mollifier_eps - 0.5 * cfg.dt_obs) > 1e-12 * cfg.dt_obs:
        raise ValueError("IAU windows require mollifier_eps = dt_obs/2")
    half = spc // 2
    M = times.size
    n_steps = half + M * spc if M else 0
    log = _RunLog("iau_enkf", p, cfg, M, n_steps, truth_at_cycles, E.shape[1])
    if M == 0:
        return log.result(time.perf_counter() - t0)
    ctx = _ObsContext.build(hop, stream.R, taper)

    # hat weights over the window's local steps, same normalization as the
    # mollifier: nonzero at the spc-1 interior steps, dt * sum g = 1
    offs = np.arange(spc) - half
    g = hat(offs / half)
    g = g / (cfg.dt * g.sum())

    def forecast(Estart, t_base, n, record):
        Ecur = Estart
        for k in range(n):
            Ecur = step_ensemble(Ecur, p, stepper)
            Ecur = inflate(Ecur, cfg.inflation, p.n_grid)
            if record:
                log.record_step(t_base + (k + 1) * cfg.dt, Ecur)
            if _blown_up(Ecur):
                return Ecur, True
        return Ecur, False

    # initial plain segment from t = 0 to the first window start
    E, blew = forecast(E, 0.0, half, record=True)
    if blew:
        log.mark_diverged(1)
        return log.result(time.perf_counter() - t0)

    for j in range(M):
        t_start = times[j] - half * cfg.dt
        Ef, blew = forecast(E, t_start, half, record=False)
        if blew:
            log.mark_diverged(j + 1)
            break
        try:
            Ea = _flow_segment(
                Ef, ctx, np.ascontiguousarray(stream.values[j]),
                cfg.analysis_substeps, 1.0 / cfg.analysis_substeps,
            )
        except AnalysisDivergedError:
            log.mark_diverged(j + 1)
            break
        D = Ea - Ef
        apply_forcing = bool(np.any(D))
        for k in range(spc):
            forcing = g[k] * D if (apply_forcing and g[k] != 0.0) else None
            try:
                E = step_ensemble(E, p, stepper, forcing_rate=forcing)
            except StepConvergenceError:
                log.mark_diverged(j + 1)
                break
            E = inflate(E, cfg.inflation, p.n_grid)
            log.record_step(t_start + (k + 1) * cfg.dt, E)
            if _blown_up(E):
                log.mark_diverged(j + 1)
                break
            if k + 1 == half:
                log.record_cycle(j, times[j], E)
        if log.diverged:
            break
    return log.result(time.perf_counter() - t0)


_DRIVERS = {
    "enkf_standard": run_enkf_standard,
    "menkf": run_menkf,
    "iau_enkf": run_iau_enkf,
}


def run_filter(p, stepper, hop, stream, E0, cfg: FilterConfig,
               truth_at_cycles=None) -> RunResult:
    """Dispatch to the driver selected by cfg.scheme."""
    return _DRIVERS[cfg.scheme](p, stepper, hop, stream, E0, cfg, truth_at_cycles)
