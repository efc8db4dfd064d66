"""Linear observation operators, synthetic observations, and the ensemble
potential gradient that drives every analysis in this package.

Operators are stored dense (p x 3n, zero columns on unobserved components)
together with their nonzero structure (rows, cols, vals), which is what the
fast kernels consume.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ObservationOperator",
    "ObservationStream",
    "make_observation_operator",
    "custom_operator",
    "apply_H",
    "generate_observations",
    "obs_cost",
    "potential_gradient",
]

OBS_KINDS = ("x_every_second", "mixed_every_second", "custom_rows")


@dataclass(frozen=True)
class ObservationOperator:
    """A linear measurement map y = H z on the flat (x, h, u) state."""

    kind: str
    matrix: np.ndarray
    n_grid: int
    rows: np.ndarray = field(repr=False, default=None)
    cols: np.ndarray = field(repr=False, default=None)
    vals: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        H = np.ascontiguousarray(self.matrix, dtype=float)
        if H.ndim != 2:
            raise ValueError("observation matrix must be 2-D")
        if H.shape[0] > H.shape[1]:
            raise ValueError("more observation rows than state entries")
        if not np.all(np.isfinite(H)):
            raise ValueError("observation matrix has non-finite entries")
        r, c = np.nonzero(H)
        object.__setattr__(self, "matrix", H)
        object.__setattr__(self, "rows", np.ascontiguousarray(r, dtype=np.intp))
        object.__setattr__(self, "cols", np.ascontiguousarray(c, dtype=np.intp))
        object.__setattr__(self, "vals", np.ascontiguousarray(H[r, c], dtype=float))
        for a in (self.matrix, self.rows, self.cols, self.vals):
            a.flags.writeable = False

    @property
    def p(self) -> int:
        return self.matrix.shape[0]


def _observed_points(n_grid: int, parity: str) -> np.ndarray:
    # "every second grid point": even 1-based grid points 2, 4, ..., n by
    # default, i.e. 0-based indices 1, 3, ..., n-1
    if parity == "even":
        return np.arange(1, n_grid, 2)
    if parity == "odd":
        return np.arange(0, n_grid, 2)
    raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")


def make_observation_operator(kind: str, n_grid: int, parity: str = "even"):
    """Build one of the two named operators on n_grid points.

    x_every_second observes x at every second grid point (p = n/2);
    mixed_every_second observes (x + h)/2 at the same points.
    """
    if kind not in ("x_every_second", "mixed_every_second"):
        raise ValueError(f"unknown operator kind {kind!r}")
    if n_grid % 2:
        raise ValueError("every-second operators need an even n_grid")
    pts = _observed_points(n_grid, parity)
    H = np.zeros((pts.size, 3 * n_grid))
    if kind == "x_every_second":
        H[np.arange(pts.size), pts] = 1.0
    else:
        H[np.arange(pts.size), pts] = 0.5
        H[np.arange(pts.size), n_grid + pts] = 0.5
    return ObservationOperator(kind=kind, matrix=H, n_grid=n_grid)


def custom_operator(matrix, n_grid: int) -> ObservationOperator:
    """Wrap an arbitrary dense matrix (used by the verification problems)."""
    return ObservationOperator(kind="custom_rows", matrix=np.asarray(matrix, float),
                               n_grid=n_grid)


def apply_H(hop: ObservationOperator, z):
    """Apply the measurement map to a state (3n,) or batch (m, 3n)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != hop.matrix.shape[1]:
        raise ValueError(
            f"state dimension {z.shape[-1]} does not match operator "
            f"columns {hop.matrix.shape[1]}"
        )
    return z @ hop.matrix.T


@dataclass(frozen=True)
class ObservationStream:
    """Synthetic observations y(t_j), j = 1..M, with their error covariance."""

    times: np.ndarray
    values: np.ndarray
    R: np.ndarray
    seed: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("observation times must be strictly increasing")
        R = np.asarray(self.R, dtype=float)
        if not np.allclose(R, R.T):
            raise ValueError("R must be symmetric")
        if self.values.shape != (t.size, R.shape[0]):
            raise ValueError("observation values shape mismatch")

    @property
    def rinv_diag(self):
        """Diagonal of R^{-1} when R is diagonal, else None (generic path)."""
        R = np.asarray(self.R)
        if np.count_nonzero(R - np.diag(np.diagonal(R))) == 0:
            return 1.0 / np.diagonal(R)
        return None


def generate_observations(truth_samples, hop: ObservationOperator, R, dt_obs: float,
                          seed: int) -> ObservationStream:
    """Observe a truth trajectory at t_j = j*dt_obs, j = 1..M, with N(0,R) noise.

    truth_samples holds the truth states at exactly those times, in order.
    Noise uses numpy's seeded PCG64 generator (recorded in run manifests).
    """
    Z = np.atleast_2d(np.asarray(truth_samples, dtype=float))
    R = np.asarray(R, dtype=float)
    M = Z.shape[0]
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal((M, R.shape[0])) @ np.linalg.cholesky(R).T
    values = apply_H(hop, Z) + eta
    times = dt_obs * np.arange(1, M + 1)
    return ObservationStream(times=times, values=values, R=R, seed=seed)


def obs_cost(hop: ObservationOperator, R, y, z) -> float:
    """Observational cost S = 0.5 (Hz - y)^T R^{-1} (Hz - y)."""
    innov = apply_H(hop, z) - np.asarray(y, dtype=float)
    return float(0.5 * innov @ np.linalg.solve(np.asarray(R, float), innov))


def potential_gradient(E, hop: ObservationOperator, R, y):
    """Gradient of the ensemble potential V for each member.

    V(X) = (m/2)[S(zbar) + (1/m) sum_i S(z_i)] differentiates to the closed
    form grad_i = 0.5 H^T R^{-1} (H z_i + H zbar - 2 y); returns an (m, d)
    array of per-member gradients.
    """
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("potential gradient needs an (m, d) ensemble, m >= 2")
    W = apply_H(hop, E)
    arg = W + W.mean(axis=0) - 2.0 * np.asarray(y, dtype=float)
    V = 0.5 * np.linalg.solve(np.asarray(R, float), arg.T).T
    return V @ hop.matrix
