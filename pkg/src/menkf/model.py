"""Slow-fast Lorenz-96 model: tendencies, energies, and balance diagnostics.

The state is stored flat as the concatenation (x_1..x_n, h_1..h_n, u_1..u_n)
with u = dh/dt, so every integrator and covariance routine sees one
first-order vector of length 3n.  All functions accept either a single state
of shape (3n,) or an ensemble batch of shape (m, 3n); periodic index
arithmetic acts on the last axis in both cases.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ModelParams",
    "split_state",
    "join_state",
    "lorenz96_tendency",
    "advective_tendency",
    "coupling_tendency",
    "slow_tendency",
    "slowfast_tendency",
    "energy_lorenz",
    "energy_wave",
    "energy_coupling",
    "energy_total",
    "balance_matrix",
    "balance_x_from_h",
    "balance_h_from_x",
    "imbalance",
    "imbalance_norm",
]


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the slow-fast Lorenz-96 system.

    Parameters
    ----------
    n_grid : int
        Number of grid points on the periodic ring (>= 4 so the
        x_{l-2}, h_{l+1} stencils are well defined).
    eps : float
        Fast time scale of the wave subsystem.
    alpha : float
        Wave-dispersion constant in the discrete Laplacian term.
    delta : float
        Coupling strength between the slow field and the waves, in [0, 1].
    gamma : float
        Artificial damping rate applied to the wave velocity u.
    forcing : float
        Constant forcing of the slow field (the classic 8).
    conservative : bool
        If True, drop the -x_l + F terms from the slow equation, giving
        the pure wave-advection system whose total energy is conserved.
        Used by conservation tests only.
    """

    n_grid: int = 40
    eps: float = 0.0025
    alpha: float = 0.5
    delta: float = 0.1
    gamma: float = 0.0
    forcing: float = 8.0
    conservative: bool = False

    def __post_init__(self):
        if self.n_grid < 4:
            raise ValueError(f"n_grid must be >= 4, got {self.n_grid}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")


def split_state(z, n):
    """Split a flat state (or batch) into its (x, h, u) views."""
    z = np.asarray(z)
    if z.shape[-1] != 3 * n:
        raise ValueError(f"state has last dimension {z.shape[-1]}, expected {3 * n}")
    return z[..., :n], z[..., n : 2 * n], z[..., 2 * n :]


def join_state(x, h, u):
    """Concatenate (x, h, u) back into a flat state along the last axis."""
    return np.concatenate([x, h, u], axis=-1)


def advective_tendency(x):
    """Energy-neutral advection term (x_{l+1} - x_{l-2}) x_{l-1}."""
    x = np.asarray(x, dtype=float)
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1)


def coupling_tendency(x, h):
    """Wave-coupled advection term x_{l-1} h_{l+1} - x_{l-2} h_{l-1}."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    return np.roll(x, 1, axis=-1) * np.roll(h, -1, axis=-1) - np.roll(
        x, 2, axis=-1
    ) * np.roll(h, 1, axis=-1)


def lorenz96_tendency(x, forcing):
    """Classic Lorenz-96 tendency dx_l/dt = (x_{l+1} - x_{l-2}) x_{l-1} - x_l + F.

    Indexing is periodic; requires at least 4 grid points.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise ValueError(f"need at least 4 grid points, got {x.shape[-1]}")
    return advective_tendency(x) - x + forcing


def slow_tendency(x, h, p: ModelParams):
    """Tendency of the slow field with the wave height h held frozen.

    This is the x-equation of the coupled system and the nonlinear stage of
    the split integrator: (1-delta)*advection + delta*coupling, plus the
    -x + F terms unless the conservative (pure wave-advection) variant is
    selected.
    """
    dx = (1.0 - p.delta) * advective_tendency(x) + p.delta * coupling_tendency(x, h)
    if not p.conservative:
        dx = dx - x + p.forcing
    return dx


def slowfast_tendency(z, p: ModelParams):
    """Full tendency of the coupled slow-fast system.

    dx_l/dt = (1-d)(x_{l+1}-x_{l-2})x_{l-1} + d(x_{l-1}h_{l+1} - x_{l-2}h_{l-1})
              - x_l + F
    dh_l/dt = u_l
    du_l/dt = [x_l - h_l + a^2(h_{l+1} - 2h_l + h_{l-1})] / eps^2 - g*u_l
    """
    x, h, u = split_state(np.asarray(z, dtype=float), p.n_grid)
    dx = slow_tendency(x, h, p)
    dh = u
    du = (x - balance_x_from_h(h, p)) / p.eps**2 - p.gamma * u
    return join_state(dx, dh, du)


def energy_lorenz(x):
    """Slow-field energy (1/2) sum x_l^2."""
    x = np.asarray(x, dtype=float)
    return 0.5 * np.sum(x**2, axis=-1)


def energy_wave(h, u, p: ModelParams):
    """Wave energy (eps^2/2) sum u^2 + (1/2) sum [h^2 + a^2 (h_{l+1}-h_l)^2]."""
    h = np.asarray(h, dtype=float)
    u = np.asarray(u, dtype=float)
    dh = np.roll(h, -1, axis=-1) - h
    return 0.5 * p.eps**2 * np.sum(u**2, axis=-1) + 0.5 * np.sum(
        h**2 + p.alpha**2 * dh**2, axis=-1
    )


def energy_coupling(x, h, p: ModelParams):
    """Coupling energy -delta sum h_l x_l."""
    return -p.delta * np.sum(np.asarray(h) * np.asarray(x), axis=-1)


def energy_total(z, p: ModelParams):
    """Total energy H = (delta-1) E_Lorenz + delta E_wave + E_coupling.

    H is a conserved quantity of the pure wave-advection system
    (conservative=True, gamma=0) for every delta in [0, 1].
    """
    x, h, u = split_state(np.asarray(z, dtype=float), p.n_grid)
    return (
        (p.delta - 1.0) * energy_lorenz(x)
        + p.delta * energy_wave(h, u, p)
        + energy_coupling(x, h, p)
    )


@lru_cache(maxsize=None)
def balance_matrix(n: int, alpha: float) -> np.ndarray:
    """Dense periodic operator A = I - alpha^2 * Laplacian (symmetric PD).

    The result is cached per (n, alpha) and marked read-only.
    """
    A = (1.0 + 2.0 * alpha**2) * np.eye(n)
    idx = np.arange(n)
    A[idx, (idx + 1) % n] -= alpha**2
    A[idx, (idx - 1) % n] -= alpha**2
    A.flags.writeable = False
    return A


def balance_x_from_h(h, p: ModelParams):
    """Balanced slow field x_l = h_l - alpha^2 (h_{l+1} - 2 h_l + h_{l-1})."""
    h = np.asarray(h, dtype=float)
    lap = np.roll(h, -1, axis=-1) - 2.0 * h + np.roll(h, 1, axis=-1)
    return h - p.alpha**2 * lap


def balance_h_from_x(x, p: ModelParams):
    """Wave height solving the balance relation (I - alpha^2 Lap) h = x.

    Direct dense solve of the periodic system; exact inverse of
    balance_x_from_h up to round-off.
    """
    x = np.asarray(x, dtype=float)
    A = balance_matrix(p.n_grid, p.alpha)
    if x.ndim == 1:
        return np.linalg.solve(A, x)
    return np.linalg.solve(A, x.T).T


def imbalance(z, p: ModelParams):
    """Pointwise imbalance Delta_l = x_l - h_l + alpha^2 (h_{l+1} - 2h_l + h_{l-1})."""
    x, h, _ = split_state(np.asarray(z, dtype=float), p.n_grid)
    return x - balance_x_from_h(h, p)


def imbalance_norm(z, p: ModelParams) -> float:
    """Euclidean norm of the imbalance, concatenated over ensemble members."""
    return float(np.linalg.norm(imbalance(z, p).ravel()))
