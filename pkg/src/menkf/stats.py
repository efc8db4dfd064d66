"""Ensemble statistics, multiplicative inflation, and covariance localization.

An ensemble is a plain (m, d) float array with members as rows; for the
slow-fast model d = 3*n_grid with the (x, h, u) layout of menkf.model.  The
state dimension is left generic so the same routines serve the small
linear-Gaussian verification problems.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "LocalizationSpec",
    "InflationSpec",
    "ensemble_mean",
    "ensemble_covariance",
    "inflate",
    "gaspari_cohn",
    "ring_distance",
    "localization_taper",
    "localized_covariance",
]


@dataclass(frozen=True)
class LocalizationSpec:
    """Covariance localization: Gaspari-Cohn taper with support 2*radius.

    radius is in grid-index units; radius = 0 with enabled=True degenerates
    to a same-grid-point-only (identity-pattern) taper.
    """

    radius: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"localization radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class InflationSpec:
    """Multiplicative deviation inflation z_i <- zbar + factor*(z_i - zbar).

    applies_to selects the component mask: "x" (slow field only, the
    default throughout) or "all".
    """

    factor: float = 1.0
    applies_to: str = "x"

    def __post_init__(self):
        if self.factor < 1.0:
            raise ValueError(f"inflation factor must be >= 1, got {self.factor}")
        if self.applies_to not in ("x", "all"):
            raise ValueError(
                f"applies_to must be 'x' or 'all', got {self.applies_to!r}"
            )


def ensemble_mean(E):
    """Arithmetic mean over members (fixed member order)."""
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] < 1:
        raise ValueError("ensemble must be a nonempty (m, d) array")
    return E.mean(axis=0)


def ensemble_covariance(E):
    """Empirical covariance P = (1/(m-1)) sum (z_i - zbar)(z_i - zbar)^T."""
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("covariance needs an (m, d) ensemble with m >= 2")
    dev = E - E.mean(axis=0)
    return dev.T @ dev / (E.shape[0] - 1)


def inflate(E, spec: InflationSpec, n_grid: int | None = None):
    """Scale ensemble deviations by spec.factor on the masked components.

    The mean is preserved; unmasked components pass through bit-unchanged.
    n_grid is required for the "x" mask to identify the slow block of the
    flat (x, h, u) layout.
    """
    E = np.asarray(E, dtype=float)
    if spec.factor == 1.0:
        return E.copy()
    out = E.copy()
    if spec.applies_to == "x":
        if n_grid is None:
            raise ValueError("n_grid is required for the 'x' inflation mask")
        block = out[:, :n_grid]
    else:
        block = out
    mean = block.mean(axis=0)
    block += (spec.factor - 1.0) * (block - mean)
    return out


def gaspari_cohn(r, c):
    """Fifth-order piecewise-rational Gaspari-Cohn correlation, support 2c.

    Accepts scalar or array distances r >= 0; c > 0 is the half-support.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance r must be nonnegative")
    if c <= 0:
        raise ValueError(f"support parameter c must be positive, got {c}")
    s = r / c
    out = np.zeros_like(s)
    inner = s <= 1.0
    si = s[inner]
    out[inner] = ((((-0.25 * si + 0.5) * si + 0.625) * si - 5.0 / 3.0) * si**2) + 1.0
    mid = (s > 1.0) & (s <= 2.0)
    sm = s[mid]
    out[mid] = (
        ((((sm / 12.0 - 0.5) * sm + 0.625) * sm + 5.0 / 3.0) * sm - 5.0) * sm
        + 4.0
        - 2.0 / (3.0 * sm)
    )
    return float(out) if out.ndim == 0 else out


def ring_distance(l1, l2, n):
    """Shortest periodic index distance min(|l-l'|, n-|l-l'|)."""
    d = np.abs(np.asarray(l1) - np.asarray(l2))
    return np.minimum(d, n - d)


@lru_cache(maxsize=None)
def _taper_cached(n_grid: int, radius: float, enabled: bool) -> np.ndarray:
    if not enabled:
        C = np.ones((3 * n_grid, 3 * n_grid))
    else:
        idx = np.arange(n_grid)
        dist = ring_distance(idx[:, None], idx[None, :], n_grid)
        if radius == 0.0:
            G = (dist == 0).astype(float)
        else:
            G = gaspari_cohn(dist, radius)
        # same grid-distance taper for every field pair (x,h,u) x (x,h,u)
        C = np.tile(G, (3, 3))
    C.flags.writeable = False
    return C


def localization_taper(n_grid: int, spec: LocalizationSpec) -> np.ndarray:
    """3n x 3n Gaspari-Cohn taper on ring distance, cached per (n, radius).

    The same grid-distance correlation applies to every (x, h, u) field
    pair; disabled localization yields the all-ones matrix.
    """
    return _taper_cached(n_grid, float(spec.radius), bool(spec.enabled))


def localized_covariance(P, C):
    """Schur (elementwise) product C o P; PSD for PSD factors."""
    P = np.asarray(P)
    C = np.asarray(C)
    if P.shape != C.shape:
        raise ValueError(f"shape mismatch: P {P.shape} vs C {C.shape}")
    return P * C
