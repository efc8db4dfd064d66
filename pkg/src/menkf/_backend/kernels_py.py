"""NumPy implementations of the hot numerical kernels.

These are the reference semantics for the compiled Cython kernels in
``_kernels.pyx``; the two backends implement the same iteration schemes
step-for-step so trajectories agree to floating-point rounding.  The
backend selector in ``menkf._backend`` picks the compiled module when it
is importable and falls back to this one otherwise.

Conventions shared by both backends:

* all floating arrays are float64 and C-contiguous,
* ensembles are (m, d) with members as rows, d = 3*n_grid,
* observation operators arrive flattened into their nonzero structure
  ``(rows, cols, vals)`` plus a diagonal inverse observation covariance,
* precomputed step matrices arrive already transposed so every product
  is a plain ``A @ B`` on C-ordered data.
"""
from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def _slow_rhs(X, H, delta, forcing, conservative):
    """Slow-field tendency with h frozen, for an (m, n) batch."""
    adv = (np.roll(X, -1, axis=1) - np.roll(X, 2, axis=1)) * np.roll(X, 1, axis=1)
    coup = np.roll(X, 1, axis=1) * np.roll(H, -1, axis=1) - np.roll(
        X, 2, axis=1
    ) * np.roll(H, 1, axis=1)
    out = (1.0 - delta) * adv + delta * coup
    if not conservative:
        out = out - X + forcing
    return out


def _slow_nonlinear(X, H, delta):
    """Advection + coupling only (the fixed-point part of the midpoint step)."""
    adv = (np.roll(X, -1, axis=1) - np.roll(X, 2, axis=1)) * np.roll(X, 1, axis=1)
    coup = np.roll(X, 1, axis=1) * np.roll(H, -1, axis=1) - np.roll(
        X, 2, axis=1
    ) * np.roll(H, 1, axis=1)
    return (1.0 - delta) * adv + delta * coup


def tendency_batch(Z, n, eps, alpha, delta, gamma, forcing, conservative):
    """Full slow-fast tendency for an (m, 3n) batch."""
    X, H, U = Z[:, :n], Z[:, n : 2 * n], Z[:, 2 * n :]
    dX = _slow_rhs(X, H, delta, forcing, conservative)
    lap = np.roll(H, -1, axis=1) - 2.0 * H + np.roll(H, 1, axis=1)
    dU = (X - H + alpha * alpha * lap) / (eps * eps) - gamma * U
    return np.concatenate([dX, U, dU], axis=1)


def step_strang_batch(
    Z, M1T, M2T, FR, n, dt, delta, forcing, conservative, fp_tol, fp_max_iter, n_steps=1
):
    """Strang-split step(s): fast half / implicit-midpoint slow / fast half.

    M1T, M2T are the transposed half-step matrices of the linear (h, u)
    subsystem; FR is an optional (m, 3n) forcing rate applied in the middle
    stage (held fixed over all n_steps, so multi-stepping is only meaningful
    with FR = None or a constant term).

    Returns (Z_new, status, residual); status 1 means the slow-stage fixed
    point did not reach fp_tol within fp_max_iter iterations.
    """
    Z = np.ascontiguousarray(Z, dtype=float)
    resid = 0.0
    for _ in range(n_steps):
        X = Z[:, :n]
        W = Z[:, n:] @ M1T + X @ M2T
        Hh = W[:, :n]
        gx = FR[:, :n] if FR is not None else None

        rhs = _slow_rhs(X, Hh, delta, forcing, conservative)
        if gx is not None:
            rhs = rhs + gx
        Xn = X + dt * rhs
        converged = False
        for _ in range(fp_max_iter):
            rhs = _slow_rhs(0.5 * (X + Xn), Hh, delta, forcing, conservative)
            if gx is not None:
                rhs = rhs + gx
            Xnext = X + dt * rhs
            resid = float(np.max(np.abs(Xnext - Xn)))
            Xn = Xnext
            if resid < fp_tol:
                converged = True
                break
        if not converged:
            return Z, 1, resid

        if FR is not None:
            W = W + dt * FR[:, n:]
        W = W @ M1T + Xn @ M2T
        Z = np.ascontiguousarray(np.concatenate([Xn, W], axis=1))
    return Z, 0, resid


def step_midpoint_batch(Z, S1T, S2T, S2xT, FR, n, delta, fp_tol, fp_max_iter, n_steps=1):
    """Implicit midpoint step(s) with the stiff linear part solved directly.

    The converged iterate satisfies z' = z + dt*(f((z+z')/2) + FR) exactly:
    S1T/S2T are the transposed matrices of the linearly-implicit fixed-point
    map z' = S1 z + S2 (N(z_mid) + FR) whose iteration only involves the
    mild nonlinearity N (advection + coupling), and S2xT is the slice of
    S2T acting on the slow rows where N lives.
    """
    Z = np.ascontiguousarray(Z, dtype=float)
    resid = 0.0
    for _ in range(n_steps):
        base = Z @ S1T
        if FR is not None:
            base = base + FR @ S2T
        Zn = base + _slow_nonlinear(Z[:, :n], Z[:, n : 2 * n], delta) @ S2xT
        converged = False
        for _ in range(fp_max_iter):
            Zmid = 0.5 * (Z + Zn)
            Znext = base + _slow_nonlinear(Zmid[:, :n], Zmid[:, n : 2 * n], delta) @ S2xT
            resid = float(np.max(np.abs(Znext - Zn)))
            Zn = Znext
            if resid < fp_tol:
                converged = True
                break
        if not converged:
            return Z, 1, resid
        Z = Zn
    return np.ascontiguousarray(Z), 0, resid


def _dense_from_structure(rows, cols, vals, p, d):
    Hm = np.zeros((p, d))
    Hm[rows, cols] = vals
    return Hm


def analysis_increment(X, rows, cols, vals, rinv, a_sum, yw, Csub):
    """Localized Kalman-gradient increment D_i = -(C o P) H^T g_i.

    g_i = 0.5 * R^{-1} (a_sum*(H z_i + H zbar) - 2 yw) is the observation-space
    potential gradient; a_sum and yw fold an arbitrary weighted combination of
    observations into one evaluation (a_sum=1, yw=y recovers a single one).
    P is the ensemble covariance of X (divisor m-1) recomputed here, tapered
    entrywise through the localization columns Csub[:, s] = C[:, cols[s]]
    (pass None for no localization).
    """
    m, d = X.shape
    p = rinv.shape[0]
    Hm = _dense_from_structure(rows, cols, vals, p, d)
    W = X @ Hm.T
    wbar = W.mean(axis=0)
    V = (0.5 * rinv) * (a_sum * (W + wbar) - 2.0 * yw)

    zbar = X.mean(axis=0)
    dev = X - zbar
    Q = dev.T @ (dev[:, cols] * vals) / (m - 1)
    if Csub is not None:
        Q = Q * Csub
    return -(V[:, rows] @ Q.T)


def analysis_flow(X, rows, cols, vals, rinv, y, Csub, n_substeps, ds):
    """Integrate the ensemble analysis flow with the explicit midpoint rule.

    Each right-hand-side evaluation recomputes the (tapered) covariance from
    the current ensemble.  Returns (X_final, status); status 1 flags a
    non-finite state (substep too large / filter divergence).
    """
    X = np.ascontiguousarray(X, dtype=float)
    for _ in range(n_substeps):
        D1 = analysis_increment(X, rows, cols, vals, rinv, 1.0, y, Csub)
        Xs = X + (0.5 * ds) * D1
        D2 = analysis_increment(Xs, rows, cols, vals, rinv, 1.0, y, Csub)
        X = X + ds * D2
        if not np.isfinite(X).all():
            return X, 1
    return X, 0
