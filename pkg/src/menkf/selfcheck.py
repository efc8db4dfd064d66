"""Built-in oracle identities for `menkf check`.

Fast, self-contained identities that pin the numerical core: closed-form
Kalman statistics against the ensemble analysis flow, the scalar Riccati
solution, mollifier normalization, the balance relation, energy conservation
of the conservative model, and time-reversibility of the splitting stepper.
Each check prints one ok/FAIL line; the count of failures is returned.
"""
from __future__ import annotations

import numpy as np

from .filters import analysis_flow, kalman_oracle, mollifier_weights
from .integrate import StepperConfig, step_strang
from .model import ModelParams, balance_h_from_x, energy_total, imbalance_norm
from .obsmodel import custom_operator


def _ensemble_stats(E):
    mean = E.mean(axis=0)
    dev = E - mean
    return mean, dev.T @ dev / (E.shape[0] - 1)


def run_selfcheck(emit=print) -> int:
    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        if not ok:
            failures += 1
        emit(f"{'ok  ' if ok else 'FAIL'} {name}{'  (' + detail + ')' if detail else ''}")

    rng = np.random.default_rng(42)

    # 1. balance relation: h derived from x is exactly balanced
    p = ModelParams()
    x = 8.0 + rng.standard_normal(p.n_grid)
    h = balance_h_from_x(x, p)
    z = np.concatenate([x, h, np.zeros(p.n_grid)])
    imb = imbalance_norm(z, p)
    report("balance relation roundtrip", imb < 1e-10, f"imbalance {imb:.2e}")

    # 2. conservative model: total energy drift over T = 1
    pc = ModelParams(delta=0.1, gamma=0.0, conservative=True)
    cfg = StepperConfig(dt=0.0025)
    zc = z[None, :].copy()
    e0 = energy_total(zc[0], pc)
    zc = step_strang(zc, pc, cfg, n_steps=400)
    drift = abs(energy_total(zc[0], pc) - e0) / abs(e0)
    report("conservative energy drift < 1e-6 over T=1", drift < 1e-6,
           f"relative drift {drift:.2e}")

    # 3. splitting stepper reversibility (gamma = 0, no forcing)
    pr = ModelParams(gamma=0.0)
    zf = step_strang(z[None, :], pr, StepperConfig(dt=0.0025))
    zb = step_strang(zf, pr, StepperConfig(dt=-0.0025))
    defect = np.max(np.abs(zb[0] - z))
    report("stepper time-reversibility < 1e-10", defect < 1e-10,
           f"defect {defect:.2e}")

    # 4. mollifier weights integrate to one per observation
    w = mollifier_weights(n_steps=85, dt=0.0025, obs_times=[0.05, 0.1, 0.2],
                          eps=0.025)
    sums = np.zeros(3)
    for k in range(85):
        entry = w.at_step(k)
        if entry is not None:
            jidx, alpha = entry
            sums[jidx] += 0.0025 * alpha
    err = np.max(np.abs(sums - 1.0))
    report("mollifier normalization (incl. clipped support)", err < 1e-12,
           f"max deviation {err:.2e}")

    # 5. analysis flow reproduces the Kalman oracle (linear, K = 1000)
    d, pdim, m = 6, 2, 8
    Hm = np.zeros((pdim, d))
    Hm[0, 1] = 1.0
    Hm[1, 4] = 1.0
    hop = custom_operator(Hm, n_grid=2)
    R = np.diag([0.5, 2.0])
    E = rng.standard_normal((m, d)) * 1.3 + 0.7
    y = np.array([0.3, -1.1])
    mean0, cov0 = _ensemble_stats(E)
    mref, cref = kalman_oracle(mean0, cov0, hop, R, y)
    Ea = analysis_flow(E, hop, R, y, taper=None, n_substeps=1000)
    ma, ca = _ensemble_stats(Ea)
    err = max(np.max(np.abs(ma - mref)), np.max(np.abs(ca - cref)))
    report("analysis flow matches Kalman oracle < 1e-5", err < 1e-5,
           f"max error {err:.2e}")

    # 6. scalar Riccati closed form along the flow
    p0, r, y0, m0 = 2.0, 0.5, 1.0, -1.0
    Es = np.array([[m0 - 1.0], [m0 + 1.0]])  # variance (m-1 divisor) = 2.0
    hop1 = custom_operator(np.eye(1), n_grid=1)
    s_half = 0.5
    Eh, snaps = analysis_flow(Es, hop1, np.array([[r]]), np.array([y0]),
                              n_substeps=1000, snapshots_at=[s_half])
    mean_h = snaps[s_half].mean()
    expected = y0 + (m0 - y0) * r / (r + s_half * p0)
    err = abs(mean_h - expected)
    report("scalar Riccati mean at s=1/2 < 1e-5", err < 1e-5,
           f"error {err:.2e}")

    return failures
