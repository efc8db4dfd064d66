"""Analysis kernels (hat mollifier, Kalman oracle, pseudo-time flow) and the
three assimilation drivers."""
import numpy as np
import pytest

from menkf.filters import (
    AnalysisDivergedError,
    FilterConfig,
    analysis_flow,
    hat,
    kalman_oracle,
    mollifier_weights,
    run_enkf_standard,
    run_filter,
    run_iau_enkf,
    run_menkf,
)
from menkf.integrate import StepperConfig, step_ensemble
from menkf.model import ModelParams, balance_h_from_x
from menkf.obsmodel import (
    ObservationStream,
    apply_H,
    custom_operator,
    make_observation_operator,
)
from menkf.stats import InflationSpec, LocalizationSpec, ensemble_covariance

DT = 0.0025
DT_OBS = 0.05


def steady_ensemble(n, m, spread, seed=0):
    """Members c_i * (1, ..., 1, 1, ..., 1, 0, ..., 0): each is a steady state
    of the conservative model, so the forecast map is the identity and the
    drivers act as pure analysis schemes on a rank-one ensemble."""
    rng = np.random.default_rng(seed)
    v = np.zeros(3 * n)
    v[: 2 * n] = 1.0
    c = 1.0 + spread * rng.standard_normal(m)
    return c[:, None] * v, v


def quiet_filter(scheme, **kw):
    kw.setdefault("dt", DT)
    kw.setdefault("dt_obs", DT_OBS)
    kw.setdefault("localization", LocalizationSpec(enabled=False))
    return FilterConfig(scheme=scheme, **kw)


class TestHat:
    def test_pointwise(self):
        assert hat(0.0) == 1.0
        assert hat(1.0) == 0.0
        assert hat(-1.0) == 0.0
        assert hat(0.5) == 0.5
        assert hat(-0.25) == 0.75
        assert hat(2.0) == 0.0

    def test_vectorized(self):
        s = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        assert np.array_equal(hat(s), [0.0, 0.5, 1.0, 0.5, 0.0])


class TestMollifierWeights:
    def test_interior_support_is_19_steps(self):
        w = mollifier_weights(60, DT, [0.05], eps=0.025)
        nonzero = [k for k in range(60) if w.at_step(k) is not None]
        assert nonzero == list(range(11, 30))
        # symmetric around the peak at t_k = t_j
        alphas = {k: w.at_step(k)[1][0] for k in nonzero}
        assert all(alphas[20 - i] == alphas[20 + i] for i in range(1, 10))
        assert alphas[20] == max(alphas.values())

    def test_per_observation_normalization(self):
        # the third observation's support is clipped by the horizon; its
        # normalization constant absorbs the clipping
        times = [0.05, 0.10, 0.15]
        w = mollifier_weights(61, DT, times, eps=0.025)
        sums = np.zeros(3)
        for k in range(61):
            wk = w.at_step(k)
            if wk is not None:
                jidx, alpha = wk
                sums[jidx] += alpha
        assert np.allclose(DT * sums, 1.0, rtol=0, atol=1e-14)
        assert w.c[0] == pytest.approx(1.0)
        assert w.c[2] > w.c[0]

    def test_obs_spacing_support_gives_constant_total_weight(self):
        # eps = dt_obs: adjacent hats overlap and sum to a constant 1/eps
        # at every interior step
        times = [0.05, 0.10, 0.15]
        w = mollifier_weights(80, DT, times, eps=0.05)
        totals = []
        for k in range(20, 61):
            jidx, alpha = w.at_step(k)
            assert jidx.size <= 2
            totals.append(alpha.sum())
        assert np.allclose(totals, 1.0 / 0.05, rtol=1e-12, atol=0)

    def test_off_grid_time_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            mollifier_weights(60, DT, [0.0513], eps=0.025)

    def test_observation_beyond_horizon_rejected(self):
        with pytest.raises(ValueError, match="support"):
            mollifier_weights(10, DT, [1.0], eps=0.025)

    def test_invalid_eps(self):
        with pytest.raises(ValueError, match="eps"):
            mollifier_weights(60, DT, [0.05], eps=0.0)


class TestKalmanOracle:
    def test_scalar_example(self):
        mean_a, cov_a = kalman_oracle(
            np.array([0.0]), np.array([[1.0]]), np.array([[1.0]]),
            np.array([[1.0]]), np.array([2.0]),
        )
        assert mean_a[0] == pytest.approx(1.0, abs=1e-15)
        assert cov_a[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_two_half_weight_updates_equal_one(self, rng):
        d, q = 5, 3
        A = rng.standard_normal((d, d))
        cov = A @ A.T + d * np.eye(d)
        H = rng.standard_normal((q, d))
        B = rng.standard_normal((q, q))
        R = B @ B.T + q * np.eye(q)
        mean = rng.standard_normal(d)
        y = rng.standard_normal(q)
        m1, c1 = kalman_oracle(mean, cov, H, R, y)
        m2, c2 = kalman_oracle(*kalman_oracle(mean, cov, H, 2 * R, y), H, 2 * R, y)
        assert np.allclose(m2, m1, rtol=1e-12, atol=1e-13)
        assert np.allclose(c2, c1, rtol=1e-12, atol=1e-13)

    def test_ten_fold_updates_equal_one(self, rng):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        H = np.array([[1.0, 0.0]])
        R = np.array([[0.5]])
        mean = np.array([0.3, -0.2])
        y = np.array([1.0])
        m1, c1 = kalman_oracle(mean, cov, H, R, y)
        mk, ck = mean, cov
        for _ in range(10):
            mk, ck = kalman_oracle(mk, ck, H, 10 * R, y)
        assert np.allclose(mk, m1, rtol=1e-12, atol=1e-12)
        assert np.allclose(ck, c1, rtol=1e-12, atol=1e-12)


class TestAnalysisFlow:
    def test_zero_gradient_leaves_ensemble_unchanged(self, rng):
        E = rng.standard_normal((4, 6))
        H = np.zeros((2, 6))
        H[0, 0] = 1.0
        H[1, 2] = 1.0
        y = np.array([0.7, -1.3])
        E[:, 0] = y[0]
        E[:, 2] = y[1]
        out = analysis_flow(E, H, np.eye(2), y, n_substeps=50)
        assert np.array_equal(out, E)

    @pytest.mark.parametrize("diag_R", [True, False])
    def test_mean_and_covariance_match_kalman(self, rng, diag_R):
        # linear-Gaussian setup, m > state dimension, no localization: the
        # flow transports the empirical mean/covariance along the same
        # Riccati equation the closed form solves
        d, q, m = 12, 3, 16
        E = rng.standard_normal((m, d)) + 2.0
        H = rng.standard_normal((q, d))
        if diag_R:
            R = np.diag(rng.uniform(0.5, 2.0, size=q))
        else:
            B = rng.standard_normal((q, q))
            R = B @ B.T + q * np.eye(q)
        y = rng.standard_normal(q)
        mean_a, cov_a = kalman_oracle(E.mean(axis=0), ensemble_covariance(E), H, R, y)
        out = analysis_flow(E, H, R, y, n_substeps=1000)
        err_m = np.linalg.norm(out.mean(axis=0) - mean_a) / np.linalg.norm(mean_a)
        err_c = np.linalg.norm(ensemble_covariance(out) - cov_a) / np.linalg.norm(cov_a)
        assert err_m < 1e-5
        assert err_c < 1e-4

    def test_riccati_inverse_grows_linearly(self, rng):
        d, q, m = 8, 2, 40
        E = rng.standard_normal((m, d))
        H = rng.standard_normal((q, d))
        R = np.diag([0.5, 2.0])
        y = rng.standard_normal(q)
        A = H.T @ np.linalg.solve(R, H)
        P0inv = np.linalg.inv(ensemble_covariance(E))
        out, snaps = analysis_flow(E, H, R, y, n_substeps=1000,
                                   snapshots_at=[0.25, 0.5, 1.0])
        for s, Es in snaps.items():
            Pinv = np.linalg.inv(ensemble_covariance(Es))
            defect = np.linalg.norm(Pinv - P0inv - s * A)
            assert defect <= 1e-4 * np.linalg.norm(A)

    def test_scalar_two_member_closed_form(self):
        # dz_i/ds = -P/2 (z_i + zbar - 2y) with P0 = 2, y = 2:
        # P(s) = P0/(1 + P0 s), zbar(s) = y + (zbar0 - y)/(1 + P0 s),
        # dev_i(s) = dev_i(0) sqrt(P(s)/P0)
        E = np.array([[0.0], [2.0]])
        y = np.array([2.0])
        out = analysis_flow(E, np.array([[1.0]]), np.eye(1), y, n_substeps=1000)
        mean = 2.0 - 1.0 / 3.0
        dev = np.sqrt(1.0 / 3.0)
        assert np.allclose(out[:, 0], [mean - dev, mean + dev], rtol=0, atol=1e-6)

    def test_all_ones_taper_matches_untapered(self, rng):
        d, q, m = 9, 2, 6
        E = rng.standard_normal((m, d))
        H = rng.standard_normal((q, d))
        R = np.diag([1.0, 2.0])
        y = rng.standard_normal(q)
        a = analysis_flow(E, H, R, y, taper=None, n_substeps=40)
        b = analysis_flow(E, H, R, y, taper=np.ones((d, d)), n_substeps=40)
        assert np.array_equal(a, b)

    def test_snapshots_do_not_perturb_the_flow(self, rng):
        E = rng.standard_normal((5, 6))
        H = rng.standard_normal((2, 6))
        R = np.eye(2)
        y = rng.standard_normal(2)
        plain = analysis_flow(E, H, R, y, n_substeps=100)
        out, snaps = analysis_flow(E, H, R, y, n_substeps=100,
                                   snapshots_at=[0.25, 1.0])
        assert np.array_equal(out, plain)
        assert set(snaps) == {0.25, 1.0}
        assert np.array_equal(snaps[1.0], out)

    def test_snapshot_validation(self, rng):
        E = rng.standard_normal((4, 3))
        H = np.eye(3)
        with pytest.raises(ValueError, match="multiple"):
            analysis_flow(E, H, np.eye(3), np.zeros(3), n_substeps=10,
                          snapshots_at=[0.33])
        with pytest.raises(ValueError, match="beyond"):
            analysis_flow(E, H, np.eye(3), np.zeros(3), n_substeps=10,
                          snapshots_at=[1.5])

    def test_single_member_rejected(self):
        with pytest.raises(ValueError, match="m >= 2"):
            analysis_flow(np.zeros((1, 3)), np.eye(3), np.eye(3), np.zeros(3))

    def test_blowup_raises(self):
        # explicit midpoint with |ds * P / R| >> 2 is violently unstable
        E = np.array([[-1e4], [1e4]])
        with pytest.raises(AnalysisDivergedError):
            analysis_flow(E, np.array([[1.0]]), np.eye(1), np.zeros(1),
                          n_substeps=5)


class TestFilterConfig:
    def test_eps_defaults_to_half_window(self):
        cfg = FilterConfig(scheme="menkf", dt=DT, dt_obs=DT_OBS)
        assert cfg.mollifier_eps == pytest.approx(0.025)
        assert cfg.steps_per_cycle == 20

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(scheme="3dvar"),
            dict(dt=-0.1),
            dict(dt_obs=0.0),
            dict(dt=0.003),
            dict(mollifier_eps=-0.01),
            dict(analysis_substeps=0),
            dict(model_gamma=-1.0),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        base = dict(scheme="menkf", dt=DT, dt_obs=DT_OBS)
        with pytest.raises(ValueError):
            FilterConfig(**{**base, **kwargs})


def tiny_stream(values, R, dt_obs=DT_OBS):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    times = dt_obs * np.arange(1, values.shape[0] + 1)
    return ObservationStream(times=times, values=values, R=R, seed=0)


class TestEnkfStandard:
    def test_single_cycle_matches_kalman_oracle(self, rng):
        # near-zero dt makes the slow-fast forecast a no-op, so one cycle is
        # a pure analysis on an arbitrary (m > 3n) balanced ensemble
        n, m = 4, 16
        p = ModelParams(n_grid=n)
        dt = 1e-9
        x = 8.0 + 0.3 * rng.standard_normal((m, n))
        h = balance_h_from_x(x, p)
        E0 = np.concatenate([x, h, np.zeros((m, n))], axis=1)
        hop = make_observation_operator("x_every_second", n)
        R = 0.25 * np.eye(2)
        y = apply_H(hop, E0.mean(axis=0)) + 0.5
        cfg = quiet_filter("enkf_standard", dt=dt, dt_obs=20 * dt,
                           analysis_substeps=1000)
        res = run_enkf_standard(p, StepperConfig(dt=dt), hop,
                                tiny_stream(y, R, dt_obs=20 * dt), E0, cfg)
        mean_a, _ = kalman_oracle(E0.mean(axis=0), ensemble_covariance(E0),
                                  hop, R, y)
        err = np.linalg.norm(res.analysis_means[0] - mean_a) / np.linalg.norm(mean_a)
        assert err < 1e-5
        assert res.n_cycles == 1
        assert not res.diverged

    def test_zero_innovation_keeps_mean_on_truth(self):
        # identical members that fit the observation exactly: the analysis
        # gradient vanishes and the mean stays on the (steady) truth
        n = 4
        p = ModelParams(n_grid=n, conservative=True)
        E0, v = steady_ensemble(n, m=3, spread=0.0)
        hop = make_observation_operator("x_every_second", n)
        y = apply_H(hop, v)
        cfg = quiet_filter("enkf_standard")
        res = run_enkf_standard(p, StepperConfig(dt=DT), hop,
                                tiny_stream(y, 0.01 * np.eye(2)), E0, cfg,
                                truth_at_cycles=v[None, :])
        assert np.allclose(res.analysis_means[0], v, rtol=0, atol=1e-11)
        assert res.rmse_x[0] < 1e-11
        assert res.rmse_h[0] < 1e-11

    def test_step_times_cover_the_window_grid(self, rng):
        n = 4
        p = ModelParams(n_grid=n, conservative=True)
        E0, _ = steady_ensemble(n, m=3, spread=0.01)
        hop = make_observation_operator("x_every_second", n)
        stream = tiny_stream(rng.standard_normal((2, 2)), 0.01 * np.eye(2))
        res = run_enkf_standard(p, StepperConfig(dt=DT), hop, stream, E0,
                                quiet_filter("enkf_standard"))
        assert res.step_times.size == 40
        assert np.allclose(res.step_times, DT * np.arange(1, 41), atol=1e-12)
        assert np.allclose(res.cycle_times, [0.05, 0.10], atol=1e-15)


class TestMenkf:
    def test_zero_weight_steps_are_bare_forecast(self):
        # eps = dt confines each observation's support to a single step, so
        # the whole first cycle must be bit-identical to the raw stepper
        n = 4
        p = ModelParams(n_grid=n, conservative=True)
        E0, _ = steady_ensemble(n, m=4, spread=0.01)
        hop = make_observation_operator("x_every_second", n)
        stream = tiny_stream([[1.05, 0.95]], 0.01 * np.eye(2))
        cfg = quiet_filter("menkf", mollifier_eps=DT)
        res = run_menkf(p, StepperConfig(dt=DT), hop, stream, E0, cfg)
        bare = step_ensemble(E0.copy(), p, StepperConfig(dt=DT), n_steps=20)
        assert np.array_equal(res.analysis_means[0], bare.mean(axis=0))

    def test_small_eps_limit_approaches_instantaneous_analysis(self):
        # with eps = dt the whole increment lands in one step; on a steady
        # rank-one ensemble the next recorded mean must match the standard
        # EnKF analysis to the accuracy of a single pseudo-time Euler step
        n = 4
        p = ModelParams(n_grid=n, conservative=True)
        E0, _ = steady_ensemble(n, m=4, spread=0.01)
        hop = make_observation_operator("x_every_second", n)
        R = 0.01 * np.eye(2)
        y = np.array([1.05, 0.95])
        res_m = run_menkf(p, StepperConfig(dt=DT), hop,
                          tiny_stream([y, y], R), E0.copy(),
                          quiet_filter("menkf", mollifier_eps=DT))
        res_e = run_enkf_standard(p, StepperConfig(dt=DT), hop,
                                  tiny_stream([y], R), E0.copy(),
                                  quiet_filter("enkf_standard"))
        a = res_m.analysis_means[1]
        b = res_e.analysis_means[0]
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-3

    def test_runs_are_deterministic(self, rng):
        n = 40
        p = ModelParams(n_grid=n)
        x = 8.0 + 0.5 * rng.standard_normal((5, n))
        h = balance_h_from_x(x, p)
        E0 = np.concatenate([x, h, np.zeros((5, n))], axis=1)
        hop = make_observation_operator("x_every_second", n)
        stream = tiny_stream(2.0 + rng.standard_normal((2, 20)), 0.09 * np.eye(20))
        cfg = FilterConfig(scheme="menkf", dt=DT, dt_obs=DT_OBS,
                           inflation=InflationSpec(factor=1.02))
        a = run_menkf(p, StepperConfig(dt=DT), hop, stream, E0, cfg)
        b = run_menkf(p, StepperConfig(dt=DT), hop, stream, E0, cfg)
        for field in ("analysis_means", "rmse_x", "imbalance_steps", "step_times"):
            assert np.array_equal(getattr(a, field), getattr(b, field),
                                  equal_nan=True)
        # the dispatcher reaches the same driver
        c = run_filter(p, StepperConfig(dt=DT), hop, stream, E0, cfg)
        assert np.array_equal(c.analysis_means, a.analysis_means)
        assert a.scheme == "menkf"

    def test_run_extends_past_last_observation(self, rng):
        n = 4
        p = ModelParams(n_grid=n, conservative=True)
        E0, _ = steady_ensemble(n, m=3, spread=0.01)
        hop = make_observation_operator("x_every_second", n)
        stream = tiny_stream(rng.standard_normal((2, 2)), 0.01 * np.eye(2))
        res = run_menkf(p, StepperConfig(dt=DT), hop, stream, E0,
                        quiet_filter("menkf"))
        # default eps = dt_obs/2 adds ceil(eps/dt) = 10 tail steps
        assert res.step_times.size == 50
        assert res.step_times[-1] == pytest.approx(0.125)
        assert res.n_cycles == 2

    def test_divergence_guard_truncates_instead_of_raising(self, rng):
        n = 40
        p = ModelParams(n_grid=n)
        x = 8.0 + 0.5 * rng.standard_normal((4, n))
        h = balance_h_from_x(x, p)
        E0 = np.concatenate([x, h, np.zeros((4, n))], axis=1)
        hop = make_observation_operator("x_every_second", n)
        stream = tiny_stream(2.0 + rng.standard_normal((6, 20)), 0.09 * np.eye(20))
        cfg = FilterConfig(scheme="menkf", dt=DT, dt_obs=DT_OBS,
                           inflation=InflationSpec(factor=2.0))
        res = run_menkf(p, StepperConfig(dt=DT), hop, stream, E0, cfg)
        assert res.diverged
        assert res.diverged_cycle is not None and res.diverged_cycle <= 3
        assert res.n_cycles < 6
        assert res.step_times.size < 6 * 20 + 10


class TestIauEnkf:
    def test_zero_increment_reduces_to_forecast(self, rng):
        # identical members observed without error: every analysis increment
        # is exactly zero and the run is a bare forecast, bit for bit
        n = 40
        p = ModelParams(n_grid=n)
        x0 = 8.0 + 0.5 * rng.standard_normal(n)
        z0 = np.concatenate([x0, balance_h_from_x(x0, p), np.zeros(n)])
        E0 = np.stack([z0, z0])
        hop = make_observation_operator("x_every_second", n)
        stepper = StepperConfig(dt=DT)
        z1 = step_ensemble(z0.copy(), p, stepper, n_steps=20)
        z2 = step_ensemble(z1.copy(), p, stepper, n_steps=20)
        values = np.stack([apply_H(hop, z1), apply_H(hop, z2)])
        res = run_iau_enkf(p, stepper, hop, tiny_stream(values, 0.01 * np.eye(20)),
                           E0, quiet_filter("iau_enkf"))
        assert np.array_equal(res.analysis_means[0], z1)
        assert np.array_equal(res.analysis_means[1], z2)
        assert res.step_times.size == 10 + 40

    def test_total_injected_increment_matches_instantaneous(self):
        # two-step windows put all the hat mass in the second half, so the
        # cycle-2 mean on a steady ensemble reveals the full injected
        # increment of cycle 1; it must equal the one-shot analysis
        n = 4
        dt, dt_obs = 0.025, 0.05
        p = ModelParams(n_grid=n, conservative=True)
        E0, _ = steady_ensemble(n, m=4, spread=0.01)
        hop = make_observation_operator("x_every_second", n)
        R = 0.01 * np.eye(2)
        y = np.array([[1.05, 0.95], [1.0, 1.0]])
        cfg = quiet_filter("iau_enkf", dt=dt, dt_obs=dt_obs)
        res = run_iau_enkf(p, StepperConfig(dt=dt), hop,
                           tiny_stream(y, R, dt_obs=dt_obs), E0, cfg)
        Ea = analysis_flow(E0.copy(), hop, R, y[0],
                           n_substeps=cfg.analysis_substeps)
        assert np.allclose(res.analysis_means[1], Ea.mean(axis=0),
                           rtol=0, atol=1e-10)

    def test_window_constraints(self):
        with pytest.raises(ValueError, match="even"):
            run_iau_enkf(ModelParams(n_grid=4), StepperConfig(dt=DT),
                         make_observation_operator("x_every_second", 4),
                         tiny_stream([[1.0, 1.0]], np.eye(2), dt_obs=5 * DT),
                         steady_ensemble(4, 2, 0.01)[0],
                         quiet_filter("iau_enkf", dt_obs=5 * DT))
        with pytest.raises(ValueError, match="dt_obs/2"):
            run_iau_enkf(ModelParams(n_grid=4), StepperConfig(dt=DT),
                         make_observation_operator("x_every_second", 4),
                         tiny_stream([[1.0, 1.0]], np.eye(2)),
                         steady_ensemble(4, 2, 0.01)[0],
                         quiet_filter("iau_enkf", mollifier_eps=DT))


class TestEmptyStream:
    @pytest.mark.parametrize("scheme", ["enkf_standard", "menkf", "iau_enkf"])
    def test_no_observations_is_a_no_op(self, scheme):
        n = 4
        p = ModelParams(n_grid=n, conservative=True)
        E0, _ = steady_ensemble(n, m=3, spread=0.01)
        stream = ObservationStream(times=np.zeros(0), values=np.zeros((0, 2)),
                                   R=0.01 * np.eye(2), seed=0)
        res = run_filter(p, StepperConfig(dt=DT),
                         make_observation_operator("x_every_second", n),
                         stream, E0, quiet_filter(scheme))
        assert res.n_cycles == 0
        assert res.step_times.size == 0
        assert not res.diverged
        assert res.walltime >= 0.0
