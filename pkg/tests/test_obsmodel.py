"""Observation operators, synthetic data generation, and the ensemble potential."""
import numpy as np
import pytest

from menkf.obsmodel import (
    ObservationStream,
    apply_H,
    custom_operator,
    generate_observations,
    make_observation_operator,
    obs_cost,
    potential_gradient,
)


def linear_ramp_state(n=40):
    """x_l = l (1-based); wave components filled with distinct junk."""
    z = np.zeros(3 * n)
    z[:n] = np.arange(1, n + 1, dtype=float)
    z[n:2 * n] = -7.0
    z[2 * n:] = 3.5
    return z


class TestOperators:
    def test_x_every_second_reads_even_points(self):
        hop = make_observation_operator("x_every_second", 40)
        y = apply_H(hop, linear_ramp_state())
        assert np.array_equal(y, np.arange(2.0, 41.0, 2.0))

    def test_odd_parity_reads_odd_points(self):
        hop = make_observation_operator("x_every_second", 40, parity="odd")
        y = apply_H(hop, linear_ramp_state())
        assert np.array_equal(y, np.arange(1.0, 40.0, 2.0))

    def test_mixed_equals_x_when_fields_agree(self):
        n = 40
        hop = make_observation_operator("mixed_every_second", n)
        z = linear_ramp_state(n)
        z[n:2 * n] = z[:n]
        y = apply_H(hop, z)
        assert np.array_equal(y, np.arange(2.0, 41.0, 2.0))

    def test_mixed_halves_x_when_wave_field_zero(self):
        n = 40
        hop = make_observation_operator("mixed_every_second", n)
        z = linear_ramp_state(n)
        z[n:2 * n] = 0.0
        y = apply_H(hop, z)
        assert np.array_equal(y, np.arange(1.0, 21.0, 1.0))

    def test_zero_state_maps_to_zero(self):
        hop = make_observation_operator("mixed_every_second", 12)
        assert np.array_equal(apply_H(hop, np.zeros(36)), np.zeros(6))

    def test_shapes_and_sparsity_structure(self):
        n = 40
        hop = make_observation_operator("x_every_second", n)
        assert hop.p == 20
        assert hop.matrix.shape == (20, 120)
        assert hop.rows.size == 20
        assert np.array_equal(hop.matrix[hop.rows, hop.cols], hop.vals)
        mixed = make_observation_operator("mixed_every_second", n)
        assert mixed.rows.size == 40
        assert np.all(mixed.vals == 0.5)

    def test_operator_arrays_frozen(self):
        hop = make_observation_operator("x_every_second", 8)
        for a in (hop.matrix, hop.rows, hop.cols, hop.vals):
            assert not a.flags.writeable

    def test_custom_operator_roundtrip(self, rng):
        H = rng.standard_normal((3, 9))
        hop = custom_operator(H, n_grid=3)
        assert hop.kind == "custom_rows"
        z = rng.standard_normal(9)
        assert np.allclose(apply_H(hop, z), H @ z, rtol=1e-15, atol=0)

    @pytest.mark.parametrize(
        "exc_args",
        [
            ("nope", 40, "even"),
            ("x_every_second", 41, "even"),
            ("x_every_second", 40, "diagonal"),
        ],
    )
    def test_bad_operator_requests(self, exc_args):
        kind, n, parity = exc_args
        with pytest.raises(ValueError):
            make_observation_operator(kind, n, parity=parity)

    def test_bad_matrices_rejected(self):
        with pytest.raises(ValueError, match="2-D"):
            custom_operator(np.ones(5), n_grid=2)
        with pytest.raises(ValueError, match="rows"):
            custom_operator(np.ones((7, 6)), n_grid=2)
        with pytest.raises(ValueError, match="finite"):
            custom_operator(np.array([[1.0, np.nan]]), n_grid=1)

    def test_apply_batch_matches_per_member(self, rng):
        hop = make_observation_operator("mixed_every_second", 10)
        Z = rng.standard_normal((5, 30))
        Y = apply_H(hop, Z)
        assert Y.shape == (5, 5)
        for i in range(5):
            assert np.array_equal(Y[i], apply_H(hop, Z[i]))

    def test_apply_dimension_mismatch(self):
        hop = make_observation_operator("x_every_second", 10)
        with pytest.raises(ValueError, match="dimension"):
            apply_H(hop, np.zeros(31))


class TestObservationStream:
    def test_validation(self):
        good = dict(times=np.array([0.05, 0.10]), values=np.zeros((2, 1)),
                    R=np.eye(1), seed=0)
        ObservationStream(**good)
        with pytest.raises(ValueError, match="increasing"):
            ObservationStream(**{**good, "times": np.array([0.10, 0.05])})
        with pytest.raises(ValueError, match="symmetric"):
            ObservationStream(**{**good, "R": np.array([[1.0, 0.5], [0.2, 1.0]]),
                                 "values": np.zeros((2, 2))})
        with pytest.raises(ValueError, match="shape"):
            ObservationStream(**{**good, "values": np.zeros((3, 1))})

    def test_rinv_diag(self):
        s = ObservationStream(times=np.array([0.05]), values=np.zeros((1, 2)),
                              R=np.diag([2.0, 4.0]), seed=0)
        assert np.array_equal(s.rinv_diag, [0.5, 0.25])
        full = np.array([[2.0, 0.5], [0.5, 4.0]])
        s = ObservationStream(times=np.array([0.05]), values=np.zeros((1, 2)),
                              R=full, seed=0)
        assert s.rinv_diag is None


class TestGenerateObservations:
    def setup_method(self):
        self.n = 40
        self.hop = make_observation_operator("x_every_second", self.n)

    def test_vanishing_noise_recovers_projection(self, rng):
        Z = rng.standard_normal((3, 3 * self.n))
        stream = generate_observations(Z, self.hop, 1e-30 * np.eye(20), 0.05, seed=1)
        assert np.allclose(stream.values, apply_H(self.hop, Z), rtol=0, atol=1e-10)

    def test_times_grid(self, rng):
        Z = rng.standard_normal((4, 3 * self.n))
        stream = generate_observations(Z, self.hop, np.eye(20), 0.05, seed=1)
        assert np.allclose(stream.times, [0.05, 0.10, 0.15, 0.20], rtol=0, atol=1e-15)

    def test_seeded_and_reproducible(self, rng):
        Z = rng.standard_normal((5, 3 * self.n))
        a = generate_observations(Z, self.hop, np.eye(20), 0.05, seed=7)
        b = generate_observations(Z, self.hop, np.eye(20), 0.05, seed=7)
        c = generate_observations(Z, self.hop, np.eye(20), 0.05, seed=8)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)
        assert a.seed == 7

    def test_noise_variance_matches_R(self):
        M = 4000
        Z = np.zeros((M, 3 * self.n))
        stream = generate_observations(Z, self.hop, np.eye(20), 0.05, seed=3)
        var = stream.values.var(axis=0, ddof=1)
        assert np.all(var > 0.9) and np.all(var < 1.1)

    def test_does_not_touch_global_rng(self):
        np.random.seed(123)
        expected = np.random.standard_normal(4)
        np.random.seed(123)
        generate_observations(np.zeros((2, 3 * self.n)), self.hop,
                              np.eye(20), 0.05, seed=5)
        assert np.array_equal(np.random.standard_normal(4), expected)


class TestObsCost:
    def test_scalar_example(self):
        hop = custom_operator(np.array([[1.0, 0.0]]), n_grid=1)
        z = np.array([2.0, 9.0])
        assert obs_cost(hop, np.eye(1), np.zeros(1), z) == pytest.approx(2.0)

    def test_doubling_R_halves_cost(self, rng):
        hop = custom_operator(rng.standard_normal((3, 6)), n_grid=2)
        z, y = rng.standard_normal(6), rng.standard_normal(3)
        c1 = obs_cost(hop, np.eye(3), y, z)
        c2 = obs_cost(hop, 2.0 * np.eye(3), y, z)
        assert c2 == pytest.approx(0.5 * c1, rel=1e-13)

    def test_orthogonal_rotation_invariance(self, rng):
        H = rng.standard_normal((3, 6))
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        z, y = rng.standard_normal(6), rng.standard_normal(3)
        c1 = obs_cost(custom_operator(H, 2), np.eye(3), y, z)
        c2 = obs_cost(custom_operator(Q @ H, 2), np.eye(3), Q @ y, z)
        assert c2 == pytest.approx(c1, rel=1e-12)


class TestPotentialGradient:
    def test_two_member_scalar_example(self):
        hop = custom_operator(np.array([[1.0]]), n_grid=1)
        E = np.array([[0.0], [2.0]])
        G = potential_gradient(E, hop, np.eye(1), np.array([1.0]))
        assert np.allclose(G, [[-0.5], [0.5]], rtol=0, atol=1e-15)

    def test_gradient_sum_identity(self, rng):
        hop = custom_operator(rng.standard_normal((4, 9)), n_grid=3)
        E = rng.standard_normal((6, 9))
        R = np.diag(rng.uniform(0.5, 2.0, size=4))
        y = rng.standard_normal(4)
        G = potential_gradient(E, hop, R, y)
        zbar = E.mean(axis=0)
        expected = 6 * hop.matrix.T @ np.linalg.solve(R, apply_H(hop, zbar) - y)
        assert np.allclose(G.sum(axis=0), expected, rtol=1e-12, atol=1e-13)

    def test_matches_finite_differences(self, rng):
        m, d = 3, 6
        hop = custom_operator(rng.standard_normal((2, d)), n_grid=2)
        R = np.diag([1.5, 0.7])
        y = rng.standard_normal(2)
        E = rng.standard_normal((m, d))

        def potential(E):
            costs = [obs_cost(hop, R, y, E[i]) for i in range(m)]
            return (m / 2.0) * (obs_cost(hop, R, y, E.mean(axis=0))
                                + np.mean(costs))

        G = potential_gradient(E, hop, R, y)
        h = 1e-6
        for i in range(m):
            for j in range(d):
                Ep, Em = E.copy(), E.copy()
                Ep[i, j] += h
                Em[i, j] -= h
                fd = (potential(Ep) - potential(Em)) / (2 * h)
                assert G[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_single_member_rejected(self):
        hop = custom_operator(np.eye(2), n_grid=1)
        with pytest.raises(ValueError, match="m >= 2"):
            potential_gradient(np.zeros((1, 2)), hop, np.eye(2), np.zeros(2))
