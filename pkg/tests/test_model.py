import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayes_lqr.evaluation import UnstableError, dlyap
from bayes_lqr.model import (Dataset, GainPolicy, LinearSystem, Rollout, is_stabilizable,
                             make_toeplitz_system, psd_factor, simulate_dataset, simulate_rollout,
                             spectral_radius, zero_inputs)


class TestLinearSystem:
    def test_cached_factor_reproduces_pi(self):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((4, 4))
        Pi = M @ M.T
        s = LinearSystem(np.zeros((4, 4)), np.eye(4), Pi)
        assert np.allclose(s.G @ s.G.T, Pi, atol=1e-10 * np.linalg.norm(Pi))

    def test_singular_pi_factor(self):
        v = np.array([[1.0], [2.0], [0.5]])
        Pi = v @ v.T
        G = psd_factor(Pi)
        assert np.allclose(G @ G.T, Pi, atol=1e-10 * np.linalg.norm(Pi))
        assert np.allclose(np.triu(G, 1), 0.0)

    def test_zero_pi_allowed(self):
        s = LinearSystem([[0.5]], [[1.0]], [[0.0]])
        assert s.G.shape == (1, 1) and s.G[0, 0] == 0.0

    def test_rejects_asymmetric_pi(self):
        with pytest.raises(ValueError):
            LinearSystem(np.eye(2), np.eye(2), [[1.0, 0.5], [0.0, 1.0]])

    def test_rejects_indefinite_pi(self):
        with pytest.raises(ValueError):
            LinearSystem(np.eye(2), np.eye(2), np.diag([1.0, -1.0]))

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            LinearSystem(np.ones((2, 3)), np.ones((2, 1)), np.eye(2))
        with pytest.raises(ValueError):
            LinearSystem(np.eye(2), np.ones((3, 1)), np.eye(2))

    def test_arrays_are_read_only(self):
        s = make_toeplitz_system(2)
        with pytest.raises(ValueError):
            s.A[0, 0] = 3.0


class TestToeplitz:
    def test_scalar(self):
        s = make_toeplitz_system(1)
        assert s.A.tolist() == [[1.01]] and s.B.tolist() == [[1.0]] and s.Pi.tolist() == [[1.0]]

    def test_two(self):
        assert np.array_equal(make_toeplitz_system(2).A, [[1.01, 0.01], [0.01, 1.01]])

    def test_three(self):
        s = make_toeplitz_system(3)
        assert np.array_equal(s.A, [[1.01, 0.01, 0], [0.01, 1.01, 0.01], [0, 0.01, 1.01]])
        assert np.array_equal(s.B, np.eye(3)) and np.array_equal(s.Pi, np.eye(3))

    def test_open_loop_unstable(self):
        assert spectral_radius(make_toeplitz_system(3).A) > 1.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_toeplitz_system(0)


class TestSimulation:
    def test_zero_dynamics(self):
        s = LinearSystem(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)))
        r = simulate_rollout(s, 5, np.random.default_rng(0), zero_inputs)
        assert np.all(r.x == 0.0)

    def test_deterministic_recursion(self):
        s = LinearSystem([[2.0]], [[0.0]], [[0.0]])
        r = simulate_rollout(s, 3, np.random.default_rng(0), x0=[1.0])
        assert r.x.ravel().tolist() == [1.0, 2.0, 4.0, 8.0]

    def test_shapes(self):
        s = make_toeplitz_system(3)
        r = simulate_rollout(s, 6, np.random.default_rng(1))
        assert r.x.shape == (7, 3) and r.u.shape == (7, 3) and r.horizon == 6

    def test_matches_direct_recursion(self):
        # Replay the same random stream by hand.
        s = make_toeplitz_system(3)
        r = simulate_rollout(s, 6, np.random.default_rng(5))
        rng = np.random.default_rng(5)
        x = np.zeros(3)
        for t in range(6):
            u = rng.standard_normal(3)
            w = np.linalg.cholesky(s.Pi) @ rng.standard_normal(3)
            assert np.array_equal(r.u[t], u)
            x = s.A @ x + s.B @ u + w
            assert np.allclose(r.x[t + 1], x, rtol=0, atol=1e-14)

    def test_state_covariance_grows(self):
        # Exact propagation: Sigma_{t+1} = A Sigma_t A' + B B' + Pi from Sigma_0 = 0.
        s = make_toeplitz_system(3)
        data = simulate_dataset(s, 4000, 6, np.random.default_rng(2))
        X = np.stack([r.x for r in data.rollouts])
        emp = [np.trace(np.cov(X[:, t, :].T)) for t in range(1, 7)]
        Sig, exact = np.zeros((3, 3)), []
        for _ in range(6):
            Sig = s.A @ Sig @ s.A.T + s.B @ s.B.T + s.Pi
            exact.append(np.trace(Sig))
        assert np.all(np.diff(exact) > 0)
        assert np.all(np.diff(emp) > 0)
        assert np.allclose(emp, exact, rtol=0.08)

    def test_seed_reproducible(self):
        s = make_toeplitz_system(3)
        a = simulate_rollout(s, 6, np.random.default_rng(9))
        b = simulate_rollout(s, 6, np.random.default_rng(9))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            simulate_rollout(make_toeplitz_system(2), 0, np.random.default_rng(0))


class TestDataset:
    def test_triples_use_first_T_inputs(self):
        x = np.arange(4.0).reshape(4, 1)
        u = np.array([[10.0], [20.0], [30.0], [99.0]])
        d = Dataset((Rollout(x, u),), 1, 1)
        xp, up, xn = d.triples()
        assert xp.ravel().tolist() == [0, 1, 2]
        assert up.ravel().tolist() == [10, 20, 30]
        assert xn.ravel().tolist() == [1, 2, 3]
        assert d.n_triples == 3

    def test_empty(self):
        d = Dataset((), 2, 1)
        xp, up, xn = d.triples()
        assert xp.shape == (0, 2) and up.shape == (0, 1) and d.n_triples == 0

    def test_inconsistent_dims(self):
        r = Rollout(np.zeros((3, 2)), np.zeros((3, 1)))
        with pytest.raises(ValueError):
            Dataset((r,), 3, 1)

    def test_rollout_length_check(self):
        with pytest.raises(ValueError):
            Rollout(np.zeros((3, 1)), np.zeros((5, 1)))


class TestSpectralRadius:
    def test_examples(self):
        assert spectral_radius(np.zeros((3, 3))) == 0.0
        assert spectral_radius(np.eye(4)) == pytest.approx(1.0)
        assert spectral_radius([[0.0, 1.0], [-0.25, 0.0]]) == pytest.approx(0.5, abs=1e-14)

    def test_non_square(self):
        with pytest.raises(ValueError):
            spectral_radius(np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.3, 1.6))
    def test_schur_iff_lyapunov(self, seed, scale):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((3, 3))
        A *= scale / spectral_radius(A)
        if abs(scale - 1.0) < 1e-3:
            return
        if spectral_radius(A) < 1.0:
            X = dlyap(A, np.eye(3))
            assert np.linalg.eigvalsh(X)[0] > 0
        else:
            with pytest.raises(UnstableError):
                dlyap(A, np.eye(3))


class TestStabilizable:
    def test_examples(self):
        assert is_stabilizable([[2.0]], [[1.0]])
        assert not is_stabilizable([[2.0]], [[0.0]])
        assert is_stabilizable(np.diag([2.0, 0.5]), [[1.0], [0.0]])
        assert not is_stabilizable(np.diag([0.5, 2.0]), [[1.0], [0.0]])

    def test_stable_always_stabilizable(self):
        assert is_stabilizable(0.5 * np.eye(3), np.zeros((3, 1)))

    def test_marginal_mode_counts(self):
        assert not is_stabilizable(np.diag([1.0, 0.2]), [[0.0], [1.0]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_similarity_invariance(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((3, 3)) * 1.2
        B = rng.standard_normal((3, 1))
        if seed % 3 == 0:
            # Build an uncontrollable unstable mode in a hidden basis.
            A = np.diag([1.5, 0.3, -0.4])
            B = np.array([[0.0], [1.0], [1.0]])
        Tm = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        cond = np.linalg.cond(Tm)
        Ti = np.linalg.inv(Tm)
        assert is_stabilizable(A, B, tol=1e-8 * cond) == \
            is_stabilizable(Tm @ A @ Ti, Tm @ B, tol=1e-8 * cond)


def test_gain_policy_read_only():
    K = GainPolicy([[1.0, 2.0]])
    assert K.K.shape == (1, 2)
    with pytest.raises(ValueError):
        K.K[0, 0] = 0.0
