import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipmerge import (
    NonFiniteError,
    nuclear_norm,
    spectral_norm,
    svd,
    weighted_right_projector,
)
from oracles import eigh_nuclear_norm, jacobi_singular_values, power_iteration_norm


class TestSvd:
    def test_identity(self):
        r = svd(np.eye(2))
        assert np.allclose(r.sigma, [1.0, 1.0])
        assert np.allclose(r.u @ r.vt, np.eye(2))

    def test_diagonal(self):
        r = svd(np.diag([3.0, 0.0]))
        assert np.allclose(r.sigma, [3.0, 0.0])

    def test_random_reconstruction_and_jacobi(self, rng):
        a = rng.normal(size=(8, 6))
        r = svd(a)
        fro = np.linalg.norm(a)
        assert np.linalg.norm(a - r.reconstruct()) <= 1e-10 * fro
        sig = jacobi_singular_values(a)
        assert np.max(np.abs(sig - r.sigma)) <= 1e-8 * sig[0]

    def test_orthonormality(self, rng):
        a = rng.normal(size=(15, 9))
        r = svd(a)
        assert np.max(np.abs(r.u.T @ r.u - np.eye(9))) <= 1e-8
        assert np.max(np.abs(r.vt @ r.vt.T - np.eye(9))) <= 1e-8

    def test_rank_limit_is_best_truncation(self, rng):
        a = rng.normal(size=(10, 7))
        full = svd(a)
        trunc = svd(a, rank_limit=3)
        assert trunc.k == 3
        best = (full.u[:, :3] * full.sigma[:3]) @ full.vt[:3]
        assert np.allclose(trunc.reconstruct(), best)

    def test_rank_limit_too_large(self, rng):
        with pytest.raises(ValueError, match="rank_limit"):
            svd(rng.normal(size=(4, 3)), rank_limit=4)

    def test_rejects_non_finite(self):
        a = np.array([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(NonFiniteError, match="bad_layer"):
            svd(a, name="bad_layer")

    def test_sign_determinism(self, rng):
        a = rng.normal(size=(6, 6))
        r1, r2 = svd(a), svd(a.copy())
        assert np.array_equal(r1.vt, r2.vt)
        k = r1.k
        idx = np.argmax(np.abs(r1.vt), axis=1)
        assert np.all(r1.vt[np.arange(k), idx] > 0)

    @settings(deadline=None, max_examples=40)
    @given(
        rows=st.integers(1, 64),
        cols=st.integers(1, 48),
        seed=st.integers(0, 2**31),
    )
    def test_reconstruction_property(self, rows, cols, seed):
        a = np.random.default_rng(seed).normal(size=(rows, cols))
        r = svd(a)
        fro = np.linalg.norm(a)
        assert np.linalg.norm(a - r.reconstruct()) <= 1e-6 * max(1.0, fro)
        k = r.k
        assert np.max(np.abs(r.u.T @ r.u - np.eye(k))) <= 1e-8
        assert np.max(np.abs(r.vt @ r.vt.T - np.eye(k))) <= 1e-8
        assert np.all(np.diff(r.sigma) <= 0)
        assert np.all(r.sigma >= 0)


class TestNorms:
    def test_nuclear_trivial(self):
        assert nuclear_norm(np.array([0.0, 0.0])) == 0.0
        assert nuclear_norm(np.array([3.0, 1.0])) == 4.0

    def test_nuclear_rejects_negative(self):
        with pytest.raises(ValueError):
            nuclear_norm(np.array([1.0, -0.5]))

    def test_nuclear_matches_eigen_oracle(self, rng):
        a = rng.normal(size=(10, 10))
        got = nuclear_norm(svd(a).sigma)
        assert abs(got - eigh_nuclear_norm(a)) <= 1e-8

    def test_spectral_trivial(self):
        assert spectral_norm(np.zeros((3, 4))) == 0.0
        assert spectral_norm(np.diag([2.0, 5.0])) == 5.0

    def test_spectral_matches_power_iteration(self, rng):
        a = rng.normal(size=(12, 9))
        b = rng.normal(size=(12, 9))
        s = power_iteration_norm(a + b)
        assert abs(spectral_norm(a + b) - s) <= 1e-9 * max(1.0, s)

    def test_norm_ordering(self, rng):
        a = rng.normal(size=(9, 13))
        sig = svd(a).sigma
        rank = int(np.sum(sig > 0))
        fro = np.linalg.norm(a)
        assert nuclear_norm(sig) >= spectral_norm(a) - 1e-12
        assert spectral_norm(a) >= fro / np.sqrt(rank) - 1e-12

    @pytest.mark.parametrize("eps", [0.01, 0.1, 0.5])
    def test_spectral_triangle_bound(self, rng, eps):
        dm = rng.normal(size=(10, 8))
        dv = rng.normal(size=(10, 8))
        dv *= eps * spectral_norm(dm) / spectral_norm(dv)
        merged = spectral_norm(dm + dv)
        base = spectral_norm(dm)
        assert (1 - eps) * base - 1e-12 <= merged <= (1 + eps) * base + 1e-12


class TestWeightedRightProjector:
    def test_full_rank_all_ones_is_identity(self, rng):
        vt = svd(rng.normal(size=(7, 5))).vt  # 5 retained vectors over 5 cols
        p = weighted_right_projector(vt, np.ones(5))
        assert np.max(np.abs(p - np.eye(5))) <= 1e-8

    def test_all_zeros(self, rng):
        vt = svd(rng.normal(size=(4, 4))).vt
        assert np.allclose(weighted_right_projector(vt, np.zeros(4)), 0.0)

    def test_rank_one_half_weight(self):
        vt = np.array([[1.0, 0.0]])
        p = weighted_right_projector(vt, np.array([0.5]))
        assert np.allclose(p, [[0.25, 0.0], [0.0, 0.0]])

    def test_symmetric_psd(self, rng):
        vt = svd(rng.normal(size=(6, 6)))
        gamma = rng.uniform(0, 1, size=6)
        p = weighted_right_projector(vt.vt, gamma)
        assert np.allclose(p, p.T)
        assert np.min(np.linalg.eigvalsh(p)) >= -1e-12

    def test_idempotent_with_binary_gamma(self, rng):
        vt = svd(rng.normal(size=(8, 6))).vt
        gamma = (rng.uniform(size=6) > 0.5).astype(float)
        p = weighted_right_projector(vt, gamma)
        assert np.max(np.abs(p @ p - p)) <= 1e-8

    def test_length_mismatch(self, rng):
        vt = svd(rng.normal(size=(4, 4))).vt
        with pytest.raises(ValueError, match="length"):
            weighted_right_projector(vt, np.ones(3))
