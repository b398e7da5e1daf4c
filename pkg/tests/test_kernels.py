import numpy as np
import pytest

from repulse.kernels import (
    DEGENERATE_BANDWIDTH_FALLBACK,
    FeatureMap,
    KernelSpec,
    median_bandwidth,
    rbf,
    repulsion_forces,
    repulsion_grad,
)


def log_kernel_potential(i, points, h, form):
    """Reference coupling potential with frozen bandwidth."""
    diffs = points - points[i]
    k = np.exp(-np.einsum("jd,jd->j", diffs, diffs) / h)
    if form == "log_sum":
        return np.log(k.sum())
    return np.log(k).sum()


def fd_force(i, points, spec, h, sigma_t=1.0, eps=1e-6):
    """-gamma_eff * central-difference gradient of the potential (frozen h)."""
    d = points.shape[1]
    g = np.zeros(d)
    for a in range(d):
        p1 = points.copy()
        p1[i, a] += eps
        p2 = points.copy()
        p2[i, a] -= eps
        g[a] = (log_kernel_potential(i, p1, h, spec.form) - log_kernel_potential(i, p2, h, spec.form)) / (2 * eps)
    return -spec.gamma_eff(sigma_t) * g


class TestMedianBandwidth:
    def test_two_points(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert median_bandwidth(pts) == pytest.approx(1.0 / np.log(2.0), rel=1e-12)

    def test_three_collinear(self):
        # pairwise distances {1, 1, 2}: median 1
        pts = np.array([[0.0], [1.0], [2.0]])
        assert median_bandwidth(pts) == pytest.approx(1.0 / np.log(3.0), rel=1e-12)

    def test_scaling(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(0, 1, (6, 3))
        assert median_bandwidth(2 * pts) == pytest.approx(4 * median_bandwidth(pts), rel=1e-12)

    def test_degenerate_fallback(self):
        pts = np.ones((4, 2))
        assert median_bandwidth(pts) == DEGENERATE_BANDWIDTH_FALLBACK

    def test_feature_space(self):
        w = np.array([[2.0, 0.0]])
        pts = np.array([[0.0, 5.0], [1.0, -3.0]])
        # distance in feature space is |2*0 - 2*1| = 2
        assert median_bandwidth(pts, FeatureMap.linear(w)) == pytest.approx(4.0 / np.log(2.0))

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            median_bandwidth(np.zeros((1, 2)))


class TestRbf:
    def test_self_is_one(self):
        x = np.array([0.3, 0.4])
        assert rbf(x, x, h=0.7) == 1.0

    def test_e_minus_one_at_bandwidth(self):
        x = np.array([0.0, 0.0])
        y = np.array([np.sqrt(0.7), 0.0])
        assert rbf(x, y, h=0.7) == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.normal(0, 1, (2, 4))
            assert rbf(a, b, 1.3) == rbf(b, a, 1.3)

    def test_range(self):
        rng = np.random.default_rng(2)
        vals = [rbf(rng.normal(0, 3, 3), rng.normal(0, 3, 3), 0.5) for _ in range(50)]
        assert all(0.0 < v <= 1.0 for v in vals)


class TestRepulsionGrad:
    def test_single_particle_zero(self):
        f = repulsion_grad(0, np.array([[1.0, 2.0]]), KernelSpec(gamma=1.0))
        np.testing.assert_array_equal(f, [0.0, 0.0])

    def test_gamma_zero(self):
        pts = np.random.default_rng(3).normal(0, 1, (4, 2))
        f, deg = repulsion_forces(pts, KernelSpec(gamma=0.0))
        np.testing.assert_array_equal(f, np.zeros_like(pts))
        assert not deg

    def test_two_particles_points_away_and_matches_fd(self):
        pts = np.array([[1.0, 0.0], [0.0, 0.0]])
        spec = KernelSpec(gamma=1.5, bandwidth=0.9)
        f = repulsion_grad(0, pts, spec)
        assert f[0] > 0  # away from the particle at the origin
        np.testing.assert_allclose(f, fd_force(0, pts, spec, h=0.9), rtol=1e-6)

    def test_matches_fd_many_configurations(self):
        # relative error < 1e-6, with a 1e-9 floor for components the
        # finite differences cannot resolve (far-apart particles give
        # kernel values near machine zero; central differences carry ~1e-10
        # absolute noise from the 1e-16/1e-6 roundoff ratio)
        rng = np.random.default_rng(4)
        for trial in range(500):
            n = int(rng.integers(2, 6))
            d = int(rng.integers(1, 4))
            pts = rng.normal(0, 1.5, (n, d))
            form = "log_sum" if trial % 2 == 0 else "sum_log"
            h = float(rng.uniform(0.5, 3.0))
            spec = KernelSpec(gamma=float(rng.uniform(0.1, 3.0)), bandwidth=h, form=form)
            i = int(rng.integers(0, n))
            got = repulsion_grad(i, pts, spec)
            want = fd_force(i, pts, spec, h=h)
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_antisymmetry_two_particles(self):
        rng = np.random.default_rng(5)
        for form in ("log_sum", "sum_log"):
            pts = rng.normal(0, 1, (2, 3))
            f, _ = repulsion_forces(pts, KernelSpec(gamma=2.0, form=form))
            np.testing.assert_allclose(f[0], -f[1], atol=1e-12)

    def test_pushes_away_from_neighbour_mean(self):
        rng = np.random.default_rng(6)
        spec = KernelSpec(gamma=1.0, form="sum_log")
        for _ in range(1000):
            pts = rng.normal(0, 1, (4, 2))
            f, _ = repulsion_forces(pts, spec)
            for i in range(4):
                others = np.delete(pts, i, axis=0).mean(axis=0)
                assert f[i] @ (pts[i] - others) >= 0

    def test_attractive_sign_flips(self):
        pts = np.random.default_rng(7).normal(0, 1, (3, 2))
        fr, _ = repulsion_forces(pts, KernelSpec(gamma=1.0, sign="repulsive"))
        fa, _ = repulsion_forces(pts, KernelSpec(gamma=1.0, sign="attractive"))
        np.testing.assert_allclose(fr, -fa)

    def test_sigma_scaled_gamma(self):
        pts = np.random.default_rng(8).normal(0, 1, (3, 2))
        f1, _ = repulsion_forces(pts, KernelSpec(gamma=2.0, gamma_schedule="sigma_scaled"), sigma_t=0.5)
        f2, _ = repulsion_forces(pts, KernelSpec(gamma=1.0, gamma_schedule="constant"))
        np.testing.assert_allclose(f1, f2)

    def test_degenerate_flagged_with_fallback(self):
        pts = np.zeros((3, 2))
        f, deg = repulsion_forces(pts, KernelSpec(gamma=1.0))
        assert deg
        np.testing.assert_array_equal(f, np.zeros_like(pts))

    def test_linear_feature_chain_rule(self):
        w = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, -1.0]])
        fm = FeatureMap.linear(w)
        pts = np.random.default_rng(9).normal(0, 1, (3, 2))
        spec = KernelSpec(gamma=1.0, bandwidth=1.2, form="log_sum", features=fm)
        got = repulsion_grad(1, pts, spec)

        def potential(p):
            feats = p @ w.T
            diffs = feats - feats[1]
            k = np.exp(-np.einsum("jd,jd->j", diffs, diffs) / 1.2)
            return np.log(k.sum())

        eps = 1e-6
        fd = np.zeros(2)
        for a in range(2):
            p1 = pts.copy()
            p1[1, a] += eps
            p2 = pts.copy()
            p2[1, a] -= eps
            fd[a] = (potential(p1) - potential(p2)) / (2 * eps)
        np.testing.assert_allclose(got, -fd, rtol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(gamma=-1.0)
    with pytest.raises(ValueError):
        KernelSpec(form="product")
    with pytest.raises(ValueError):
        KernelSpec(bandwidth=-0.5)
    with pytest.raises(ValueError):
        FeatureMap.linear([[np.inf, 0.0]])
