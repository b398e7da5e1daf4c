import numpy as np
import pytest

import repulse._accel as accel
from repulse.ensemble import NumericsError
from repulse.inverse import (
    DecoderMap,
    ForwardOperator,
    InverseTask,
    apply_adjoint,
    apply_forward,
    calibrated_lambda,
    coupling_residual,
    rsd_inverse_solve,
)
from repulse.kernels import KernelSpec, repulsion_forces
from repulse.priors import GaussianMixture, gaussian_posterior_oracle, toy_bimodal, diffused_params
from repulse.schedule import DiffusionSchedule, WeightingSpec, timestep_iter

SCH = DiffusionSchedule()
STD_PRIOR = GaussianMixture([1.0], [[0.0, 0.0]], [1.0])


class TestOperators:
    def test_identity_adjoint(self):
        op = ForwardOperator.identity()
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(apply_forward(op, x), x)
        np.testing.assert_array_equal(apply_adjoint(op, x), x)

    def test_mask(self):
        op = ForwardOperator.mask([True, False])
        np.testing.assert_array_equal(apply_forward(op, np.array([3.0, 4.0])), [3.0])
        np.testing.assert_array_equal(apply_adjoint(op, np.array([5.0])), [5.0, 0.0])

    def test_adjoint_identity_random_matrix(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 1, (3, 5))
        op = ForwardOperator.dense(a)
        for _ in range(100):
            x = rng.normal(0, 1, 5)
            r = rng.normal(0, 1, 3)
            assert abs(apply_forward(op, x) @ r - x @ apply_adjoint(op, r)) < 1e-10

    def test_adjoint_identity_masks(self):
        rng = np.random.default_rng(1)
        op = ForwardOperator.mask([True, False, True, True])
        for _ in range(100):
            x = rng.normal(0, 1, 4)
            r = rng.normal(0, 1, 3)
            assert abs(apply_forward(op, x) @ r - x @ apply_adjoint(op, r)) < 1e-10

    def test_linearity(self):
        rng = np.random.default_rng(2)
        op = ForwardOperator.dense(rng.normal(0, 1, (2, 4)))
        x, y = rng.normal(0, 1, (2, 4))
        lhs = apply_forward(op, 2.0 * x + 3.0 * y)
        rhs = 2.0 * apply_forward(op, x) + 3.0 * apply_forward(op, y)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_box_mask(self):
        op = ForwardOperator.box_mask((3, 3), rows=(1, 3), cols=(1, 3))
        x = np.arange(9.0)
        # hides the bottom-right 2x2 block: indices 4, 5, 7, 8
        np.testing.assert_array_equal(apply_forward(op, x), [0.0, 1.0, 2.0, 3.0, 6.0])

    def test_mask_needs_one_kept(self):
        with pytest.raises(ValueError):
            ForwardOperator.mask([False, False])

    def test_as_matrix(self):
        rng = np.random.default_rng(3)
        a = rng.normal(0, 1, (2, 4))
        np.testing.assert_allclose(ForwardOperator.dense(a).as_matrix(4), a)
        m = ForwardOperator.mask([False, True, False, True]).as_matrix(4)
        np.testing.assert_array_equal(m, [[0, 1, 0, 0], [0, 0, 0, 1]])


class TestDecoder:
    def test_identity(self):
        d = DecoderMap.identity()
        z = np.array([1.0, 2.0])
        np.testing.assert_array_equal(d.apply(z), z)

    def test_linear_and_adjoint(self):
        w = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        d = DecoderMap.linear(w)
        z = np.array([2.0, 3.0])
        np.testing.assert_allclose(d.apply(z), w @ z)
        r = np.array([1.0, 1.0, 1.0])
        np.testing.assert_allclose(d.adjoint(r), w.T @ r)

    def test_rank_check(self):
        with pytest.raises(ValueError):
            DecoderMap.linear(np.array([[1.0, 2.0], [2.0, 4.0]]))


class TestCouplingResidual:
    def test_zero_when_consistent(self):
        z = np.random.default_rng(4).normal(0, 1, (5, 2))
        assert coupling_residual(z, z, DecoderMap.identity()) == 0.0

    def test_unit_offset(self):
        z = np.zeros((3, 2))
        x = np.ones((3, 2))
        assert coupling_residual(x, z, DecoderMap.identity()) == pytest.approx(2.0)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            coupling_residual(np.zeros((2, 2)), np.zeros((3, 2)), DecoderMap.identity())


class TestTaskValidation:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            InverseTask(
                operator=ForwardOperator.dense(np.eye(3)),
                y=np.zeros(3),
                sigma_v=1.0,
                prior=STD_PRIOR,
            )

    def test_measurement_length(self):
        with pytest.raises(ValueError):
            InverseTask(
                operator=ForwardOperator.identity(),
                y=np.zeros(3),
                sigma_v=1.0,
                prior=STD_PRIOR,
            )

    def test_positive_noise(self):
        with pytest.raises(ValueError):
            InverseTask(operator=ForwardOperator.identity(), y=np.zeros(2), sigma_v=0.0, prior=STD_PRIOR)


def conjugate_task(rho=0.1, lr_x=0.06, lr_z=0.12, gamma=0.0, y=(40.0, 20.0), steps=3000):
    lam = calibrated_lambda(SCH, steps, rho)
    return InverseTask(
        operator=ForwardOperator.identity(),
        y=np.asarray(y, dtype=float),
        sigma_v=1.0,
        prior=STD_PRIOR,
        rho=rho,
        weighting=WeightingSpec(lam, sigma_v=1.0, rho=rho),
        kernel=KernelSpec(gamma=gamma),
        n_particles=4,
        lr_x=lr_x,
        lr_z=lr_z,
    )


class TestSolver:
    def test_uninformative_likelihood_returns_prior_mean(self):
        y = np.array([500.0, -300.0])
        task = InverseTask(
            operator=ForwardOperator.identity(),
            y=y,
            sigma_v=1e3,
            prior=STD_PRIOR,
            rho=0.1,
            weighting=WeightingSpec(calibrated_lambda(SCH, 2000, 0.1), sigma_v=1e3, rho=0.1),
            kernel=KernelSpec(gamma=0.0),
            n_particles=8,
            lr_x=0.01,
            lr_z=0.02,
        )
        xs = []
        for seed in range(6):
            x, _, _ = rsd_inverse_solve(task, 2000, seed, schedule=SCH, t_order="uniform_random")
            xs.append(x)
        mean = np.vstack(xs).mean(axis=0)
        oracle = gaussian_posterior_oracle(STD_PRIOR, np.eye(2), y, 1e3)
        assert np.linalg.norm(mean - oracle.means[0]) < 0.05

    def test_conjugate_posterior_mean(self):
        task = conjugate_task()
        xs = [rsd_inverse_solve(task, 3000, seed, schedule=SCH, t_order="uniform_random")[0] for seed in range(8)]
        mean = np.vstack(xs).mean(axis=0)
        target = np.asarray(task.y) / 2.0
        assert np.linalg.norm(mean - target) / np.linalg.norm(target) < 1e-2

    def test_stop_gradient_assembly_by_hand(self):
        # replay one z-step and one x-step with the documented RNG layout
        task = conjugate_task(steps=1)
        seed = 17
        x1, z1, _ = rsd_inverse_solve(task, 1, seed, schedule=SCH)

        rng = np.random.default_rng(seed)
        n = task.n_particles
        x0 = rng.standard_normal((n, 2))
        z0 = rng.standard_normal((n, 2))
        eps = rng.standard_normal((1, n, 2))[0]
        t = timestep_iter(SCH, "descending", 1)[0]
        alpha, sigma = SCH.alpha_sigma(t)
        lam = task.weighting.weight(t, SCH)
        z_t = alpha * z0 + sigma * eps
        logw, means, precs, lognorms = diffused_params(task.prior, SCH, [t])
        eps_hat = -sigma * accel.gmm_score_prepped(z_t, logw, means[0], precs[0], lognorms[0])
        force, _ = repulsion_forces(z_t, task.kernel, sigma)
        grad_z = -(x0 - z0) / task.rho**2 + lam * (eps_hat - eps) - force

        def adam1(p, g, lr):
            m = 0.1 * g / (1 - 0.9)
            v = 0.01 * g * g / (1 - 0.99)
            return p - lr * m / (np.sqrt(v) + 1e-8)

        z_hand = adam1(z0, grad_z, task.lr_z)
        grad_x = (x0 - task.y[None, :]) / task.sigma_v**2 + (x0 - z_hand) / task.rho**2
        x_hand = adam1(x0, grad_x, task.lr_x)
        np.testing.assert_allclose(z1, z_hand, atol=1e-12)
        np.testing.assert_allclose(x1, x_hand, atol=1e-12)

    def test_surrogate_objective_window_decrease(self):
        # J = data/(2 sigma_v^2) + coupling/(2 rho^2): 50-step window means
        # never increase under the plain optimizer
        task = conjugate_task(lr_x=0.005, lr_z=0.01, y=(2.0, 1.0), steps=1000)
        task.optimizer = "plain"
        for seed in range(3):
            _, _, diag = rsd_inverse_solve(task, 1000, seed, schedule=SCH)
            j = diag["data_residual"] / 2.0 + diag["coupling_residual"] / (2 * task.rho**2)
            means = [np.mean(j[i : i + 50]) for i in range(0, len(j) - 49, 50)]
            assert np.all(np.diff(means) <= 1e-12)

    def test_rho_limit_coupling(self):
        residuals = {}
        for rho in (1.0, 0.01):
            task = conjugate_task(rho=rho, lr_x=0.01, lr_z=0.02, y=(2.0, 1.0), steps=1500)
            _, _, diag = rsd_inverse_solve(task, 1500, 0, schedule=SCH, t_order="uniform_random")
            residuals[rho] = float(np.mean(diag["coupling_residual"][-375:]))
        assert residuals[0.01] < residuals[1.0]

    def test_nan_abort(self):
        task = conjugate_task(lr_x=1e12, lr_z=1e12)
        task.optimizer = "plain"
        with pytest.raises(NumericsError):
            with np.errstate(all="ignore"):
                rsd_inverse_solve(task, 200, 0, schedule=SCH)

    def test_diagnostics_shape_and_fields(self):
        task = conjugate_task(steps=40)
        x, z, diag = rsd_inverse_solve(task, 40, 0, schedule=SCH, record_every=10)
        assert x.shape == (4, 2) and z.shape == (4, 2)
        assert len(diag["step"]) == 4
        for key in ("data_residual", "coupling_residual", "diversity"):
            assert len(diag[key]) == 4

    def test_repulsion_spreads_particles(self):
        base = dict(steps=800)
        tight = conjugate_task(gamma=0.0, **base)
        loose = conjugate_task(gamma=20.0, **base)
        loose.kernel = KernelSpec(gamma=20.0, gamma_schedule="sigma_scaled")
        _, z0, d0 = rsd_inverse_solve(tight, 800, 0, schedule=SCH)
        _, z1, d1 = rsd_inverse_solve(loose, 800, 0, schedule=SCH)
        assert d1["diversity"][-1] > d0["diversity"][-1] or np.std(z1) > np.std(z0)

    def test_linear_decoder_path(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        task = InverseTask(
            operator=ForwardOperator.mask([True, True, False]),
            y=np.array([1.0, -1.0]),
            sigma_v=0.5,
            prior=STD_PRIOR,
            decoder=DecoderMap.linear(w),
            rho=0.2,
            weighting=WeightingSpec(1.0),
            kernel=KernelSpec(gamma=0.0),
            n_particles=3,
            lr_x=0.05,
            lr_z=0.05,
        )
        x, z, diag = rsd_inverse_solve(task, 300, 0, schedule=SCH)
        assert x.shape == (3, 3) and z.shape == (3, 2)
        assert np.all(np.isfinite(x)) and np.all(np.isfinite(z))
        # coupling pulled x toward the decoded z
        assert diag["coupling_residual"][-1] < diag["coupling_residual"][0]


class TestMultimodalCoverage:
    def test_partial_observation_keeps_both_modes(self):
        prior = toy_bimodal()
        sch = DiffusionSchedule(t_final=0.3)
        a = np.array([[0.0, 1.0]])

        def run(gamma, seed):
            task = InverseTask(
                operator=ForwardOperator.mask([False, True]),
                y=np.array([0.0]),
                sigma_v=0.1,
                prior=prior,
                rho=0.1,
                weighting=WeightingSpec(0.1, sigma_v=0.1, rho=0.1),
                kernel=KernelSpec(gamma=gamma, gamma_schedule="sigma_scaled"),
                n_particles=8,
                lr_x=0.004,
                lr_z=0.004,
                optimizer="plain",
            )
            x, _, _ = rsd_inverse_solve(
                task, 800, seed, schedule=sch,
                init={"kind": "clustered", "point": [0.8, 0.0], "std": 0.02},
            )
            from repulse.metrics import assign_modes

            return assign_modes(x, prior).distinct_mode_count == 2

        # oracle check: the exact posterior keeps both modes at equal weight
        post = gaussian_posterior_oracle(prior, a, np.array([0.0]), 0.1)
        np.testing.assert_allclose(post.weights, [0.5, 0.5], atol=1e-12)

        both_rep = sum(run(10.0, s) for s in range(10))
        both_none = sum(run(0.0, s) for s in range(10))
        assert both_rep > both_none
