"""Backend parity: the numba kernels must agree with the numpy fallbacks."""

import os
import subprocess
import sys

import numpy as np
import pytest

from repulse import _accel


def _have_numba():
    try:
        return _accel.impls("numba") is not None
    except RuntimeError:
        return False


needs_numba = pytest.mark.skipif(not _have_numba(), reason="numba backend unavailable")


@needs_numba
class TestParity:
    def setup_method(self):
        self.np_impl = _accel.impls("numpy")
        self.nb_impl = _accel.impls("numba")
        self.rng = np.random.default_rng(0)

    def test_pairwise_sqdists(self):
        x = np.ascontiguousarray(self.rng.normal(0, 1, (9, 4)))
        np.testing.assert_allclose(self.np_impl["pairwise_sqdists"](x), self.nb_impl["pairwise_sqdists"](x), atol=1e-13)

    def test_median_pairwise_distance(self):
        for n in (2, 3, 8):
            x = np.ascontiguousarray(self.rng.normal(0, 2, (n, 3)))
            a = self.np_impl["median_pairwise_distance"](x)
            b = self.nb_impl["median_pairwise_distance"](x)
            assert a == pytest.approx(b, rel=1e-14)

    def test_gmm_score(self):
        x = np.ascontiguousarray(self.rng.normal(0, 2, (20, 3)))
        logw = np.log(np.array([0.2, 0.5, 0.3]))
        mus = self.rng.normal(0, 1, (3, 3))
        covs = np.stack([np.eye(3) * v for v in (0.5, 1.0, 2.0)])
        precs = np.linalg.inv(covs)
        lognorms = -0.5 * (3 * np.log(2 * np.pi) + np.linalg.slogdet(covs)[1])
        a = self.np_impl["gmm_score_prepped"](x, logw, mus, precs, lognorms)
        b = self.nb_impl["gmm_score_prepped"](x, logw, mus, precs, lognorms)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_repulsion_forces(self):
        x = np.ascontiguousarray(self.rng.normal(0, 1, (7, 2)))
        for log_sum in (True, False):
            a = self.np_impl["repulsion_forces_feat"](x, 0.8, 1.7, log_sum)
            b = self.nb_impl["repulsion_forces_feat"](x, 0.8, 1.7, log_sum)
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_adam_update(self):
        pos = self.rng.normal(0, 1, (5, 2))
        grad = self.rng.normal(0, 1, (5, 2))
        state_a = (pos.copy(), np.zeros_like(pos), np.zeros_like(pos))
        state_b = (pos.copy(), np.zeros_like(pos), np.zeros_like(pos))
        for step in range(1, 6):
            self.np_impl["adam_update"](state_a[0], grad, state_a[1], state_a[2], step, 0.05, 0.9, 0.99, 1e-8)
            self.nb_impl["adam_update"](state_b[0], grad, state_b[1], state_b[2], step, 0.05, 0.9, 0.99, 1e-8)
        np.testing.assert_allclose(state_a[0], state_b[0], atol=1e-14)

    def test_energy_sums(self):
        a = np.ascontiguousarray(self.rng.normal(0, 1, (300, 2)))
        b = np.ascontiguousarray(self.rng.normal(1, 2, (201, 2)))
        got_np = self.np_impl["energy_sums"](a, b)
        got_nb = self.nb_impl["energy_sums"](a, b)
        np.testing.assert_allclose(got_np, got_nb, rtol=1e-12)


def test_env_flag_selects_numpy():
    env = dict(os.environ, REPULSE_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", "import repulse; print(repulse.backend())"],
        capture_output=True, text=True, env=env, check=True,
    )
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_default_backend_is_numba():
    env = {k: v for k, v in os.environ.items() if k != "REPULSE_NUMBA"}
    out = subprocess.run(
        [sys.executable, "-c", "import repulse; print(repulse.backend())"],
        capture_output=True, text=True, env=env, check=True,
    )
    assert out.stdout.strip() == "numba"


def test_unknown_backend_name():
    with pytest.raises(ValueError):
        _accel.impls("fortran")


def test_sampler_agrees_across_backends():
    """End-to-end: a full distillation run matches between backends."""
    if not _have_numba():
        pytest.skip("numba backend unavailable")
    code = (
        "import numpy as np, repulse as rp\n"
        "sch = rp.DiffusionSchedule()\n"
        "pos, _ = rp.run_rsd(rp.toy_bimodal(), rp.KernelSpec(gamma=1.0, gamma_schedule='sigma_scaled'),\n"
        "                    sch, rp.WeightingSpec(1.0), 2, 400, 3, t_order='descending')\n"
        "print(repr(pos.tolist()))\n"
    )
    outs = []
    for flag in ("1", "0"):
        env = dict(os.environ, REPULSE_NUMBA=flag)
        r = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
        outs.append(np.array(eval(r.stdout.strip())))
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-7, atol=1e-9)
