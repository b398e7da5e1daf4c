"""Closed-form Gaussian-mixture targets.

A mixture with known parameters stands in for a learned denoiser: pushing a
GMM through the forward noising map x_t = alpha x_0 + sigma eps keeps it a
GMM, so scores, noise predictions, posterior means and conjugate posteriors
are all available exactly. These exact quantities are the oracles every
sampler in this package is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import DiffusionSchedule

__all__ = [
    "GaussianMixture",
    "DiffusedMixture",
    "score",
    "log_pdf",
    "eps_predict",
    "tweedie",
    "sample",
    "gaussian_posterior_oracle",
    "toy_bimodal",
    "ring_mixture",
]


def _as_full_covariances(covariances, k: int, dim: int) -> np.ndarray:
    """Normalize scalar / diagonal / full covariance storage to (K, d, d)."""
    c = np.asarray(covariances, dtype=float)
    if c.ndim == 0:
        return np.stack([np.eye(dim) * float(c)] * k)
    if c.ndim == 1:
        if c.shape[0] == k:
            return np.stack([np.eye(dim) * float(v) for v in c])
        raise ValueError("1-d covariance input must hold one scalar per component")
    if c.ndim == 2 and c.shape == (k, dim):
        return np.stack([np.diag(row) for row in c])
    if c.ndim == 3 and c.shape == (k, dim, dim):
        return c.copy()
    raise ValueError(f"cannot interpret covariance array of shape {c.shape}")


class GaussianMixture:
    """Mixture of K Gaussians in d dimensions.

    Immutable after construction; weights must sum to one and every
    covariance must pass a Cholesky factorization.
    """

    def __init__(self, weights, means, covariances):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        k, dim = self.means.shape
        if self.weights.shape != (k,):
            raise ValueError("weights and means disagree on the number of components")
        if np.any(self.weights <= 0):
            raise ValueError("all mixture weights must be positive")
        total = self.weights.sum()
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"weights must sum to 1, got {total}")
        self.weights = self.weights / total
        self.covariances = _as_full_covariances(covariances, k, dim)
        self._chols = np.empty_like(self.covariances)
        for i, cov in enumerate(self.covariances):
            if not np.allclose(cov, cov.T, atol=1e-10):
                raise ValueError(f"covariance {i} is not symmetric")
            try:
                self._chols[i] = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"covariance {i} is not positive definite") from exc
        # precision matrices and log-normalizers, used by every density query
        self._precisions = np.stack([np.linalg.inv(c) for c in self.covariances])
        logdets = 2.0 * np.log(np.diagonal(self._chols, axis1=1, axis2=2)).sum(axis=1)
        self._lognorms = -0.5 * (dim * np.log(2.0 * np.pi) + logdets)
        self._logw = np.log(self.weights)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        # x: (n, d) -> (n, K)
        diff = x[:, None, :] - self.means[None, :, :]
        quad = np.einsum("nkd,kde,nke->nk", diff, self._precisions, diff)
        return self._lognorms[None, :] - 0.5 * quad

    def log_pdf(self, x):
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        comp = self._component_logpdfs(x2) + self._logw[None, :]
        m = comp.max(axis=1)
        out = m + np.log(np.exp(comp - m[:, None]).sum(axis=1))
        return float(out[0]) if np.ndim(x) == 1 else out

    def responsibilities(self, x) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        comp = self._component_logpdfs(x2) + self._logw[None, :]
        m = comp.max(axis=1, keepdims=True)
        w = np.exp(comp - m)
        return w / w.sum(axis=1, keepdims=True)

    def score(self, x):
        """Gradient of log_pdf, responsibility-weighted component scores."""
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        resp = self.responsibilities(x2)
        diff = x2[:, None, :] - self.means[None, :, :]
        comp_scores = -np.einsum("kde,nke->nkd", self._precisions, diff)
        out = np.einsum("nk,nkd->nd", resp, comp_scores)
        return out[0] if np.ndim(x) == 1 else out

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.n_components, size=count, p=self.weights)
        z = rng.standard_normal((count, self.dim))
        return self.means[ks] + np.einsum("nde,ne->nd", self._chols[ks], z)


@dataclass(frozen=True)
class DiffusedMixture:
    """Push-forward of ``base`` under x_t = alpha(t) x0 + sigma(t) eps.

    Component k becomes Normal(alpha mu_k, alpha^2 Sigma_k + sigma^2 I).
    """

    base: GaussianMixture
    schedule: DiffusionSchedule
    t: float

    @property
    def mixture(self) -> GaussianMixture:
        alpha, sigma = self.schedule.alpha_sigma(self.t)
        covs = alpha**2 * self.base.covariances + sigma**2 * np.eye(self.base.dim)
        return GaussianMixture(self.base.weights, alpha * self.base.means, covs)

    def log_pdf(self, x):
        return self.mixture.log_pdf(x)

    def score(self, x):
        return self.mixture.score(x)


def score(mixture: GaussianMixture, schedule: DiffusionSchedule, t: float, x):
    """Exact score of the time-t diffused mixture at x."""
    return DiffusedMixture(mixture, schedule, t).score(x)


def log_pdf(mixture: GaussianMixture, schedule: DiffusionSchedule, t: float, x):
    return DiffusedMixture(mixture, schedule, t).log_pdf(x)


def eps_predict(mixture: GaussianMixture, schedule: DiffusionSchedule, t: float, x):
    """Noise prediction -sigma(t) * score, the denoiser output stand-in."""
    _, sigma = schedule.alpha_sigma(t)
    return -sigma * score(mixture, schedule, t, x)


def tweedie(mixture: GaussianMixture, schedule: DiffusionSchedule, t: float, x_t):
    """Posterior mean E[x0 | x_t] = (x_t - sigma eps_hat) / alpha."""
    x_t = np.asarray(x_t, dtype=float)
    if t == 0.0:
        return x_t.copy()
    alpha, sigma = schedule.alpha_sigma(t)
    return (x_t - sigma * eps_predict(mixture, schedule, t, x_t)) / alpha


def sample(mixture: GaussianMixture, schedule: DiffusionSchedule, t: float, count: int, seed: int) -> np.ndarray:
    """i.i.d. draws from the diffused mixture, deterministic in ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return DiffusedMixture(mixture, schedule, t).mixture.sample(count, rng)


def gaussian_posterior_oracle(
    prior: GaussianMixture, A: np.ndarray, y: np.ndarray, sigma_v: float
) -> GaussianMixture:
    """Exact posterior mixture for y = A x + v, v ~ N(0, sigma_v^2 I).

    Conjugate per component; weights are reweighted by component evidences.
    Cholesky-based, intended for d <= 16.
    """
    if sigma_v <= 0:
        raise ValueError("sigma_v must be positive")
    if prior.dim > 16:
        raise ValueError("posterior oracle supports d <= 16")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m, d = A.shape
    if d != prior.dim or y.shape != (m,):
        raise ValueError("operator/measurement dimensions do not match the prior")

    ata = A.T @ A / sigma_v**2
    aty = A.T @ y / sigma_v**2
    post_means = np.empty_like(prior.means)
    post_covs = np.empty_like(prior.covariances)
    log_evidence = np.empty(prior.n_components)
    for k in range(prior.n_components):
        prec = prior._precisions[k] + ata
        post_covs[k] = np.linalg.inv(prec)
        post_covs[k] = 0.5 * (post_covs[k] + post_covs[k].T)
        post_means[k] = post_covs[k] @ (prior._precisions[k] @ prior.means[k] + aty)
        # evidence: y ~ N(A mu_k, A Sigma_k A^T + sigma_v^2 I)
        s = A @ prior.covariances[k] @ A.T + sigma_v**2 * np.eye(m)
        try:
            L = np.linalg.cholesky(s)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"evidence covariance for component {k} is singular") from exc
        r = np.linalg.solve(L, y - A @ prior.means[k])
        log_evidence[k] = -0.5 * (m * np.log(2 * np.pi) + 2 * np.log(np.diag(L)).sum() + r @ r)

    logw = np.log(prior.weights) + log_evidence
    logw -= logw.max()
    w = np.exp(logw)
    return GaussianMixture(w / w.sum(), post_means, post_covs)


def diffused_params(mixture: GaussianMixture, schedule: DiffusionSchedule, ts):
    """Per-step diffused-component parameters for a whole time sequence.

    Returns (logw, means (S,K,d), precisions (S,K,d,d), lognorms (S,K)),
    ready for batched score evaluation inside sampler loops.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    alphas, sigmas = schedule.alpha_sigma(ts)
    d = mixture.dim
    eye = np.eye(d)
    covs = (
        alphas[:, None, None, None] ** 2 * mixture.covariances[None, :, :, :]
        + sigmas[:, None, None, None] ** 2 * eye[None, None, :, :]
    )
    precs = np.linalg.inv(covs)
    _, logdets = np.linalg.slogdet(covs)
    lognorms = -0.5 * (d * np.log(2.0 * np.pi) + logdets)
    means = alphas[:, None, None] * mixture.means[None, :, :]
    return mixture._logw, means, precs, lognorms


def toy_bimodal() -> GaussianMixture:
    """Equal-weight pair of tight modes at (+1, 0) and (-1, 0)."""
    return GaussianMixture(
        weights=[0.5, 0.5],
        means=[[1.0, 0.0], [-1.0, 0.0]],
        covariances=[0.005, 0.005],
    )


def ring_mixture(modes: int = 8, radius: float = 3.0, var: float = 0.05) -> GaussianMixture:
    """Equal-weight isotropic modes evenly spaced on a circle."""
    angles = 2.0 * np.pi * np.arange(modes) / modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(modes, 1.0 / modes), means, np.full(modes, var))
