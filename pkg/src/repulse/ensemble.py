"""Unconstrained particle samplers.

Four update rules over an ensemble of N coupled particles, all driven by
the exact mixture scores from :mod:`repulse.priors`:

* ``wgf_repulsive_step`` — gradient flow of the log target plus the kernel
  repulsion force, with the variational-score term either dropped
  (``estimator="none"``) or realized as injected sqrt(2 dt) noise
  (``estimator="langevin"``, the Fokker-Planck-exact choice).
* ``rsd_distill_step`` — distillation update: diffuse each particle, form
  the noise-prediction residual weighted by lambda_t, subtract the
  repulsion force on the noisy particles, and apply one optimizer step with
  the assembled vector treated as a constant gradient.
* ``svgd_step`` — kernel-averaged baseline for comparison.
* ``ancestral_sample`` — Euler-Maruyama reverse SDE, the reference sampler.

``bw_flow_step`` evolves a single Gaussian (mean and covariance ODEs with
Monte-Carlo expectations); it is the unimodal flow whose mode-seeking
behaviour the repulsive ensembles are built to fix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .kernels import KernelSpec, repulsion_forces
from .priors import DiffusedMixture, GaussianMixture, diffused_params
from .schedule import DiffusionSchedule, WeightingSpec, timestep_iter

__all__ = [
    "NumericsError",
    "UpdateRule",
    "ParticleEnsemble",
    "GaussianState",
    "initial_positions",
    "wgf_repulsive_step",
    "rsd_distill_step",
    "svgd_step",
    "ancestral_sample",
    "bw_flow_step",
    "run_wgf",
    "run_rsd",
    "run_svgd",
    "RunInfo",
]


class NumericsError(RuntimeError):
    """Raised when a particle coordinate goes non-finite; carries the step."""

    def __init__(self, step: int, message: str = "non-finite particle coordinates"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class UpdateRule:
    """Which sampler moves the particles and how large its steps are."""

    kind: str = "wgf_repulsive"
    step_size: float = 0.03
    optimizer: str = "plain"
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("wgf_repulsive", "rsd_distill", "svgd", "ancestral", "bw_gaussian"):
            raise ValueError(f"unknown update rule {self.kind!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in ("plain", "adaptive_moments"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ParticleEnsemble:
    """N particle positions plus optimizer state and a private RNG."""

    positions: np.ndarray
    rule: UpdateRule
    rng_seed: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step_count: int = field(default=0, init=False)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float)).copy()
        self.m = np.zeros_like(self.positions)
        self.v = np.zeros_like(self.positions)
        self.rng = np.random.default_rng(self.rng_seed)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def apply_gradient(self, grad: np.ndarray) -> None:
        """One optimizer step treating ``grad`` as a constant descent direction."""
        self.step_count += 1
        if self.rule.optimizer == "adaptive_moments":
            _accel.adam_update(
                self.positions,
                np.ascontiguousarray(grad),
                self.m,
                self.v,
                self.step_count,
                self.rule.step_size,
                self.rule.beta1,
                self.rule.beta2,
                self.rule.eps,
            )
        else:
            self.positions -= self.rule.step_size * grad
        if not np.all(np.isfinite(self.positions)):
            raise NumericsError(self.step_count)


def initial_positions(init: dict, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Build starting particles from an init config block."""
    kind = init.get("kind", "random_gaussian")
    std = float(init.get("std", 1.0))
    if kind == "random_gaussian":
        mean = np.broadcast_to(np.asarray(init.get("mean", 0.0), dtype=float), (dim,))
        return mean + std * rng.standard_normal((n, dim))
    if kind == "clustered":
        point = np.asarray(init["point"], dtype=float)
        return point[None, :] + std * rng.standard_normal((n, dim))
    raise ValueError(f"unknown init kind {kind!r}")


# ---------------------------------------------------------------------------
# step rules
# ---------------------------------------------------------------------------


def wgf_repulsive_step(
    ens: ParticleEnsemble,
    target: GaussianMixture,
    spec: KernelSpec,
    schedule: DiffusionSchedule,
    t: float,
    dt: float,
    estimator: str = "langevin",
    noise: np.ndarray | None = None,
) -> ParticleEnsemble:
    """Repulsive gradient-flow step on the time-t diffused target.

    Velocity = target score + repulsion force; ``langevin`` adds
    sqrt(2 dt) Gaussian noise in place of the intractable variational-score
    term, ``none`` performs deterministic ascent.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if estimator not in ("langevin", "none"):
        raise ValueError(f"unknown variational-score estimator {estimator!r}")
    score = DiffusedMixture(target, schedule, t).score(ens.positions)
    _, sigma_t = schedule.alpha_sigma(t)
    force, _ = repulsion_forces(ens.positions, spec, sigma_t)
    ens.positions += dt * (score + force)
    if estimator == "langevin":
        if noise is None:
            noise = ens.rng.standard_normal(ens.positions.shape)
        ens.positions += np.sqrt(2.0 * dt) * noise
    ens.step_count += 1
    if not np.all(np.isfinite(ens.positions)):
        raise NumericsError(ens.step_count)
    return ens


def rsd_distill_step(
    ens: ParticleEnsemble,
    prior: GaussianMixture,
    spec: KernelSpec,
    schedule: DiffusionSchedule,
    weighting: WeightingSpec,
    t: float | None = None,
    eps: np.ndarray | None = None,
    repulsion_on: str = "noisy",
) -> ParticleEnsemble:
    """One distillation update (shared t across the ensemble, eps per particle).

    grad_i = lambda_t (eps_hat(z_t^i) - eps_i) - repulsion force on the
    noisy particles; the assembled vector is treated as a constant and
    handed to the optimizer.
    """
    if t is None:
        t = schedule.t_final * (1.0 - ens.rng.random())
    if eps is None:
        eps = ens.rng.standard_normal(ens.positions.shape)
    alpha, sigma = schedule.alpha_sigma(t)
    z_t = alpha * ens.positions + sigma * eps
    eps_hat = -sigma * DiffusedMixture(prior, schedule, t).score(z_t)
    lam = weighting.weight(t, schedule)
    rep_points = z_t if repulsion_on == "noisy" else ens.positions
    force, _ = repulsion_forces(rep_points, spec, sigma)
    grad = lam * (eps_hat - eps) - force
    ens.apply_gradient(grad)
    return ens


def svgd_step(
    ens: ParticleEnsemble,
    target: GaussianMixture,
    schedule: DiffusionSchedule,
    t: float,
    spec: KernelSpec,
    dt: float,
) -> ParticleEnsemble:
    """Kernelized update: phi_i = mean_j [k_ji score_j + grad_{x_j} k_ji]."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    score = DiffusedMixture(target, schedule, t).score(ens.positions)
    feats = np.ascontiguousarray(spec.features.apply(ens.positions))
    if spec.bandwidth == "median":
        msq = _accel.median_pairwise_distance(feats) if ens.n > 1 else 0.0
        h = msq * msq / np.log(ens.n) if msq > 0.0 and ens.n > 1 else 1.0
    else:
        h = float(spec.bandwidth)
    sq = _accel.pairwise_sqdists(feats)
    k = np.exp(-sq / h)
    # sum_j grad_{x_j} k(x_j, x_i) = -(2/h) W^T (sum_j f_j k_ji - f_i sum_j k_ji)
    ksum = k.sum(axis=0)
    grad_k_feat = -(2.0 / h) * (k.T @ feats - ksum[:, None] * feats)
    phi = (k.T @ score + spec.features.pull_back(grad_k_feat)) / ens.n
    ens.positions += dt * phi
    ens.step_count += 1
    if not np.all(np.isfinite(ens.positions)):
        raise NumericsError(ens.step_count)
    return ens


def ancestral_sample(
    prior: GaussianMixture,
    schedule: DiffusionSchedule,
    num_steps: int,
    count: int,
    seed: int,
) -> np.ndarray:
    """Euler-Maruyama reverse-SDE sampling from t = T down to 0."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    rng = np.random.default_rng(seed)
    d = prior.dim
    z = rng.standard_normal((count, d))
    ts = timestep_iter(schedule, "descending", num_steps)
    dt = schedule.t_final / num_steps
    logw, means, precs, lognorms = diffused_params(prior, schedule, ts)
    for s, t in enumerate(ts):
        beta = float(schedule.beta(t))
        score = _accel.gmm_score_prepped(z, logw, means[s], precs[s], lognorms[s])
        z += dt * (0.5 * beta * z + beta * score)
        z += np.sqrt(beta * dt) * rng.standard_normal((count, d))
    return z


@dataclass
class GaussianState:
    """Mean/covariance pair evolved by the Gaussian-family flow."""

    mean: np.ndarray
    cov: np.ndarray
    repaired: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).copy()
        self.cov = np.asarray(self.cov, dtype=float).copy()


def bw_flow_step(
    state: GaussianState,
    target: GaussianMixture,
    dt: float,
    mc_samples: int = 256,
    rng: np.random.Generator | None = None,
) -> GaussianState:
    """Euler step of the Gaussian-flow mean/covariance ODEs.

    Expectations over x ~ N(mean, cov) use mc_samples Monte-Carlo draws;
    target and variational scores are evaluated exactly per sample, so the
    estimator vanishes identically at a Gaussian fixed point.
    """
    if dt <= 0 or mc_samples < 1:
        raise ValueError("need dt > 0 and mc_samples >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = state.mean.shape[0]
    try:
        chol = np.linalg.cholesky(state.cov)
    except np.linalg.LinAlgError:
        w, q = np.linalg.eigh(0.5 * (state.cov + state.cov.T))
        state = GaussianState(state.mean, (q * np.maximum(w, 1e-10)) @ q.T, repaired=True)
        chol = np.linalg.cholesky(state.cov + 1e-12 * np.eye(d))
    x = state.mean + rng.standard_normal((mc_samples, d)) @ chol.T
    centered = x - state.mean
    g_target = target.score(x)
    g_var = -np.linalg.solve(state.cov, centered.T).T
    diff = g_target - g_var
    new_mean = state.mean + dt * diff.mean(axis=0)
    d_cov = (diff.T @ centered + centered.T @ diff) / mc_samples
    new_cov = state.cov + dt * d_cov
    new_cov = 0.5 * (new_cov + new_cov.T)
    repaired = state.repaired
    evals = np.linalg.eigvalsh(new_cov)
    if evals.min() < 1e-10:
        w, q = np.linalg.eigh(new_cov)
        new_cov = (q * np.maximum(w, 1e-10)) @ q.T
        repaired = True
    return GaussianState(new_mean, new_cov, repaired)


# ---------------------------------------------------------------------------
# run drivers (the hot loops used by the experiments)
# ---------------------------------------------------------------------------


@dataclass
class RunInfo:
    degenerate_steps: int = 0
    snapshots: list = field(default_factory=list)


def _snapshot(info: RunInfo, every: int, step: int, positions: np.ndarray) -> None:
    if every > 0 and step % every == 0:
        info.snapshots.append((step, positions.copy()))


def run_rsd(
    prior: GaussianMixture,
    spec: KernelSpec,
    schedule: DiffusionSchedule,
    weighting: WeightingSpec,
    n_particles: int,
    steps: int,
    seed: int,
    init: dict | None = None,
    rule: UpdateRule | None = None,
    t_order: str = "uniform_random",
    repulsion_on: str = "noisy",
    snapshot_every: int = 0,
) -> tuple[np.ndarray, RunInfo]:
    """Full distillation run; returns final positions and run info.

    RNG draw order: initial positions, then the time sequence (when
    random), then one noise matrix per step.
    """
    rule = rule or UpdateRule(kind="rsd_distill", step_size=0.03, optimizer="adaptive_moments")
    rng = np.random.default_rng(seed)
    pos = initial_positions(init or {"kind": "random_gaussian"}, n_particles, prior.dim, rng)
    if t_order == "uniform_random":
        ts = schedule.t_final * (1.0 - rng.random(steps))
    else:
        ts = timestep_iter(schedule, t_order, steps)
    eps_all = rng.standard_normal((steps, n_particles, prior.dim))
    alphas, sigmas = schedule.alpha_sigma(ts)
    lams = weighting.weight(ts, schedule)
    logw, means, precs, lognorms = diffused_params(prior, schedule, ts)

    m = np.zeros_like(pos)
    v = np.zeros_like(pos)
    info = RunInfo()
    adaptive = rule.optimizer == "adaptive_moments"
    for s in range(steps):
        _snapshot(info, snapshot_every, s, pos)
        z_t = alphas[s] * pos + sigmas[s] * eps_all[s]
        score = _accel.gmm_score_prepped(z_t, logw, means[s], precs[s], lognorms[s])
        eps_hat = -sigmas[s] * score
        rep_points = z_t if repulsion_on == "noisy" else pos
        force, degenerate = repulsion_forces(rep_points, spec, sigmas[s])
        info.degenerate_steps += degenerate
        grad = lams[s] * (eps_hat - eps_all[s]) - force
        if adaptive:
            _accel.adam_update(pos, grad, m, v, s + 1, rule.step_size, rule.beta1, rule.beta2, rule.eps)
        else:
            pos -= rule.step_size * grad
        if not np.all(np.isfinite(pos)):
            raise NumericsError(s + 1)
    _snapshot(info, snapshot_every, steps, pos)
    return pos, info


def run_wgf(
    target: GaussianMixture,
    spec: KernelSpec,
    schedule: DiffusionSchedule,
    n_particles: int,
    steps: int,
    dt: float,
    seed: int,
    init: dict | None = None,
    t_anneal: np.ndarray | float = 0.0,
    estimator: str = "langevin",
    snapshot_every: int = 0,
) -> tuple[np.ndarray, RunInfo]:
    """Full repulsive-flow run. ``t_anneal`` is a fixed score time or a
    per-step array of times (annealed flows)."""
    rng = np.random.default_rng(seed)
    pos = initial_positions(init or {"kind": "random_gaussian"}, n_particles, target.dim, rng)
    ts = np.broadcast_to(np.asarray(t_anneal, dtype=float), (steps,))
    _, sigmas = schedule.alpha_sigma(ts)
    logw, means, precs, lognorms = diffused_params(target, schedule, ts)
    langevin = estimator == "langevin"
    noise = rng.standard_normal((steps, n_particles, target.dim)) if langevin else None
    root = np.sqrt(2.0 * dt)

    info = RunInfo()
    for s in range(steps):
        _snapshot(info, snapshot_every, s, pos)
        score = _accel.gmm_score_prepped(pos, logw, means[s], precs[s], lognorms[s])
        force, degenerate = repulsion_forces(pos, spec, sigmas[s])
        info.degenerate_steps += degenerate
        pos += dt * (score + force)
        if langevin:
            pos += root * noise[s]
        if not np.all(np.isfinite(pos)):
            raise NumericsError(s + 1)
    _snapshot(info, snapshot_every, steps, pos)
    return pos, info


def run_svgd(
    target: GaussianMixture,
    spec: KernelSpec,
    schedule: DiffusionSchedule,
    n_particles: int,
    steps: int,
    dt: float,
    seed: int,
    init: dict | None = None,
    t_anneal: np.ndarray | float = 0.0,
    snapshot_every: int = 0,
) -> tuple[np.ndarray, RunInfo]:
    """Full SVGD run on the same annealing grid as ``run_wgf``."""
    rng = np.random.default_rng(seed)
    pos = initial_positions(init or {"kind": "random_gaussian"}, n_particles, target.dim, rng)
    ens = ParticleEnsemble(pos, UpdateRule(kind="svgd", step_size=dt), rng_seed=seed)
    ts = np.broadcast_to(np.asarray(t_anneal, dtype=float), (steps,))
    info = RunInfo()
    for s in range(steps):
        _snapshot(info, snapshot_every, s, ens.positions)
        svgd_step(ens, target, schedule, float(ts[s]), spec, dt)
    _snapshot(info, snapshot_every, steps, ens.positions)
    return ens.positions, info
