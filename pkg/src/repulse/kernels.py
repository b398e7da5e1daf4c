"""RBF repulsion between ensemble members.

Particles are compared in a feature space (identity or a fixed linear map)
through k(x_i, x_j) = exp(-||g(x_i) - g(x_j)||^2 / h) with the median
heuristic h = m^2 / log N. Two coupling potentials are supported:

* ``log_sum``:  Phi_i = log sum_j k(x_i, x_j)
* ``sum_log``:  Phi_i = sum_j log k(x_i, x_j)

``repulsion_grad`` returns the force -gamma_eff * grad_{x_i} Phi_i, oriented
so that with ``sign="repulsive"`` it pushes particle i away from its
neighbours (gradients of Phi itself point toward them). ``sign="attractive"``
negates the force. The bandwidth is held constant during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel

__all__ = [
    "FeatureMap",
    "KernelSpec",
    "median_bandwidth",
    "rbf",
    "repulsion_grad",
    "repulsion_forces",
    "DEGENERATE_BANDWIDTH_FALLBACK",
]

DEGENERATE_BANDWIDTH_FALLBACK = 1.0


@dataclass(frozen=True)
class FeatureMap:
    """Identity or fixed linear map applied before the kernel."""

    matrix: np.ndarray | None = None

    @classmethod
    def identity(cls) -> "FeatureMap":
        return cls(None)

    @classmethod
    def linear(cls, w) -> "FeatureMap":
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if not np.all(np.isfinite(w)):
            raise ValueError("feature matrix must have finite entries")
        return cls(w)

    @property
    def is_identity(self) -> bool:
        return self.matrix is None

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.matrix is None:
            return np.asarray(x, dtype=float)
        return np.asarray(x, dtype=float) @ self.matrix.T

    def pull_back(self, grad_feat: np.ndarray) -> np.ndarray:
        """Chain rule: map a feature-space gradient to input space."""
        if self.matrix is None:
            return grad_feat
        return grad_feat @ self.matrix


@dataclass(frozen=True)
class KernelSpec:
    """Repulsion configuration.

    ``gamma == 0`` disables the coupling entirely. ``bandwidth`` is either
    the string ``"median"`` or a fixed positive float. ``gamma_schedule``
    selects between a constant weight and gamma * sigma_t.
    """

    gamma: float = 1.0
    gamma_schedule: str = "constant"
    bandwidth: object = "median"
    form: str = "log_sum"
    sign: str = "repulsive"
    features: FeatureMap = field(default_factory=FeatureMap.identity)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.gamma_schedule not in ("constant", "sigma_scaled"):
            raise ValueError(f"unknown gamma_schedule {self.gamma_schedule!r}")
        if self.form not in ("log_sum", "sum_log"):
            raise ValueError(f"unknown repulsion form {self.form!r}")
        if self.sign not in ("repulsive", "attractive"):
            raise ValueError(f"unknown sign {self.sign!r}")
        if not (self.bandwidth == "median" or (np.isscalar(self.bandwidth) and self.bandwidth > 0)):
            raise ValueError("bandwidth must be 'median' or a positive number")

    def gamma_eff(self, sigma_t: float) -> float:
        if self.gamma_schedule == "sigma_scaled":
            return self.gamma * sigma_t
        return self.gamma


def median_bandwidth(points, features: FeatureMap | None = None) -> float:
    """h = m^2 / log N with m the median pairwise feature-space distance.

    All-identical points would give h = 0; that degenerate case returns the
    fixed fallback of 1.0 (callers can flag it via ``repulsion_forces``).
    """
    features = features or FeatureMap.identity()
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two points")
    m = _accel.median_pairwise_distance(np.ascontiguousarray(features.apply(pts)))
    if m <= 0.0:
        return DEGENERATE_BANDWIDTH_FALLBACK
    return m * m / np.log(n)


def rbf(x_i, x_j, h: float, features: FeatureMap | None = None) -> float:
    """exp(-||g(x_i) - g(x_j)||^2 / h); equals 1 at x_i == x_j."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    features = features or FeatureMap.identity()
    d = features.apply(np.asarray(x_i, dtype=float)) - features.apply(np.asarray(x_j, dtype=float))
    return float(np.exp(-(d @ d) / h))


def _resolve_bandwidth(spec: KernelSpec, feats: np.ndarray) -> tuple[float, bool]:
    if spec.bandwidth != "median":
        return float(spec.bandwidth), False
    n = feats.shape[0]
    if n < 2:
        return DEGENERATE_BANDWIDTH_FALLBACK, False
    m = _accel.median_pairwise_distance(feats)
    if m <= 0.0:
        return DEGENERATE_BANDWIDTH_FALLBACK, True
    return m * m / np.log(n), False


def repulsion_forces(
    points, spec: KernelSpec, sigma_t: float = 1.0
) -> tuple[np.ndarray, bool]:
    """Repulsion force on every particle at once.

    Returns ``(forces, degenerate)`` where ``forces`` is (N, d) and
    ``degenerate`` flags the all-identical-particles bandwidth fallback.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    gamma_eff = spec.gamma_eff(sigma_t)
    if gamma_eff == 0.0 or n == 1:
        return np.zeros_like(pts), False
    feats = np.ascontiguousarray(spec.features.apply(pts))
    h, degenerate = _resolve_bandwidth(spec, feats)
    force_feat = _accel.repulsion_forces_feat(feats, h, gamma_eff, spec.form == "log_sum")
    force = spec.features.pull_back(force_feat)
    if spec.sign == "attractive":
        force = -force
    return force, degenerate


def repulsion_grad(i: int, points, spec: KernelSpec, sigma_t: float = 1.0) -> np.ndarray:
    """Force on particle ``i``; see module docstring for orientation."""
    forces, _ = repulsion_forces(points, spec, sigma_t)
    return forces[i]
