"""Hot numeric kernels, in two interchangeable flavors.

Every function here exists twice: a vectorized pure-numpy version and a
numba ``@njit`` version with explicit loops. The active flavor is chosen
once at import from the ``REPULSE_NUMBA`` environment variable (set it to
``0``, ``false`` or ``off`` to force the numpy path; default is numba
whenever it imports). Both flavors compute the same values; the parity
tests and ``benchmarks/bench_backends.py`` compare them directly.

Sums reduce in a fixed order in both flavors, so a given backend is
deterministic run-to-run.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "backend",
    "impls",
    "pairwise_sqdists",
    "median_pairwise_distance",
    "gmm_score_prepped",
    "repulsion_forces_feat",
    "adam_update",
    "energy_sums",
]


def _numba_requested() -> bool:
    return os.environ.get("REPULSE_NUMBA", "1").strip().lower() not in ("0", "false", "off")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _pairwise_sqdists_np(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _median_pairwise_distance_np(x: np.ndarray) -> float:
    n = x.shape[0]
    sq = _pairwise_sqdists_np(x)
    iu = np.triu_indices(n, k=1)
    return float(np.median(np.sqrt(sq[iu])))


def _gmm_score_prepped_np(points, logw, mus, precs, lognorms) -> np.ndarray:
    diff = points[:, None, :] - mus[None, :, :]
    quad = np.einsum("nkd,kde,nke->nk", diff, precs, diff)
    comp = logw[None, :] + lognorms[None, :] - 0.5 * quad
    m = comp.max(axis=1, keepdims=True)
    w = np.exp(comp - m)
    resp = w / w.sum(axis=1, keepdims=True)
    comp_scores = -np.einsum("kde,nke->nkd", precs, diff)
    return np.einsum("nk,nkd->nd", resp, comp_scores)


def _repulsion_forces_feat_np(feats, h, gamma_eff, log_sum) -> np.ndarray:
    # force on i = -gamma_eff * grad_{f_i} Phi with Phi the log-kernel
    # coupling; for the RBF this points away from the neighbours.
    scale = 2.0 * gamma_eff / h
    if not log_sum:
        n = feats.shape[0]
        return scale * (n * feats - feats.sum(axis=0)[None, :])
    diff = feats[:, None, :] - feats[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    k = np.exp(-sq / h)
    weights = k / k.sum(axis=1, keepdims=True)
    return scale * np.einsum("ij,ijk->ik", weights, diff)


def _adam_update_np(pos, grad, m, v, step, lr, beta1, beta2, eps) -> None:
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    pos -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _energy_sums_np(a, b):
    def mean_norm(u, w):
        total = 0.0
        chunk = max(1, 4_000_000 // max(1, w.shape[0]))
        for i0 in range(0, u.shape[0], chunk):
            d = u[i0 : i0 + chunk, None, :] - w[None, :, :]
            total += np.sqrt(np.einsum("ijk,ijk->ij", d, d)).sum()
        return total / (u.shape[0] * w.shape[0])

    return mean_norm(a, b), mean_norm(a, a), mean_norm(b, b)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_HAVE_NUMBA = False
if _numba_requested():
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised only without numba
        _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _pairwise_sqdists_nb(x):
        n, d = x.shape
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    s += t * t
                out[i, j] = s
                out[j, i] = s
        return out

    @njit(cache=True, nogil=True)
    def _median_pairwise_distance_nb(x):
        n = x.shape[0]
        d = x.shape[1]
        m = n * (n - 1) // 2
        dists = np.empty(m)
        idx = 0
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    s += t * t
                dists[idx] = math.sqrt(s)
                idx += 1
        return float(np.median(dists))

    @njit(cache=True, nogil=True)
    def _gmm_score_prepped_nb(points, logw, mus, precs, lognorms):
        n, d = points.shape
        kk = mus.shape[0]
        out = np.zeros((n, d))
        logp = np.empty(kk)
        cs = np.empty((kk, d))
        for i in range(n):
            mx = -1e300
            for k in range(kk):
                quad = 0.0
                for a in range(d):
                    pa = 0.0
                    for b in range(d):
                        pa += precs[k, a, b] * (points[i, b] - mus[k, b])
                    cs[k, a] = -pa
                    quad += (points[i, a] - mus[k, a]) * pa
                logp[k] = logw[k] + lognorms[k] - 0.5 * quad
                if logp[k] > mx:
                    mx = logp[k]
            denom = 0.0
            for k in range(kk):
                logp[k] = math.exp(logp[k] - mx)
                denom += logp[k]
            if denom == 0.0 or denom != denom:
                # overflowed input; propagate NaN so callers can abort
                for a in range(d):
                    out[i, a] = np.nan
                continue
            for k in range(kk):
                r = logp[k] / denom
                for a in range(d):
                    out[i, a] += r * cs[k, a]
        return out

    @njit(cache=True, nogil=True)
    def _repulsion_forces_feat_nb(feats, h, gamma_eff, log_sum):
        n, p = feats.shape
        out = np.zeros((n, p))
        scale = 2.0 * gamma_eff / h
        for i in range(n):
            if log_sum:
                denom = 0.0
                for j in range(n):
                    s = 0.0
                    for a in range(p):
                        t = feats[i, a] - feats[j, a]
                        s += t * t
                    denom += math.exp(-s / h)
                for j in range(n):
                    s = 0.0
                    for a in range(p):
                        t = feats[i, a] - feats[j, a]
                        s += t * t
                    w = math.exp(-s / h) / denom
                    for a in range(p):
                        out[i, a] += scale * w * (feats[i, a] - feats[j, a])
            else:
                for j in range(n):
                    for a in range(p):
                        out[i, a] += scale * (feats[i, a] - feats[j, a])
        return out

    @njit(cache=True, nogil=True)
    def _adam_update_nb(pos, grad, m, v, step, lr, beta1, beta2, eps):
        n, d = pos.shape
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for i in range(n):
            for a in range(d):
                g = grad[i, a]
                m[i, a] = beta1 * m[i, a] + (1.0 - beta1) * g
                v[i, a] = beta2 * v[i, a] + (1.0 - beta2) * g * g
                pos[i, a] -= lr * (m[i, a] / bc1) / (math.sqrt(v[i, a] / bc2) + eps)

    @njit(cache=True, nogil=True)
    def _energy_sums_nb(a, b):
        na, d = a.shape
        nb_ = b.shape[0]
        cross = 0.0
        for i in range(na):
            for j in range(nb_):
                s = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    s += t * t
                cross += math.sqrt(s)
        within_a = 0.0
        for i in range(na):
            for j in range(i + 1, na):
                s = 0.0
                for k in range(d):
                    t = a[i, k] - a[j, k]
                    s += t * t
                within_a += math.sqrt(s)
        within_b = 0.0
        for i in range(nb_):
            for j in range(i + 1, nb_):
                s = 0.0
                for k in range(d):
                    t = b[i, k] - b[j, k]
                    s += t * t
                within_b += math.sqrt(s)
        return (
            cross / (na * nb_),
            2.0 * within_a / (na * na),
            2.0 * within_b / (nb_ * nb_),
        )


_NUMPY_IMPLS = {
    "pairwise_sqdists": _pairwise_sqdists_np,
    "median_pairwise_distance": _median_pairwise_distance_np,
    "gmm_score_prepped": _gmm_score_prepped_np,
    "repulsion_forces_feat": _repulsion_forces_feat_np,
    "adam_update": _adam_update_np,
    "energy_sums": _energy_sums_np,
}

if _HAVE_NUMBA:
    _NUMBA_IMPLS = {
        "pairwise_sqdists": _pairwise_sqdists_nb,
        "median_pairwise_distance": _median_pairwise_distance_nb,
        "gmm_score_prepped": _gmm_score_prepped_nb,
        "repulsion_forces_feat": _repulsion_forces_feat_nb,
        "adam_update": _adam_update_nb,
        "energy_sums": _energy_sums_nb,
    }
    _ACTIVE = "numba"
else:
    _NUMBA_IMPLS = None
    _ACTIVE = "numpy"


def backend() -> str:
    """Name of the active backend, ``"numba"`` or ``"numpy"``."""
    return _ACTIVE


def impls(name: str):
    """Implementation table for ``name`` ("numpy" or "numba"), for tests/benchmarks."""
    if name == "numpy":
        return _NUMPY_IMPLS
    if name == "numba":
        if _NUMBA_IMPLS is None:
            raise RuntimeError("numba backend unavailable (not installed or disabled)")
        return _NUMBA_IMPLS
    raise ValueError(f"unknown backend {name!r}")


_active_impls = _NUMBA_IMPLS if _ACTIVE == "numba" else _NUMPY_IMPLS

pairwise_sqdists = _active_impls["pairwise_sqdists"]
median_pairwise_distance = _active_impls["median_pairwise_distance"]
gmm_score_prepped = _active_impls["gmm_score_prepped"]
repulsion_forces_feat = _active_impls["repulsion_forces_feat"]
adam_update = _active_impls["adam_update"]
energy_sums = _active_impls["energy_sums"]
