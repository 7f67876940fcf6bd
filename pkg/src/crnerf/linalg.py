"""Symmetric eigensolver, PSD square roots and the optimal linear feature transform.

The transform problem: find ``T`` minimising

    E||T(f_cr - mu_cr) + mu_a - f_a||^2 + beta * E||P(T(f_cr - mu_cr) + mu_a) - f_cr||^2

over maps that carry ``N(mu_cr, S_cr)`` onto ``N(mu_a, S_a)``.  Every such map
is ``S_a^{1/2} Q S_cr^{-1/2}`` with ``Q`` orthogonal, and on that set only the
cross term ``-2 beta tr(P T S_cr)`` varies.  Maximising ``tr(Q S_cr^{1/2} P S_a^{1/2})``
over orthogonal ``Q`` is an orthogonal Procrustes problem whose solution gives

    T = P^{-1} S_cr^{-1/2} (S_cr^{1/2} P S_a P^T S_cr^{1/2})^{1/2} S_cr^{-1/2}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotConvergedError(RuntimeError):
    pass


class SingularMatrixError(ValueError):
    pass


class NotPSDError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def _symmetrize(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def eigh_symmetric(a, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = _symmetrize(a)
    n = a.shape[0]
    v = np.eye(n)
    target = tol * np.linalg.norm(a)
    mask = ~np.eye(n, dtype=bool)

    def off(m):
        return np.sqrt(np.sum(m[mask] ** 2))

    sweeps = 0
    while off(a) > target:
        if sweeps >= max_sweeps:
            raise NotConvergedError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {off(a):.3e})"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                diff = a[q, q] - a[p, p]
                # rotation angle underflows to zero; the entry is already negligible
                if abs(apq) <= 1e-300 * abs(diff) or apq == 0.0:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def sqrtm_psd(a, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse square root) of a PSD matrix."""
    a = _symmetrize(a)
    w, v = eigh_symmetric(a)
    trace = float(np.trace(a))
    scale = abs(trace)
    if w.size and w[-1] < -1e-9 * scale:
        raise NotPSDError(f"matrix is not PSD: smallest eigenvalue {w[-1]:.3e}, trace {trace:.3e}")
    w = np.maximum(w, 0.0)
    if inverse:
        if w.size == 0 or w[-1] <= 1e-10 * scale or scale == 0.0:
            raise SingularMatrixError(
                f"cannot invert square root: smallest eigenvalue {w[-1] if w.size else 0:.3e}, trace {trace:.3e}"
            )
        root = 1.0 / np.sqrt(w)
    else:
        root = np.sqrt(w)
    s = (v * root) @ v.T
    return 0.5 * (s + s.T)


def condition_number(m) -> float:
    w, _ = eigh_symmetric(np.asarray(m, dtype=np.float64).T @ np.asarray(m, dtype=np.float64))
    if w[-1] <= 0:
        return float("inf")
    return float(np.sqrt(w[0] / w[-1]))


def constraint_residual(t, cr: GaussianSpec, a: GaussianSpec) -> float:
    """Relative Frobenius error of ``T S_cr T^T`` against ``S_a``."""
    t = np.asarray(t, dtype=np.float64)
    diff = t @ cr.covariance @ t.T - a.covariance
    return float(np.linalg.norm(diff) / max(np.linalg.norm(a.covariance), 1e-300))


def closed_form_transform(cr: GaussianSpec, a: GaussianSpec, p, tol: float = 1e-8) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (cr.dim, cr.dim) or a.dim != cr.dim:
        raise ValueError("P, cross-ray and appearance statistics must share one dimension")
    if condition_number(p) >= 1e8:
        raise SingularMatrixError("P is not invertible (condition number >= 1e8)")
    s_half = sqrtm_psd(cr.covariance)
    s_inv_half = sqrtm_psd(cr.covariance, inverse=True)
    inner = sqrtm_psd(s_half @ p @ a.covariance @ p.T @ s_half)
    t = np.linalg.solve(p, s_inv_half @ inner @ s_inv_half)
    res = constraint_residual(t, cr, a)
    if res > tol:
        raise ArithmeticError(f"closed-form transform violates the covariance constraint ({res:.3e})")
    return t


def transform_objective(t, cr: GaussianSpec, a: GaussianSpec, p, beta: float) -> float:
    """Exact Gaussian expectation of the two-term alignment objective."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if t.shape != (cr.dim, cr.dim) or p.shape != t.shape or a.dim != cr.dim:
        raise ValueError("shape mismatch between T, P and the Gaussian statistics")
    tst = t @ cr.covariance @ t.T
    first = np.trace(tst) + np.trace(a.covariance)
    shift = p @ a.mean - cr.mean
    second = (
        np.trace(p @ tst @ p.T)
        + np.trace(cr.covariance)
        - 2.0 * np.trace(p @ t @ cr.covariance)
        + shift @ shift
    )
    return float(first + beta * second)


def haar_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def feasible_roots(cr: GaussianSpec, a: GaussianSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(S_a^{1/2}, S_cr^{-1/2})``, the fixed factors of every feasible map."""
    return sqrtm_psd(a.covariance), sqrtm_psd(cr.covariance, inverse=True)


def sample_feasible_transform(cr: GaussianSpec, a: GaussianSpec, seed: int | None = None, q=None, roots=None) -> np.ndarray:
    """A random ``T`` with ``T S_cr T^T = S_a``; ``q`` overrides the Haar draw.

    Pass ``roots=feasible_roots(cr, a)`` when drawing many samples.
    """
    if q is None:
        q = haar_orthogonal(cr.dim, np.random.default_rng(seed))
    a_half, cr_inv_half = roots if roots is not None else feasible_roots(cr, a)
    return a_half @ np.asarray(q, dtype=np.float64) @ cr_inv_half


def random_spd(dim: int, rng: np.random.Generator, max_condition: float = 100.0) -> np.ndarray:
    q = haar_orthogonal(dim, rng)
    w = rng.uniform(1.0, max_condition, size=dim)
    w[0], w[-1] = 1.0, max_condition * rng.uniform(0.5, 1.0)
    w *= rng.uniform(0.1, 2.0)
    m = (q * w) @ q.T
    return 0.5 * (m + m.T)


def random_instance(dim: int, rng: np.random.Generator):
    """Random ``(cr, a, P)`` with well-conditioned covariances and ``P``."""
    cr = GaussianSpec(rng.normal(size=dim), random_spd(dim, rng))
    a = GaussianSpec(rng.normal(size=dim), random_spd(dim, rng))
    p = haar_orthogonal(dim, rng) @ np.diag(rng.uniform(0.5, 2.0, size=dim)) @ haar_orthogonal(dim, rng)
    return cr, a, p


def verify_transform(dim: int | None, trials: int, feasible_samples: int, seed: int):
    """Closed form vs random feasible transforms; yields one row per trial.

    ``dim=None`` cycles the dimension through 2..8; beta cycles through
    0.1, 1 and 10.
    """
    rng = np.random.default_rng(seed)
    betas = (0.1, 1.0, 10.0)
    for trial in range(trials):
        c = dim if dim is not None else 2 + trial % 7
        beta = betas[trial % 3]
        cr, a, p = random_instance(c, rng)
        t = closed_form_transform(cr, a, p)
        best = transform_objective(t, cr, a, p, beta)
        roots = feasible_roots(cr, a)
        rand = min(
            transform_objective(sample_feasible_transform(cr, a, q=haar_orthogonal(c, rng), roots=roots), cr, a, p, beta)
            for _ in range(feasible_samples)
        )
        yield {
            "trial": trial,
            "dim": c,
            "beta": beta,
            "objective_closed_form": best,
            "min_objective_random": rand,
            "constraint_residual": constraint_residual(t, cr, a),
        }
