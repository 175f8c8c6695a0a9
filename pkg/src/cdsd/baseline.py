"""PCA-based comparison pipeline.

PCA finds an orthonormal loading basis for the observed series, a Varimax
rotation concentrates each row of the loadings on one column without
changing the reconstruction, and a reflection step flips every column so
its dominant entry is positive. Latent-level causal structure is then read
off the rotated latent series by per-target lagged least squares with
t-tests, a deliberately simple linear stand-in for a full constraint-based
discovery procedure (so its graph scores are indicative, not definitive).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class FactorSolution:
    """Loadings, latent series and the transforms that produced them."""

    loadings: np.ndarray  # (d_x, d_z), orthonormal columns
    latents: np.ndarray  # (T, d_z), centered projections
    rotation: np.ndarray  # accumulated orthogonal transform incl. signs
    signs: np.ndarray  # +/-1 per column; ones until reflected
    varimax_converged: bool = True


def pca(x, d_z):
    """Top-d_z eigenvectors of the sample covariance, descending eigenvalue.

    Columns are sign-fixed so the first entry of magnitude above 1e-12 is
    positive, which pins the result on degenerate (isotropic) inputs up to
    eigenvalue ties. Warns when fewer than d_z positive eigenvalues exist;
    the trailing eigenvectors pad the basis regardless.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= d_z:
        raise ValueError("need more samples than components")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    positive = int(np.sum(eigvals > max(eigvals.max(), 0.0) * 1e-12))
    if positive < d_z:
        warnings.warn(
            f"only {positive} positive eigenvalues for d_z={d_z}; "
            "padding with the remaining eigenvectors",
            stacklevel=2,
        )
    loadings = eigvecs[:, :d_z]
    for j in range(d_z):
        col = loadings[:, j]
        nonzero = np.nonzero(np.abs(col) > 1e-12)[0]
        if nonzero.size and col[nonzero[0]] < 0:
            loadings[:, j] = -col
    return FactorSolution(
        loadings=loadings,
        latents=centered @ loadings,
        rotation=np.eye(d_z),
        signs=np.ones(d_z),
    )


def varimax_criterion(loadings):
    """Sum over rows of the variance of the squared loadings in that row."""
    sq = np.asarray(loadings, dtype=np.float64) ** 2
    d_z = sq.shape[1]
    return float(np.sum(sq * sq) / d_z - np.sum((sq.sum(axis=1) / d_z) ** 2))


def _polar_ascent(a, start, tol, max_iter):
    """Monotone fixed-point ascent of the criterion from one starting rotation.

    Row norms of a @ R are rotation invariant, so maximizing the criterion
    equals maximizing the convex quartic sum alone; polar-decomposing its
    pulled-back gradient then increases the criterion at every step, and
    stationary points of the two problems coincide.
    """
    rot = start
    value = varimax_criterion(a @ rot)
    for _ in range(max_iter):
        b = a @ rot
        m = a.T @ (b**3)
        u, _, vt = np.linalg.svd(m)
        rot = u @ vt
        new_value = varimax_criterion(a @ rot)
        if abs(new_value - value) < tol:
            return rot, new_value, True
        value = new_value
    return rot, value, False


def _start_rotations(d_z, n_extra=2):
    """Identity plus fixed pseudo-random rotations to escape saddle starts."""
    rng = np.random.default_rng(1234)
    starts = [np.eye(d_z)]
    for _ in range(n_extra):
        q, r = np.linalg.qr(rng.standard_normal((d_z, d_z)))
        starts.append(q * np.sign(np.diag(r)))
    return starts


def varimax(loadings, tol=1e-8, max_iter=1000):
    """Orthogonal rotation locally maximizing the criterion above.

    A perfectly balanced input (for example a simple structure rotated by
    exactly 45 degrees) is itself a stationary point, so the ascent runs
    from a few deterministic starts and keeps the best outcome. Returns
    (rotation, converged); on non-convergence the best iterate found is
    returned with converged=False.
    """
    a = np.asarray(loadings, dtype=np.float64)
    d_z = a.shape[1]
    if d_z == 1:
        return np.eye(1), True
    best_rot, best_value, best_converged = None, -np.inf, False
    for start in _start_rotations(d_z):
        rot, value, converged = _polar_ascent(a, start, tol, max_iter)
        if value > best_value:
            best_rot, best_value, best_converged = rot, value, converged
    return best_rot, best_converged


def apply_varimax(solution, tol=1e-8, max_iter=1000):
    """Rotate a factor solution in place of its loadings and latents."""
    rot, converged = varimax(solution.loadings, tol=tol, max_iter=max_iter)
    return FactorSolution(
        loadings=solution.loadings @ rot,
        latents=solution.latents @ rot,
        rotation=solution.rotation @ rot,
        signs=solution.signs.copy(),
        varimax_converged=converged,
    )


def reflect(loadings):
    """Per-column signs making each dominant-magnitude entry positive.

    The dominant entry is the first index attaining the column's maximum
    magnitude; a zero there counts as positive. Returns (reflected, signs).
    """
    loadings = np.asarray(loadings, dtype=np.float64)
    idx = np.argmax(np.abs(loadings), axis=0)
    picked = loadings[idx, np.arange(loadings.shape[1])]
    signs = np.where(picked < 0, -1.0, 1.0)
    return loadings * signs, signs


def apply_reflection(solution):
    reflected, signs = reflect(solution.loadings)
    return FactorSolution(
        loadings=reflected,
        latents=solution.latents * signs,
        rotation=solution.rotation * signs,
        signs=solution.signs * signs,
        varimax_converged=solution.varimax_converged,
    )


def lagged_linear_discovery(latents, tau, alpha=0.05):
    """Edges from per-target least squares on all lagged latents.

    For each target series, regress on the tau * d_z lagged values (plus an
    intercept); an edge j --lag k--> i is kept when the coefficient's
    two-sided t-test falls under alpha. Raises on rank-deficient designs,
    which signal redundant latent columns.
    """
    z = np.asarray(latents, dtype=np.float64)
    t_len, d_z = z.shape
    n = t_len - tau
    n_regressors = tau * d_z
    if n <= n_regressors + 10:
        raise ValueError("series too short for the lagged regression")

    design = np.ones((n, n_regressors + 1))
    for k in range(1, tau + 1):
        design[:, 1 + (k - 1) * d_z : 1 + k * d_z] = z[tau - k : t_len - k]
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValueError("rank-deficient regressors; latents look redundant")

    targets = z[tau:]
    coef, _, _, _ = np.linalg.lstsq(design, targets, rcond=None)
    resid = targets - design @ coef
    dof = n - design.shape[1]
    sigma2 = (resid * resid).sum(axis=0) / dof  # per target
    xtx_inv_diag = np.diag(np.linalg.inv(design.T @ design))
    se = np.sqrt(np.outer(xtx_inv_diag, sigma2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stat = np.where(se > 0, coef / se, 0.0)
    p = 2.0 * stats.t.sf(np.abs(t_stat), dof)

    graphs = np.zeros((tau, d_z, d_z), dtype=np.int64)
    for k in range(1, tau + 1):
        block = p[1 + (k - 1) * d_z : 1 + k * d_z]  # (d_z regressors, d_z targets)
        graphs[k - 1] = (block.T < alpha).astype(np.int64)
    return graphs


def fit_variants(x, d_z, tau, alpha=0.05, tol=1e-8, max_iter=1000):
    """All three pipeline stages on one series, keyed by variant name."""
    base = pca(x, d_z)
    rotated = apply_varimax(base, tol=tol, max_iter=max_iter)
    reflected = apply_reflection(rotated)
    out = {}
    for name, sol in (("pca", base), ("varimax", rotated), ("varimax_plus", reflected)):
        out[name] = (sol, lagged_linear_discovery(sol.latents, tau, alpha=alpha))
    return out
