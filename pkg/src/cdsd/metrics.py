"""Recovery scores for learned latents, graphs and mixing matrices.

Latents are only identifiable up to permutation, sign and coordinate-wise
rescaling, so all comparisons run through absolute Pearson correlations and
the best column matching: the mean correlation coefficient (MCC) maximizes
the mean of matched |corr| entries over permutations, and the same matching
relabels the learned graph before Hamming distances are counted.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class EvalReport:
    """Scores of one recovered model against ground truth."""

    mcc: float | None = None
    permutation: list | None = None  # estimated index i matches true index perm[i]
    shd_per_lag: list | None = None
    shd_total: int | None = None
    w_abs_error: float | None = None
    orthogonality_residual: float | None = None
    single_parent_violations: int | None = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "format": "cdsd-report-v1",
            "mcc": self.mcc,
            "permutation": self.permutation,
            "shd_per_lag": self.shd_per_lag,
            "shd_total": self.shd_total,
            "w_abs_error": self.w_abs_error,
            "orthogonality_residual": self.orthogonality_residual,
            "single_parent_violations": self.single_parent_violations,
            "notes": self.notes,
        }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "format",
        "mcc",
        "permutation",
        "shd_per_lag",
        "shd_total",
        "w_abs_error",
        "orthogonality_residual",
        "single_parent_violations",
        "notes",
    ],
    "properties": {
        "format": {"const": "cdsd-report-v1"},
        "mcc": {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0},
        "permutation": {"type": ["array", "null"], "items": {"type": "integer"}},
        "shd_per_lag": {"type": ["array", "null"], "items": {"type": "integer"}},
        "shd_total": {"type": ["integer", "null"], "minimum": 0},
        "w_abs_error": {"type": ["number", "null"], "minimum": 0.0},
        "orthogonality_residual": {"type": ["number", "null"], "minimum": 0.0},
        "single_parent_violations": {"type": ["integer", "null"], "minimum": 0},
        "notes": {"type": "array", "items": {"type": "string"}},
    },
    "additionalProperties": False,
}


def correlation_matrix(z_hat, z):
    """Absolute Pearson correlations, estimated column i vs true column j.

    A constant column has no defined correlation; its entries are set to 0
    with a warning so degenerate latents simply never win the matching.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z_hat.shape[0] != z.shape[0]:
        raise ValueError("series must share their length")
    if z_hat.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    # a truly constant column has no defined correlation; detect it before
    # centering since the mean subtraction leaves rounding residue behind
    dead_a = np.ptp(z_hat, axis=0) == 0
    dead_b = np.ptp(z, axis=0) == 0
    if dead_a.any() or dead_b.any():
        warnings.warn("constant column(s); correlations set to 0", stacklevel=2)
    a = z_hat - z_hat.mean(axis=0)
    b = z - z.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    na[dead_a | (na == 0)] = 1.0
    nb[dead_b | (nb == 0)] = 1.0
    corr = np.abs((a / na).T @ (b / nb))
    corr[dead_a, :] = 0.0
    corr[:, dead_b] = 0.0
    return corr


def mcc(z_hat, z):
    """Best-matched mean absolute correlation and the matching itself.

    Returns (score, perm) where perm[i] is the ground-truth column assigned
    to estimated column i by the optimal assignment.
    """
    corr = correlation_matrix(z_hat, z)
    rows, cols = linear_sum_assignment(-corr)
    perm = np.empty(corr.shape[0], dtype=np.int64)
    perm[rows] = cols
    return float(corr[rows, cols].mean()), perm


def mcc_exhaustive(z_hat, z):
    """Brute-force reference matching; only sensible for small d_z."""
    corr = correlation_matrix(z_hat, z)
    d = corr.shape[0]
    best, best_perm = -1.0, None
    for perm in itertools.permutations(range(d)):
        score = corr[np.arange(d), perm].mean()
        if score > best:
            best, best_perm = score, perm
    return float(best), np.asarray(best_perm, dtype=np.int64)


def apply_permutation(graphs, perm):
    """Relabel estimated-graph nodes into ground-truth order on both axes."""
    graphs = np.asarray(graphs)
    perm = np.asarray(perm, dtype=np.int64)
    out = np.zeros_like(graphs)
    out[:, perm[:, None], perm[None, :]] = graphs
    return out


def shd(g_hat, g_true, perm):
    """Hamming distance per lag after relabeling, plus the total."""
    g_hat = np.asarray(g_hat)
    g_true = np.asarray(g_true)
    if g_hat.shape != g_true.shape:
        raise ValueError(f"graph shapes differ: {g_hat.shape} vs {g_true.shape}")
    relabeled = apply_permutation(g_hat, perm)
    per_lag = [int(np.sum(relabeled[k] != g_true[k])) for k in range(g_true.shape[0])]
    return per_lag, int(sum(per_lag))


def w_abs_error(w_hat, w_true, perm):
    """Mean entrywise |w_hat - w_true| after column matching and sign choice.

    Column i of the estimate is compared against true column perm[i]; each
    column then takes whichever sign agrees best (smallest L1 gap) before
    averaging, since latents carry a sign indeterminacy.
    """
    w_hat = np.asarray(w_hat, dtype=np.float64)
    w_true = np.asarray(w_true, dtype=np.float64)
    if w_hat.shape != w_true.shape:
        raise ValueError(f"mixing shapes differ: {w_hat.shape} vs {w_true.shape}")
    perm = np.asarray(perm, dtype=np.int64)
    aligned = np.empty_like(w_hat)
    aligned[:, perm] = w_hat
    err_pos = np.abs(aligned - w_true).sum(axis=0)
    err_neg = np.abs(-aligned - w_true).sum(axis=0)
    best = np.minimum(err_pos, err_neg)
    return float(best.sum() / w_true.size)


def single_parent_violation(w, rel_threshold=0.1):
    """Rows whose second-largest |entry| still clears rel_threshold * max."""
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError("rel_threshold must lie in (0, 1)")
    mags = np.abs(np.asarray(w, dtype=np.float64))
    row_max = mags.max(axis=1, keepdims=True)
    strong = mags > rel_threshold * row_max
    return int(np.sum(strong.sum(axis=1) >= 2))


def score_recovery(z_hat, w_hat, g_hat, truth, rel_threshold=0.1):
    """Full report for one recovered (latents, mixing, graphs) triple."""
    score, perm = mcc(z_hat, truth.latents)
    per_lag, total = shd(g_hat, truth.graphs, perm)
    h = w_hat.T @ w_hat - np.eye(w_hat.shape[1])
    return EvalReport(
        mcc=score,
        permutation=[int(p) for p in perm],
        shd_per_lag=per_lag,
        shd_total=total,
        w_abs_error=w_abs_error(w_hat, truth.mixing, perm),
        orthogonality_residual=float(np.linalg.norm(h)),
        single_parent_violations=single_parent_violation(w_hat, rel_threshold),
    )
