"""Fast numerical self-verification, also exposed as `cdsd selftest`.

Each check pits a primary code path against an independent route: analytic
gradients vs central differences, the closed-form KL vs Monte Carlo,
stabilized generators vs an eigenvalue post-check, assignment-based latent
matching vs exhaustive permutation search, and the rotation solver vs a
known optimum. The whole battery is meant to run in well under a minute.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .baseline import varimax, varimax_criterion
from .metrics import mcc, mcc_exhaustive
from .model import gaussian_kl
from .synthetic import companion_spectral_radius, sample_coefficients, \
    sample_transition_graphs, stabilize


def check_gradients():
    """Central-difference agreement over composites of every operation."""
    rng = np.random.default_rng(7)
    worst = 0.0

    w = ad.parameter("w", (4, 3))
    x = ad.parameter("x", (3, 2))
    y = ad.sum_(ad.leakyrelu(ad.matmul(w, x)))
    # keep preactivations off the leaky-relu kink
    wv = rng.standard_normal((4, 3)) + 0.5
    xv = rng.standard_normal((3, 2)) + 0.5
    worst = max(worst, ad.finite_difference_check(y, {"w": wv, "x": xv}, ["w", "x"]))

    a = ad.parameter("a", (2, 3))
    b = ad.parameter("b", (3,))
    mixed = ad.sum_(
        ad.mul(ad.sigmoid(a), ad.exp(ad.mul(b, ad.constant(0.3))))
        + ad.square(a - ad.broadcast_to(b, (2, 3)))
    )
    worst = max(
        worst,
        ad.finite_difference_check(
            mixed, {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(3)}, ["a", "b"]
        ),
    )

    t = ad.parameter("t", (5, 4))
    gathered = ad.embed_lookup(t, np.array([0, 2, 2, 4]))
    y2 = ad.sum_(ad.log(ad.exp(ad.slice_(gathered, (slice(0, 3),)))))
    y2 = y2 + ad.mean_(ad.square(ad.transpose(t)))
    y2 = y2 + ad.sum_(ad.reshape(ad.concat([t, t], axis=1), (40,)))
    worst = max(
        worst, ad.finite_difference_check(y2, {"t": rng.standard_normal((5, 4))}, ["t"])
    )

    # stop-gradient breaks the analytic/numeric correspondence by design,
    # so it gets a direct zero-backward assertion instead of an FD entry
    s = ad.parameter("s", (3,))
    grads = ad.gradient(
        ad.sum_(ad.square(ad.stop_gradient(s))), {"s": rng.standard_normal(3)}, ["s"]
    )
    stop_ok = not np.any(grads["s"])

    return stop_ok and worst < 1e-5, f"max relative error {worst:.3e}"


def check_kl_monte_carlo(n_samples=1_000_000):
    """Closed-form Gaussian KL within 3 standard errors of a sample estimate."""
    rng = np.random.default_rng(11)
    q_mean, q_var = np.array([0.4, -1.2, 0.0]), np.array([0.7, 2.1, 1.3])
    p_mean, p_var = np.array([-0.3, 0.5, 0.2]), np.array([1.5, 0.8, 2.4])
    closed = gaussian_kl(q_mean, q_var, p_mean, p_var)

    z = q_mean + np.sqrt(q_var) * rng.standard_normal((n_samples, 3))
    log_q = -0.5 * (np.log(2 * np.pi * q_var) + (z - q_mean) ** 2 / q_var).sum(axis=1)
    log_p = -0.5 * (np.log(2 * np.pi * p_var) + (z - p_mean) ** 2 / p_var).sum(axis=1)
    diffs = log_q - log_p
    estimate = float(diffs.mean())
    se = float(diffs.std(ddof=1) / np.sqrt(n_samples))
    gap = abs(closed - estimate)
    return gap <= 3 * se, f"closed {closed:.5f}, mc {estimate:.5f}, 3se {3 * se:.5f}"


def check_stabilization(n_systems=100):
    """Every rescaled random system must have spectral radius below one."""
    rng = np.random.default_rng(23)
    worst = 0.0
    for i in range(n_systems):
        tau = int(rng.integers(1, 4))
        d_z = int(rng.integers(2, 7))
        graphs = sample_transition_graphs(d_z, tau, 0.4, rng)
        coeffs = stabilize(sample_coefficients(graphs, rng))
        worst = max(worst, companion_spectral_radius(coeffs))
    return worst < 1.0, f"max spectral radius {worst:.6f}"


def check_mcc_assignment(n_instances=50):
    """Hungarian matching score equals exhaustive search on small problems."""
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(n_instances):
        d = int(rng.integers(2, 9))
        z = rng.standard_normal((200, d))
        mix = rng.standard_normal((d, d)) + np.eye(d)
        z_hat = z @ mix
        fast, _ = mcc(z_hat, z)
        brute, _ = mcc_exhaustive(z_hat, z)
        worst = max(worst, abs(fast - brute))
    return worst < 1e-12, f"max score gap {worst:.3e}"


def check_varimax_rotation():
    """Recover the criterion of a simple structure rotated by 45 degrees."""
    rng = np.random.default_rng(3)
    w0 = np.zeros((12, 2))
    w0[:6, 0] = rng.uniform(0.4, 1.0, 6)
    w0[6:, 1] = rng.uniform(0.4, 1.0, 6)
    w0 /= np.linalg.norm(w0, axis=0)
    theta = np.pi / 4
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mixed = w0 @ rot

    r, converged = varimax(mixed)
    gap = varimax_criterion(w0) - varimax_criterion(mixed @ r)
    return converged and gap < 1e-6, f"criterion gap {gap:.3e}"


CHECKS = [
    ("gradient finite differences", check_gradients),
    ("gaussian kl monte carlo", check_kl_monte_carlo),
    ("generator stabilization", check_stabilization),
    ("mcc assignment vs exhaustive", check_mcc_assignment),
    ("varimax 45-degree recovery", check_varimax_rotation),
]


def run_selftest(out=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        ok, detail = fn()
        elapsed = time.perf_counter() - start
        all_ok &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({elapsed:.2f}s)")
    return all_ok
