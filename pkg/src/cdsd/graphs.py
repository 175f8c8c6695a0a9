"""Learnable distribution over lagged binary adjacency graphs.

Edge (i, j) of lag-k graph G^k means "latent j at time t-k drives latent i
at time t". Each edge is an independent Bernoulli with probability
sigmoid(logit); samples are drawn hard (exactly 0/1) while gradients flow
through a binary-concrete relaxation, wired as

    hard + (soft - stop_gradient(soft))

so the forward value equals the hard draw bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad


@dataclass
class GraphSample:
    """One hard draw of the lagged graphs plus its relaxation.

    hard: (tau, d_z, d_z) array of exact 0.0/1.0 values.
    soft: the binary-concrete relaxation at the same logistic noise.
    noise: the logistic noise used for both paths.
    """

    hard: np.ndarray
    soft: np.ndarray
    noise: np.ndarray


def edge_probs(logits):
    """Elementwise sigmoid of the edge logits."""
    return expit(np.asarray(logits, dtype=np.float64))


def sample_st(logits, temperature, rng):
    """Draw hard graphs by Gumbel-max over {edge, no-edge}.

    The difference of the two Gumbel variables is logistic noise L, so the
    hard draw is 1[logit + L > 0], which is an exact Bernoulli(sigmoid(logit))
    sample. The soft value sigmoid((logit + L) / temperature) at the same
    noise is what the backward pass differentiates.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    u = rng.uniform(size=logits.shape)
    noise = np.log(u) - np.log1p(-u)
    shifted = logits + noise
    hard = (shifted > 0).astype(np.float64)
    soft = edge_probs(shifted / temperature)
    return GraphSample(hard=hard, soft=soft, noise=noise)


def straight_through_expr(logits_expr, noise_expr, hard_expr, temperature):
    """Expression with hard forward values and relaxed backward gradients."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    soft = ad.sigmoid(ad.mul(ad.add(logits_expr, noise_expr), ad.constant(1.0 / temperature)))
    return ad.add(hard_expr, ad.sub(soft, ad.stop_gradient(soft)))


def sparsity_penalty(logits):
    """Sum of all edge probabilities (entrywise L1 of the sigmoid)."""
    return float(edge_probs(logits).sum())


def sparsity_expr(logits_expr):
    return ad.sum_(ad.sigmoid(logits_expr))


def binarize(logits, threshold=0.5):
    """Final hard graphs: edge iff sigmoid(logit) > threshold (strict)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (edge_probs(logits) > threshold).astype(np.int64)
