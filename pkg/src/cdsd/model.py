"""Latent-transition model, single-parent observation model and ELBO.

The generative story: d_z latent series evolve under lagged dynamics masked
by binary graphs G^1..G^tau (one network g_j per latent, applied to the
concatenation of the masked past), and each of the d_x observed variables
is a noisy function of the single latent selected by its row of the
nonnegative mixing matrix W. An amortized diagonal-Gaussian encoder maps
each observation back to the latents.

All quantities are assembled as autodiff expressions so the training loop
can differentiate one loss graph end to end. The numeric operations below
(encode, decode, transition_params, elbo_window) evaluate small cached
graphs, which keeps a single code path for values and gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .graphs import GraphSample, straight_through_expr

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and fixed distributional choices.

    transition_hidden / decoder_hidden / encoder_hidden are tuples of layer
    widths; an empty tuple means a plain affine map. decoder_mode "linear"
    decodes with W alone; "nonlinear" feeds each variable's masked projection
    plus a learned index embedding through one shared network.
    """

    d_x: int
    d_z: int
    tau: int = 1
    transition_hidden: tuple = ()
    decoder_mode: str = "linear"
    decoder_hidden: tuple = (32, 32)
    embed_dim: int = 10
    encoder_hidden: tuple = ()
    transition_variance: float = 1.0

    def __post_init__(self):
        if self.d_z >= self.d_x:
            raise ValueError("d_z must be smaller than d_x")
        if self.tau < 1:
            raise ValueError("tau must be at least 1")
        if self.transition_variance <= 0:
            raise ValueError("transition_variance must be positive")
        if self.decoder_mode not in ("linear", "nonlinear"):
            raise ValueError(f"unknown decoder_mode {self.decoder_mode!r}")


def default_model_config(d_x, d_z, tau=1, dynamics="linear", decoding="linear",
                         embed_dim=10, transition_variance=1.0):
    """Standard widths: 2x8 transition nets and 2x32 encoder/decoder nets
    in the nonlinear settings, plain affine maps otherwise."""
    return ModelConfig(
        d_x=d_x,
        d_z=d_z,
        tau=tau,
        transition_hidden=(8, 8) if dynamics == "nonlinear" else (),
        decoder_mode="nonlinear" if decoding == "nonlinear" else "linear",
        decoder_hidden=(32, 32),
        embed_dim=embed_dim,
        encoder_hidden=(32, 32) if decoding == "nonlinear" else (),
        transition_variance=transition_variance,
    )


@dataclass
class Window:
    """One training window: tau past observations and the current one."""

    x_past: np.ndarray  # (tau, d_x), row k is x at lag k+1
    x_now: np.ndarray  # (d_x,)


@dataclass
class ModelParams:
    """All learnable arrays, keyed by name (see init_params for the layout)."""

    config: ModelConfig
    values: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.values.items()})

    @property
    def mixing(self):
        return self.values["W"]

    @property
    def graph_logits(self):
        return self.values["gamma"]


def _affine_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, rng):
    """Fresh parameter values.

    W starts uniform in [1/(10 d_z), 1/d_z], edge logits at 5 (nearly full
    graphs), both log-variances at -4; network weights and biases use
    uniform fan-in initialization.
    """
    d_x, d_z, tau = config.d_x, config.d_z, config.tau
    values = {}
    values["W"] = rng.uniform(1.0 / (10.0 * d_z), 1.0 / d_z, size=(d_x, d_z))
    values["gamma"] = np.full((tau, d_z, d_z), 5.0)
    values["log_var_x"] = np.full(d_x, -4.0)
    values["log_var_z"] = np.full(d_z, -4.0)

    enc_dims = [d_x, *config.encoder_hidden, d_z]
    for i, (a, b) in enumerate(zip(enc_dims[:-1], enc_dims[1:])):
        values[f"enc_w{i}"] = _affine_init(rng, a, (a, b))
        values[f"enc_b{i}"] = _affine_init(rng, a, (b,))

    trans_dims = [tau * d_z, *config.transition_hidden, 1]
    for i, (a, b) in enumerate(zip(trans_dims[:-1], trans_dims[1:])):
        values[f"trans_w{i}"] = _affine_init(rng, a, (d_z, a, b))
        values[f"trans_b{i}"] = _affine_init(rng, a, (d_z, 1, b))

    if config.decoder_mode == "nonlinear":
        values["dec_embed"] = rng.standard_normal((d_x, config.embed_dim))
        dec_dims = [1 + config.embed_dim, *config.decoder_hidden, 1]
        for i, (a, b) in enumerate(zip(dec_dims[:-1], dec_dims[1:])):
            values[f"dec_w{i}"] = _affine_init(rng, a, (a, b))
            values[f"dec_b{i}"] = _affine_init(rng, a, (b,))

    return ModelParams(config, values)


# ---------------------------------------------------------------------------
# expression builders


class _ParamSpace:
    """One parameter node per name so shared uses hit the same node."""

    def __init__(self):
        self.nodes = {}

    def get(self, name, shape):
        node = self.nodes.get(name)
        if node is None:
            node = ad.parameter(name, shape)
            self.nodes[name] = node
        elif node.shape != tuple(shape):
            raise ad.ShapeMismatchError(f"parameter {name!r} reused with a new shape")
        return node


def _encoder_expr(ps, config, x):
    """Posterior mean network applied to a (B, d_x) batch."""
    dims = [config.d_x, *config.encoder_hidden, config.d_z]
    h = x
    last = len(dims) - 2
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        h = ad.matmul(h, ps.get(f"enc_w{i}", (a, b))) + ps.get(f"enc_b{i}", (b,))
        if i != last:
            h = ad.leakyrelu(h)
    return h


def _transition_expr(ps, config, z_lags, graph_slices):
    """Per-latent prior means from the masked past, batched over latents.

    z_lags[k] is the (B, d_z) latent sample at lag k+1 and graph_slices[k]
    the (d_z, d_z) mask for that lag. Row j of each mask gates what latent
    j's own network g_j may see, so the stacked input has shape
    (d_z, B, tau * d_z) and every layer is a batched matmul against
    per-latent weights.
    """
    d_z, tau = config.d_z, config.tau
    batch = z_lags[0].shape[0]
    masked = []
    for k in range(tau):
        mask = ad.reshape(graph_slices[k], (d_z, 1, d_z))
        zk = ad.reshape(z_lags[k], (1, batch, d_z))
        masked.append(ad.mul(mask, zk))
    h = masked[0] if tau == 1 else ad.concat(masked, axis=2)

    dims = [tau * d_z, *config.transition_hidden, 1]
    last = len(dims) - 2
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = ps.get(f"trans_w{i}", (d_z, a, b))
        bias = ps.get(f"trans_b{i}", (d_z, 1, b))
        h = ad.matmul(h, w) + bias
        if i != last:
            h = ad.leakyrelu(h)
    return ad.transpose(ad.reshape(h, (d_z, batch)), (1, 0))


def _decoder_expr(ps, config, z):
    """Observation means for a (B, d_z) batch of latents."""
    d_x, d_z = config.d_x, config.d_z
    batch = z.shape[0]
    w = ps.get("W", (d_x, d_z))
    proj = ad.matmul(z, ad.transpose(w))  # (B, d_x); row masking by W support
    if config.decoder_mode == "linear":
        return proj

    emb_dim = config.embed_dim
    table = ps.get("dec_embed", (d_x, emb_dim))
    emb = ad.embed_lookup(table, np.arange(d_x))
    dims = [1 + emb_dim, *config.decoder_hidden, 1]

    w0 = ps.get("dec_w0", (dims[0], dims[1]))
    w_proj = ad.slice_(w0, (slice(0, 1), slice(None)))
    w_emb = ad.slice_(w0, (slice(1, None), slice(None)))
    h = ad.mul(ad.reshape(proj, (batch, d_x, 1)), ad.reshape(w_proj, (1, 1, dims[1])))
    h = h + ad.reshape(ad.matmul(emb, w_emb), (1, d_x, dims[1]))
    h = h + ps.get("dec_b0", (dims[1],))

    last = len(dims) - 2
    for i in range(1, len(dims) - 1):
        h = ad.leakyrelu(h)
        h = ad.matmul(h, ps.get(f"dec_w{i}", (dims[i], dims[i + 1])))
        h = h + ps.get(f"dec_b{i}", (dims[i + 1],))
    return ad.reshape(h, (batch, d_x))


@dataclass
class ElboGraph:
    """A built ELBO expression with handles into its parameter nodes.

    graph_mode selects how the transition masks are wired:
      "straight_through" - inputs in.gumbel / in.hard, learnable gradients;
      "soft"             - masks are sigmoid(gamma), fully deterministic;
      "given"            - masks bound directly through in.graph.
    """

    config: ModelConfig
    batch_size: int
    graph_mode: str
    elbo_mean: ad.Expr
    params: dict
    exprs: dict


def build_elbo_graph(config, batch_size, graph_mode="given", temperature=1.0):
    """Assemble the per-window ELBO for a batch of windows.

    Inputs bound at evaluation time (all names prefixed "in."):
      in.x_past (tau, B, d_x), in.x_now (B, d_x), in.eps (tau+1, B, d_z)
      plus the graph inputs selected by graph_mode. in.eps row 0 is the
      reconstruction draw, row k the draw for lag k.
    """
    d_x, d_z, tau = config.d_x, config.d_z, config.tau
    B = batch_size
    ps = _ParamSpace()

    x_past = ps.get("in.x_past", (tau, B, d_x))
    x_now = ps.get("in.x_now", (B, d_x))
    eps = ps.get("in.eps", (tau + 1, B, d_z))
    gamma = ps.get("gamma", (tau, d_z, d_z))

    if graph_mode == "straight_through":
        noise = ps.get("in.gumbel", (tau, d_z, d_z))
        hard = ps.get("in.hard", (tau, d_z, d_z))
        g_all = straight_through_expr(gamma, noise, hard, temperature)
    elif graph_mode == "soft":
        g_all = ad.sigmoid(gamma)
    elif graph_mode == "given":
        g_all = ps.get("in.graph", (tau, d_z, d_z))
    else:
        raise ValueError(f"unknown graph_mode {graph_mode!r}")
    graph_slices = [ad.slice_(g_all, (k,)) for k in range(tau)]

    log_var_z = ps.get("log_var_z", (d_z,))
    sigma_z = ad.exp(ad.mul(log_var_z, ad.constant(0.5)))

    mu_now = _encoder_expr(ps, config, x_now)
    z_lags = []
    for k in range(tau):
        mu_k = _encoder_expr(ps, config, ad.slice_(x_past, (k,)))
        z_lags.append(mu_k + ad.mul(sigma_z, ad.slice_(eps, (k + 1,))))

    prior_mean = _transition_expr(ps, config, z_lags, graph_slices)

    # KL(q(z^t|x^t) || p(z^t|z^<t)) in closed form, coordinate by coordinate
    vp = config.transition_variance
    gap = ad.exp(log_var_z) + ad.square(mu_now - prior_mean)
    kl_terms = (math.log(vp) - 1.0) - log_var_z + ad.mul(gap, ad.constant(1.0 / vp))
    kl_vec = ad.mul(ad.sum_(kl_terms, axis=1), ad.constant(0.5))

    z_now = mu_now + ad.mul(sigma_z, ad.slice_(eps, (0,)))
    x_mean = _decoder_expr(ps, config, z_now)

    log_var_x = ps.get("log_var_x", (d_x,))
    resid = ad.square(x_now - x_mean)
    ll_terms = (LOG_2PI + log_var_x) + ad.mul(resid, ad.exp(-log_var_x))
    ll_vec = ad.mul(ad.sum_(ll_terms, axis=1), ad.constant(-0.5))

    elbo_vec = ll_vec - kl_vec
    elbo_mean = ad.mean_(elbo_vec)

    exprs = {
        "elbo_vec": elbo_vec,
        "kl_vec": kl_vec,
        "ll_vec": ll_vec,
        "prior_mean": prior_mean,
        "mu_now": mu_now,
        "x_mean": x_mean,
        "graphs": g_all,
    }
    return ElboGraph(config, B, graph_mode, elbo_mean, ps.nodes, exprs)


# ---------------------------------------------------------------------------
# numeric operations on top of cached single-item graphs


@lru_cache(maxsize=64)
def _cached_graph(config, batch_size, graph_mode):
    return build_elbo_graph(config, batch_size, graph_mode=graph_mode)


def _graph_array(graph):
    if isinstance(graph, GraphSample):
        return graph.hard
    return np.asarray(graph, dtype=np.float64)


def transition_params(z_window, graph, params):
    """Prior mean and variance of z^t given a window of past latents.

    z_window has shape (tau, d_z) with row k the latents at lag k+1; the
    variance is the fixed transition variance, constant per coordinate.
    """
    config = params.config
    z_window = np.asarray(z_window, dtype=np.float64)
    if z_window.shape != (config.tau, config.d_z):
        raise ad.ShapeMismatchError(
            f"z_window shape {z_window.shape}, expected {(config.tau, config.d_z)}"
        )
    return _transition_only(config)(z_window, _graph_array(graph), params)


@lru_cache(maxsize=64)
def _transition_only(config):
    ps = _ParamSpace()
    z_in = ps.get("in.z_window", (config.tau, 1, config.d_z))
    g_in = ps.get("in.graph", (config.tau, config.d_z, config.d_z))
    z_lags = [ad.slice_(z_in, (k,)) for k in range(config.tau)]
    g_slices = [ad.slice_(g_in, (k,)) for k in range(config.tau)]
    mean = _transition_expr(ps, config, z_lags, g_slices)

    def run(z_window, graph, params):
        bindings = dict(params.values)
        bindings["in.z_window"] = z_window.reshape(config.tau, 1, config.d_z)
        bindings["in.graph"] = graph
        mean_val = ad.evaluate(mean, bindings)[0]
        var = np.full(config.d_z, config.transition_variance)
        return mean_val, var

    return run


@lru_cache(maxsize=64)
def _decode_only(config):
    ps = _ParamSpace()
    z_in = ps.get("in.z", (1, config.d_z))
    out = _decoder_expr(ps, config, z_in)

    def run(z, params):
        bindings = dict(params.values)
        bindings["in.z"] = np.asarray(z, dtype=np.float64).reshape(1, config.d_z)
        return ad.evaluate(out, bindings)[0]

    return run


def decode(z, params):
    """Mean of x given latents z (linear: Wz; nonlinear: shared network)."""
    return _decode_only(params.config)(z, params)


@lru_cache(maxsize=64)
def _encode_only(config, batch_size):
    ps = _ParamSpace()
    x_in = ps.get("in.x", (batch_size, config.d_x))
    return ps, _encoder_expr(ps, config, x_in)


def encode(x, params):
    """Posterior mean and (shared) diagonal variance for one observation."""
    config = params.config
    _, mu = _encode_only(config, 1)
    bindings = dict(params.values)
    bindings["in.x"] = np.asarray(x, dtype=np.float64).reshape(1, config.d_x)
    mu_val = ad.evaluate(mu, bindings)[0]
    return mu_val, np.exp(params.values["log_var_z"])


def encode_series(params, x):
    """Posterior means for a whole (T, d_x) series at once."""
    config = params.config
    x = np.asarray(x, dtype=np.float64)
    _, mu = _encode_only(config, x.shape[0])
    bindings = dict(params.values)
    bindings["in.x"] = x
    return ad.evaluate(mu, bindings)


def gaussian_kl(q_mean, q_var, p_mean, p_var):
    """KL(N(q_mean, diag q_var) || N(p_mean, diag p_var)), summed over coords."""
    q_mean, q_var = np.asarray(q_mean, dtype=float), np.asarray(q_var, dtype=float)
    p_mean, p_var = np.asarray(p_mean, dtype=float), np.asarray(p_var, dtype=float)
    if np.any(q_var <= 0) or np.any(p_var <= 0):
        raise ValueError("variances must be positive")
    terms = np.log(p_var / q_var) + (q_var + (q_mean - p_mean) ** 2) / p_var - 1.0
    return float(0.5 * np.sum(terms))


def elbo_window(window, params, graph, eps):
    """Single-sample ELBO for one window, deterministic given the draws.

    eps has shape (tau+1, d_z): row 0 reparameterizes the reconstruction
    draw of z^t, row k the draw of z^{t-k} used by the transition prior.
    """
    config = params.config
    eg = _cached_graph(config, 1, "given")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (config.tau + 1, config.d_z):
        raise ad.ShapeMismatchError(
            f"eps shape {eps.shape}, expected {(config.tau + 1, config.d_z)}"
        )
    bindings = dict(params.values)
    bindings["in.x_past"] = np.asarray(window.x_past, dtype=np.float64).reshape(
        config.tau, 1, config.d_x
    )
    bindings["in.x_now"] = np.asarray(window.x_now, dtype=np.float64).reshape(1, config.d_x)
    bindings["in.eps"] = eps.reshape(config.tau + 1, 1, config.d_z)
    bindings["in.graph"] = _graph_array(graph)
    return float(ad.evaluate(eg.elbo_mean, bindings))
