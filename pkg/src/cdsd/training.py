"""Constrained training loop.

The loss per step is

    -mean window ELBO + lambda_s * sum(sigmoid(gamma))
    + Tr(lam^T h(W)) + (mu / 2) * ||h(W)||_F^2

with h(W) = W^T W - I. The orthogonality constraint is driven to zero by an
augmented Lagrangian schedule: a subproblem counts as solved once the
held-out loss stops improving, then the multipliers are updated and the
penalty weight doubles whenever the constraint norm failed to shrink
enough. W stays entrywise nonnegative through projection after every
RMSProp step. Training is single threaded and fully deterministic for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import edge_probs
from .model import ModelParams, build_elbo_graph, init_params


class DivergenceError(RuntimeError):
    """Loss or gradients went non-finite; carries the offending step."""

    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    """Optimizer, regularization and schedule settings."""

    lambda_s: float = 0.1  # graph sparsity coefficient
    learning_rate: float = 1e-3
    batch_size: int = 64
    mu0: float = 1e-3  # initial penalty weight
    lambda_init: float = 0.0  # initial multiplier value (broadcast to a matrix)
    eta: float = 2.0  # penalty growth factor
    delta: float = 0.9  # required shrink ratio of the constraint norm
    h_threshold: float = 1e-4  # stop once ||h(W)||_F falls under this
    patience: int = 1000  # steps without a held-out improvement
    eval_every: int = 50  # held-out evaluation period, in steps
    max_steps: int = 300_000
    seed: int = 0
    split: float = 0.8  # leading fraction of the series used for training
    gumbel_temperature: float = 1.0

    def __post_init__(self):
        if self.eta <= 1:
            raise ValueError("eta must exceed 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        if self.gumbel_temperature <= 0:
            raise ValueError("gumbel_temperature must be positive")


@dataclass
class AlmState:
    """Multipliers, penalty weight and per-stage history."""

    lam: np.ndarray
    mu: float
    stage: int = 0
    prev_h_norm: float | None = None
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, d_z, config):
        return cls(lam=np.full((d_z, d_z), config.lambda_init), mu=config.mu0)


@dataclass
class TrainResult:
    params: ModelParams
    alm: AlmState
    records: list
    converged: bool
    steps: int
    final_h_norm: float


def orthogonality_defect(w):
    """h = W^T W - I and its Frobenius norm."""
    w = np.asarray(w, dtype=np.float64)
    h = w.T @ w - np.eye(w.shape[1])
    return h, float(np.linalg.norm(h))


def alm_penalty(w, state):
    """Tr(lam^T h) + (mu / 2) ||h||_F^2, the terms added to the minimized loss."""
    h, norm = orthogonality_defect(w)
    return float(np.sum(state.lam * h) + 0.5 * state.mu * norm**2)


def alm_update(state, h, eta=2.0, delta=0.9):
    """Advance to the next subproblem after one was declared solved.

    lam absorbs mu * h evaluated at the stage solution; mu grows by eta
    unless the constraint norm shrank below delta times the previous
    stage's norm.
    """
    h = np.asarray(h, dtype=np.float64)
    norm = float(np.linalg.norm(h))
    new_lam = state.lam + state.mu * h
    new_mu = state.mu
    if state.prev_h_norm is not None and norm > delta * state.prev_h_norm:
        new_mu = eta * state.mu
    return AlmState(
        lam=new_lam,
        mu=new_mu,
        stage=state.stage + 1,
        prev_h_norm=norm,
        history=state.history,
    )


def project_nonneg(w):
    """Euclidean projection onto the nonnegative orthant."""
    return np.maximum(w, 0.0)


def rmsprop_init(params):
    return {name: np.zeros_like(v) for name, v in params.items()}


def rmsprop_step(params, grads, state, lr, decay=0.99, eps=1e-8):
    """In-place RMSProp update; returns the mutated params and state."""
    for name, g in grads.items():
        v = state[name]
        v *= decay
        v += (1.0 - decay) * g * g
        params[name] -= lr * g / (np.sqrt(v) + eps)
    return params, state


def _window_batch(x, starts, tau):
    """Assemble (tau, B, d_x) past frames and (B, d_x) current frames."""
    offsets = np.arange(1, tau + 1)
    x_past = x[starts[None, :] - offsets[:, None]]
    return x_past, x[starts]


def build_loss_graph(config, batch_size, lambda_s, temperature, graph_mode):
    """ELBO graph plus sparsity and ALM penalty terms.

    Adds the bound inputs in.lam (d_z, d_z) and in.mu (scalar) so one graph
    serves every ALM stage.
    """
    eg = build_elbo_graph(config, batch_size, graph_mode=graph_mode, temperature=temperature)
    d_z = config.d_z
    gamma = eg.params["gamma"]
    w = eg.params["W"]
    lam = ad.parameter("in.lam", (d_z, d_z))
    mu = ad.parameter("in.mu", ())
    eg.params["in.lam"] = lam
    eg.params["in.mu"] = mu

    sparsity = ad.sum_(ad.sigmoid(gamma))
    h = ad.matmul(ad.transpose(w), w) - ad.constant(np.eye(d_z))
    penalty = ad.sum_(ad.mul(lam, h)) + ad.mul(mu, ad.mul(ad.constant(0.5), ad.sum_(ad.square(h))))
    loss = -eg.elbo_mean + ad.mul(ad.constant(float(lambda_s)), sparsity) + penalty
    eg.exprs["loss"] = loss
    eg.exprs["sparsity"] = sparsity
    eg.exprs["h"] = h
    return eg


def train(dataset, model_config, train_config, rng=None):
    """Fit the model to a dataset's observed series.

    dataset needs an `x` attribute of shape (T, d_x) with T > tau. Returns
    a TrainResult whose records list holds one diagnostics dict per
    held-out evaluation (step, train_loss, holdout_loss, h_norm, mu,
    mean_edge_prob).
    """
    x = np.asarray(dataset.x, dtype=np.float64)
    cfg = train_config
    tau = model_config.tau
    if x.shape[0] <= tau:
        raise ValueError(f"series length {x.shape[0]} must exceed tau={tau}")
    if x.shape[1] != model_config.d_x:
        raise ValueError(f"dataset d_x={x.shape[1]} but model d_x={model_config.d_x}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    n_train = int(round(cfg.split * x.shape[0]))
    x_train, x_hold = x[:n_train], x[n_train:]
    if n_train <= tau or x_hold.shape[0] <= tau:
        raise ValueError("both series splits must be longer than tau")

    params = init_params(model_config, rng)
    values = params.values
    trainable = list(values.keys())
    opt_state = rmsprop_init(values)
    alm = AlmState.initial(model_config.d_z, cfg)
    _, h_norm = orthogonality_defect(values["W"])
    alm.prev_h_norm = h_norm

    loss_graph = build_loss_graph(
        model_config, cfg.batch_size, cfg.lambda_s, cfg.gumbel_temperature, "straight_through"
    )
    loss_expr = loss_graph.exprs["loss"]

    # fixed held-out pass: every window, mean encodings, soft graph masks
    hold_starts = np.arange(tau, x_hold.shape[0])
    hold_graph = build_loss_graph(
        model_config, hold_starts.size, cfg.lambda_s, cfg.gumbel_temperature, "soft"
    )
    hold_past, hold_now = _window_batch(x_hold, hold_starts, tau)
    hold_bindings_extra = {
        "in.x_past": hold_past,
        "in.x_now": hold_now,
        "in.eps": np.zeros((tau + 1, hold_starts.size, model_config.d_z)),
    }

    def holdout_loss():
        bindings = dict(values)
        bindings.update(hold_bindings_extra)
        bindings["in.lam"] = alm.lam
        bindings["in.mu"] = alm.mu
        return float(ad.evaluate(hold_graph.exprs["loss"], bindings))

    records = []
    best_holdout = np.inf
    last_improvement = 0
    stage_start = 0
    converged = False
    step = 0
    loss_value = np.nan

    for step in range(1, cfg.max_steps + 1):
        starts = rng.integers(tau, n_train, size=cfg.batch_size)
        x_past, x_now = _window_batch(x_train, starts, tau)
        eps = rng.standard_normal((tau + 1, cfg.batch_size, model_config.d_z))
        u = rng.uniform(size=(tau, model_config.d_z, model_config.d_z))
        gumbel = np.log(u) - np.log1p(-u)
        hard = ((values["gamma"] + gumbel) > 0).astype(np.float64)

        bindings = dict(values)
        bindings.update(
            {
                "in.x_past": x_past,
                "in.x_now": x_now,
                "in.eps": eps,
                "in.gumbel": gumbel,
                "in.hard": hard,
                "in.lam": alm.lam,
                "in.mu": alm.mu,
            }
        )
        try:
            loss_value, grads = ad.value_and_grad(loss_expr, bindings, trainable)
        except ad.NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from exc
        if not np.isfinite(loss_value) or any(
            not np.all(np.isfinite(g)) for g in grads.values()
        ):
            raise DivergenceError(step)

        rmsprop_step(values, grads, opt_state, cfg.learning_rate)
        values["W"] = project_nonneg(values["W"])

        if step % cfg.eval_every == 0:
            ho = holdout_loss()
            if not np.isfinite(ho):
                raise DivergenceError(step, "non-finite held-out loss")
            _, h_norm = orthogonality_defect(values["W"])
            records.append(
                {
                    "step": step,
                    "train_loss": loss_value,
                    "holdout_loss": ho,
                    "h_norm": h_norm,
                    "mu": alm.mu,
                    "mean_edge_prob": float(edge_probs(values["gamma"]).mean()),
                }
            )
            if ho < best_holdout:
                best_holdout = ho
                last_improvement = step
            elif step - last_improvement >= cfg.patience:
                # stage solved: held-out loss plateaued
                h, h_norm = orthogonality_defect(values["W"])
                alm.history.append(
                    {
                        "stage": alm.stage,
                        "start_step": stage_start,
                        "end_step": step,
                        "best_holdout": best_holdout,
                        "h_norm": h_norm,
                        "mu": alm.mu,
                    }
                )
                if h_norm <= cfg.h_threshold:
                    converged = True
                    break
                alm = alm_update(alm, h, eta=cfg.eta, delta=cfg.delta)
                best_holdout = np.inf
                last_improvement = step
                stage_start = step

    _, final_h = orthogonality_defect(values["W"])
    return TrainResult(
        params=params,
        alm=alm,
        records=records,
        converged=converged,
        steps=step,
        final_h_norm=final_h,
    )
