"""Command line entry point.

Subcommands: generate, train, eval, baseline, selftest. Settings come from
flat "key = value" config files with dotted sections; any key can also be
passed as a --key=value flag, and the CDSD_SEED environment variable
overrides the configured seed. Exit codes: 0 success, 2 configuration
error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataio
from .baseline import fit_variants
from .graphs import binarize
from .metrics import EvalReport, score_recovery, single_parent_violation
from .model import default_model_config, encode_series
from .selfcheck import run_selftest
from .synthetic import GenConfig, generate_dataset
from .training import DivergenceError, TrainConfig, orthogonality_defect, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


def _parse_scalar(key, raw, kind):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind in ("optfloat", "optint"):
            if raw.lower() in ("none", "null", "auto"):
                return None
            return float(raw) if kind == "optfloat" else int(raw)
    except ValueError:
        pass
    raise ConfigError(f"bad value {raw!r} for key {key!r} (expects {kind})")


def _read_config_file(path):
    pairs = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, value = stripped.partition("=")
                pairs.append((key.strip(), value.strip()))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    return pairs


def resolve_config(spec, config_path=None, overrides=()):
    """Defaults, then config file, then --key=value flags, then CDSD_SEED."""
    values = {key: default for key, (_, default) in spec.items()}
    pairs = _read_config_file(config_path) if config_path else []
    for token in overrides:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"unrecognized argument {token!r} (use --key=value)")
        key, _, raw = token[2:].partition("=")
        pairs.append((key, raw))
    for key, raw in pairs:
        if key not in spec:
            raise ConfigError(f"unknown configuration key {key!r}")
        values[key] = _parse_scalar(key, raw, spec[key][0])
    if "seed" in spec and "CDSD_SEED" in os.environ:
        values["seed"] = _parse_scalar("seed", os.environ["CDSD_SEED"], "int")
    return values


GENERATE_SPEC = {
    "seed": ("int", 0),
    "gen.d_x": ("int", 100),
    "gen.d_z": ("int", 10),
    "gen.tau": ("int", 1),
    "gen.T": ("int", 5000),
    "gen.edge_prob": ("float", 0.15),
    "gen.dynamics": ("str", "linear"),
    "gen.decoding": ("str", "linear"),
    "gen.obs_noise_var": ("optfloat", None),
    "gen.nonlinear_frac": ("float", 0.5),
    "gen.burn_in": ("int", 1000),
}

TRAIN_SPEC = {
    "seed": ("int", 0),
    "model.d_z": ("optint", None),  # default: ground-truth value from meta.json
    "model.tau": ("optint", None),
    "model.dynamics": ("str", "auto"),  # auto: follow the dataset's generator
    "model.decoding": ("str", "auto"),
    "model.embed_dim": ("int", 10),
    "model.transition_variance": ("float", 1.0),
    "train.lambda_s": ("float", 0.1),
    "train.learning_rate": ("float", 1e-3),
    "train.batch_size": ("int", 64),
    "train.mu0": ("float", 1e-3),
    "train.lambda_init": ("float", 0.0),
    "train.eta": ("float", 2.0),
    "train.delta": ("float", 0.9),
    "train.h_threshold": ("float", 1e-4),
    "train.patience": ("int", 1000),
    "train.eval_every": ("int", 50),
    "train.max_steps": ("int", 300000),
    "train.split": ("float", 0.8),
    "train.gumbel_temperature": ("float", 1.0),
    "eval.threshold": ("float", 0.5),
    "eval.rel_threshold": ("float", 0.1),
}

EVAL_SPEC = {
    "eval.threshold": ("float", 0.5),
    "eval.rel_threshold": ("float", 0.1),
}

BASELINE_SPEC = {
    "seed": ("int", 0),
    "baseline.d_z": ("optint", None),
    "baseline.tau": ("optint", None),
    "baseline.alpha": ("float", 0.05),
    "baseline.varimax_tol": ("float", 1e-8),
    "baseline.varimax_max_iter": ("int", 1000),
}


def evaluate_model(params, dataset, threshold=0.5, rel_threshold=0.1):
    """Score a trained model against a dataset (partial without ground truth)."""
    w = params.values["W"]
    g_hat = binarize(params.values["gamma"], threshold)
    if dataset.ground_truth is None:
        _, residual = orthogonality_defect(w)
        report = EvalReport(
            orthogonality_residual=residual,
            single_parent_violations=single_parent_violation(w, rel_threshold),
        )
        report.notes.append("dataset has no ground truth: mcc/shd/w_abs_error omitted")
        return report
    z_hat = encode_series(params, dataset.x)
    return score_recovery(z_hat, w, g_hat, dataset.ground_truth, rel_threshold)


def cmd_generate(config_path, out_dir, overrides=()):
    cfg = resolve_config(GENERATE_SPEC, config_path, overrides)
    try:
        gen = GenConfig(
            d_x=cfg["gen.d_x"],
            d_z=cfg["gen.d_z"],
            tau=cfg["gen.tau"],
            T=cfg["gen.T"],
            edge_prob=cfg["gen.edge_prob"],
            dynamics=cfg["gen.dynamics"],
            decoding=cfg["gen.decoding"],
            obs_noise_var=cfg["gen.obs_noise_var"],
            nonlinear_frac=cfg["gen.nonlinear_frac"],
            burn_in=cfg["gen.burn_in"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dataset, truth = generate_dataset(gen)
    dataio.write_dataset(out_dir, dataset)
    print(
        f"generated T={gen.T} d_x={gen.d_x} d_z={gen.d_z} tau={gen.tau} "
        f"edges={int(truth.graphs.sum())} "
        f"spectral_radius={dataset.meta['spectral_radius']:.4f} -> {out_dir}"
    )
    return EXIT_OK


def _model_setting(cfg, key, meta_value, label):
    value = cfg[key]
    if value is None:
        if meta_value is None:
            raise ConfigError(f"{key} not configured and dataset meta lacks {label}")
        return int(meta_value)
    return int(value)


def cmd_train(dataset_dir, config_path, out_dir, overrides=()):
    cfg = resolve_config(TRAIN_SPEC, config_path, overrides)
    dataset = dataio.read_dataset(dataset_dir)
    meta = dataset.meta
    gen = meta.get("generator") or {}
    d_z = _model_setting(cfg, "model.d_z", meta.get("d_z"), "d_z")
    tau = _model_setting(cfg, "model.tau", meta.get("tau"), "tau")
    dynamics = cfg["model.dynamics"]
    if dynamics == "auto":
        dynamics = gen.get("dynamics", "linear")
    decoding = cfg["model.decoding"]
    if decoding == "auto":
        decoding = gen.get("decoding", "linear")

    try:
        model_config = default_model_config(
            d_x=dataset.x.shape[1],
            d_z=d_z,
            tau=tau,
            dynamics=dynamics,
            decoding=decoding,
            embed_dim=cfg["model.embed_dim"],
            transition_variance=cfg["model.transition_variance"],
        )
        train_config = TrainConfig(
            lambda_s=cfg["train.lambda_s"],
            learning_rate=cfg["train.learning_rate"],
            batch_size=cfg["train.batch_size"],
            mu0=cfg["train.mu0"],
            lambda_init=cfg["train.lambda_init"],
            eta=cfg["train.eta"],
            delta=cfg["train.delta"],
            h_threshold=cfg["train.h_threshold"],
            patience=cfg["train.patience"],
            eval_every=cfg["train.eval_every"],
            max_steps=cfg["train.max_steps"],
            seed=cfg["seed"],
            split=cfg["train.split"],
            gumbel_temperature=cfg["train.gumbel_temperature"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    result = train(dataset, model_config, train_config)
    os.makedirs(out_dir, exist_ok=True)
    dataio.write_model(os.path.join(out_dir, "model.json"), result.params)
    dataio.write_diagnostics(os.path.join(out_dir, "diagnostics.ndjson"), result.records)
    print(
        f"trained {result.steps} steps, converged={result.converged}, "
        f"||h(W)||={result.final_h_norm:.3e}, stages={result.alm.stage}"
    )
    report = evaluate_model(
        result.params, dataset, cfg["eval.threshold"], cfg["eval.rel_threshold"]
    )
    dataio.write_report(os.path.join(out_dir, "report.json"), report)
    if report.mcc is not None:
        print(
            f"mcc={report.mcc:.4f} shd={report.shd_total} "
            f"w_abs_error={report.w_abs_error:.4f} "
            f"violations={report.single_parent_violations}"
        )
    return EXIT_OK


def cmd_eval(model_path, dataset_dir, out_path="report.json", overrides=()):
    cfg = resolve_config(EVAL_SPEC, None, overrides)
    params = dataio.read_model(model_path)
    dataset = dataio.read_dataset(dataset_dir)
    if params.config.d_x != dataset.x.shape[1]:
        raise ConfigError(
            f"model d_x={params.config.d_x} but dataset has {dataset.x.shape[1]} columns"
        )
    report = evaluate_model(
        params, dataset, cfg["eval.threshold"], cfg["eval.rel_threshold"]
    )
    dataio.write_report(out_path, report)
    if report.mcc is None:
        print(f"report (no ground truth) -> {out_path}")
    else:
        print(f"mcc={report.mcc:.4f} shd={report.shd_total} -> {out_path}")
    return EXIT_OK


def cmd_baseline(dataset_dir, config_path, out_dir=".", overrides=()):
    cfg = resolve_config(BASELINE_SPEC, config_path, overrides)
    dataset = dataio.read_dataset(dataset_dir)
    meta = dataset.meta
    d_z = _model_setting(cfg, "baseline.d_z", meta.get("d_z"), "d_z")
    tau = _model_setting(cfg, "baseline.tau", meta.get("tau"), "tau")
    variants = fit_variants(
        dataset.x,
        d_z,
        tau,
        alpha=cfg["baseline.alpha"],
        tol=cfg["baseline.varimax_tol"],
        max_iter=cfg["baseline.varimax_max_iter"],
    )
    os.makedirs(out_dir, exist_ok=True)
    for name, (solution, g_hat) in variants.items():
        if dataset.ground_truth is None:
            report = EvalReport(
                orthogonality_residual=float(
                    np.linalg.norm(
                        solution.loadings.T @ solution.loadings - np.eye(d_z)
                    )
                ),
                single_parent_violations=single_parent_violation(solution.loadings),
            )
            report.notes.append("dataset has no ground truth: mcc/shd/w_abs_error omitted")
        else:
            report = score_recovery(
                solution.latents, solution.loadings, g_hat, dataset.ground_truth
            )
        report.notes.append(f"baseline variant: {name}")
        path = os.path.join(out_dir, f"report_{name}.json")
        dataio.write_report(path, report)
        shown = "n/a" if report.mcc is None else f"{report.mcc:.4f}"
        print(f"{name}: mcc={shown} -> {path}")
    return EXIT_OK


def cmd_selftest():
    return EXIT_OK if run_selftest() else 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="cdsd",
        description="Learn latent variables and a lagged causal graph from time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="fit the model to a dataset")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output directory for model/report")

    p = sub.add_parser("eval", help="score a trained model against a dataset")
    p.add_argument("model", help="model.json path")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--out", default="report.json")

    p = sub.add_parser("baseline", help="run the PCA/Varimax pipeline variants")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=".", help="directory for per-variant reports")

    sub.add_parser("selftest", help="run the fast numerical verification suite")
    return parser


def main(argv=None):
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.config, args.out, extra)
        if args.command == "train":
            return cmd_train(args.dataset, args.config, args.out, extra)
        if args.command == "eval":
            return cmd_eval(args.model, args.dataset, args.out, extra)
        if args.command == "baseline":
            return cmd_baseline(args.dataset, args.config, args.out, extra)
        if args.command == "selftest":
            return cmd_selftest()
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, dataio.DataFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
