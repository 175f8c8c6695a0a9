"""End-to-end command behavior, file formats and exit codes."""

import json
import os

import numpy as np
import pytest

from cdsd import dataio
from cdsd.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    evaluate_model,
    main,
)
from cdsd.metrics import REPORT_SCHEMA
from cdsd.model import ModelConfig, ModelParams, default_model_config, init_params
from cdsd.synthetic import Dataset, GenConfig, generate_dataset


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def tiny_gen_args(out, seed=0):
    return [
        "generate",
        "--out",
        str(out),
        f"--seed={seed}",
        "--gen.d_x=12",
        "--gen.d_z=3",
        "--gen.T=120",
        "--gen.burn_in=30",
    ]


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_complete_dataset(tmp_path):
    out = tmp_path / "ds"
    assert main(tiny_gen_args(out)) == 0
    for name in ("data.csv", "meta.json", "latents.csv"):
        assert (out / name).exists()
    dataset = dataio.read_dataset(str(out))
    assert dataset.x.shape == (120, 12)
    assert dataset.ground_truth is not None
    assert dataset.meta["generator"]["d_z"] == 3


def test_generate_same_seed_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(tiny_gen_args(a, seed=5)) == 0
    assert main(tiny_gen_args(b, seed=5)) == 0
    assert read_bytes(a / "data.csv") == read_bytes(b / "data.csv")
    assert read_bytes(a / "meta.json") == read_bytes(b / "meta.json")
    assert read_bytes(a / "latents.csv") == read_bytes(b / "latents.csv")


def test_meta_regenerates_identical_data(tmp_path):
    first = tmp_path / "first"
    assert main(tiny_gen_args(first, seed=7)) == 0
    meta = json.loads((first / "meta.json").read_text())
    config = dataio.gen_config_from_meta(meta)
    dataset, _ = generate_dataset(config)
    again = tmp_path / "again"
    dataio.write_dataset(str(again), dataset)
    assert read_bytes(first / "data.csv") == read_bytes(again / "data.csv")


def test_generate_edge_count_matches_bernoulli(tmp_path):
    out = tmp_path / "ds"
    code = main(
        [
            "generate",
            "--out",
            str(out),
            "--seed=3",
            "--gen.d_x=30",
            "--gen.d_z=10",
            "--gen.T=5",
            "--gen.burn_in=5",
            "--gen.edge_prob=0.15",
        ]
    )
    assert code == 0
    meta = json.loads((out / "meta.json").read_text())
    graphs = np.asarray(meta["ground_truth"]["graphs"])
    off = graphs[0][~np.eye(10, dtype=bool)]
    n, p = off.size, 0.15
    assert abs(off.sum() - n * p) < 3 * np.sqrt(n * p * (1 - p))


def test_cdsd_seed_env_overrides_config(tmp_path, monkeypatch):
    by_flag = tmp_path / "flag"
    assert main(tiny_gen_args(by_flag, seed=11)) == 0
    by_env = tmp_path / "env"
    monkeypatch.setenv("CDSD_SEED", "11")
    assert main(tiny_gen_args(by_env, seed=0)) == 0
    assert read_bytes(by_flag / "data.csv") == read_bytes(by_env / "data.csv")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# generation settings\ngen.d_x = 12\ngen.d_z = 3\ngen.T = 120\ngen.burn_in = 30\nseed = 4\n")
    out = tmp_path / "ds"
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--gen.T=90"]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["T"] == 90 and meta["generator"]["seed"] == 4


# ---------------------------------------------------------------------------
# train


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = main(
        [
            "generate",
            "--out",
            str(out),
            "--seed=2",
            "--gen.d_x=10",
            "--gen.d_z=2",
            "--gen.T=400",
            "--gen.burn_in=50",
            "--gen.edge_prob=0.3",
        ]
    )
    assert code == 0
    return out


def train_args(dataset, out, extra=()):
    return [
        "train",
        str(dataset),
        "--out",
        str(out),
        "--seed=1",
        "--train.max_steps=600",
        "--train.patience=150",
        "--train.eval_every=25",
        *extra,
    ]


def test_train_writes_model_diagnostics_report(small_dataset, tmp_path):
    out = tmp_path / "run"
    assert main(train_args(small_dataset, out)) == 0
    params = dataio.read_model(str(out / "model.json"))
    assert params.config.d_x == 10 and params.config.d_z == 2
    assert params.values["W"].min() >= 0.0

    records = [
        json.loads(line)
        for line in (out / "diagnostics.ndjson").read_text().splitlines()
    ]
    assert records and set(records[0]) == {
        "step",
        "train_loss",
        "holdout_loss",
        "h_norm",
        "mu",
        "mean_edge_prob",
    }

    jsonschema = pytest.importorskip("jsonschema")
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["mcc"] is not None


def test_train_rerun_is_byte_identical(small_dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(small_dataset, a)) == 0
    assert main(train_args(small_dataset, b)) == 0
    for name in ("model.json", "diagnostics.ndjson", "report.json"):
        assert read_bytes(a / name) == read_bytes(b / name)


def test_train_dimension_mismatch_is_config_error(small_dataset, tmp_path):
    code = main(train_args(small_dataset, tmp_path / "x", ["--model.d_z=10"]))
    assert code == EXIT_CONFIG  # d_z must stay below the observed dimension


def test_train_divergence_exit_code(tmp_path):
    ds_dir = tmp_path / "huge"
    gen = GenConfig(d_x=8, d_z=2, tau=1, T=200, burn_in=20, seed=1)
    dataset, _ = generate_dataset(gen)
    dataset.x *= 1e160
    dataio.write_dataset(str(ds_dir), dataset)
    code = main(train_args(ds_dir, tmp_path / "out"))
    assert code == EXIT_DIVERGED


# ---------------------------------------------------------------------------
# eval


def test_eval_of_ground_truth_model_is_perfect(tmp_path):
    gen = GenConfig(
        d_x=12, d_z=4, tau=1, T=600, burn_in=50, obs_noise_var=1e-30, seed=8
    )
    dataset, truth = generate_dataset(gen)
    ds_dir = tmp_path / "ds"
    dataio.write_dataset(str(ds_dir), dataset)

    config = ModelConfig(d_x=12, d_z=4, tau=1)
    params = init_params(config, np.random.default_rng(0))
    params.values["W"] = truth.mixing.copy()
    params.values["gamma"] = np.where(truth.graphs == 1, 30.0, -30.0)
    params.values["enc_w0"] = truth.mixing.copy()  # x W = W^T x inverts the mixing
    params.values["enc_b0"][:] = 0.0
    model_path = tmp_path / "oracle.json"
    dataio.write_model(str(model_path), params)

    report_path = tmp_path / "report.json"
    assert main(["eval", str(model_path), str(ds_dir), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["mcc"] >= 1.0 - 1e-6
    assert report["shd_total"] == 0
    assert report["w_abs_error"] <= 1e-12


def test_eval_random_models_score_poorly():
    gen = GenConfig(d_x=40, d_z=10, tau=1, T=3000, edge_prob=0.15, burn_in=200, seed=99)
    dataset, _ = generate_dataset(gen)
    scores = []
    for seed in range(20):
        config = default_model_config(40, 10, 1)
        params = init_params(config, np.random.default_rng(seed))
        scores.append(evaluate_model(params, dataset).mcc)
    assert float(np.median(scores)) < 0.6


def test_eval_without_ground_truth_omits_scores(tmp_path):
    rng = np.random.default_rng(0)
    ds_dir = tmp_path / "plain"
    dataio.write_dataset(str(ds_dir), Dataset(x=rng.standard_normal((50, 6))))
    config = ModelConfig(d_x=6, d_z=2, tau=1)
    params = init_params(config, rng)
    model_path = tmp_path / "model.json"
    dataio.write_model(str(model_path), params)
    report_path = tmp_path / "report.json"
    assert main(["eval", str(model_path), str(ds_dir), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["mcc"] is None and report["shd_total"] is None
    assert any("ground truth" in note for note in report["notes"])
    assert report["orthogonality_residual"] is not None


def test_eval_dimension_mismatch(tmp_path, small_dataset):
    config = ModelConfig(d_x=9, d_z=2, tau=1)
    params = init_params(config, np.random.default_rng(0))
    model_path = tmp_path / "model.json"
    dataio.write_model(str(model_path), params)
    assert main(["eval", str(model_path), str(small_dataset)]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# baseline


def test_baseline_writes_one_report_per_variant(tmp_path):
    gen = GenConfig(d_x=20, d_z=4, tau=1, T=800, burn_in=50, seed=12)
    dataset, _ = generate_dataset(gen)
    ds_dir = tmp_path / "ds"
    dataio.write_dataset(str(ds_dir), dataset)
    out = tmp_path / "reports"
    assert main(["baseline", str(ds_dir), "--out", str(out)]) == 0
    jsonschema = pytest.importorskip("jsonschema")
    scores = {}
    for variant in ("pca", "varimax", "varimax_plus"):
        report = json.loads((out / f"report_{variant}.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        scores[variant] = report["mcc"]
    assert scores["varimax_plus"] == pytest.approx(scores["varimax"], abs=1e-9)


# ---------------------------------------------------------------------------
# selftest and error handling


def test_selftest_passes():
    assert main(["selftest"]) == 0


def test_unknown_config_key_is_config_error(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "x"), "--gen.bogus=1"]) == EXIT_CONFIG


def test_malformed_override_is_config_error(tmp_path):
    assert (
        main(["generate", "--out", str(tmp_path / "x"), "--gen.d_x", "12"])
        == EXIT_CONFIG
    )


def test_missing_dataset_is_io_error(tmp_path):
    code = main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "out")])
    assert code == EXIT_IO


def test_corrupt_meta_is_io_error(tmp_path, small_dataset):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(small_dataset, broken)
    meta = json.loads((broken / "meta.json").read_text())
    meta["T"] = 999
    (broken / "meta.json").write_text(json.dumps(meta))
    assert main(["train", str(broken), "--out", str(tmp_path / "out")]) == EXIT_IO


def test_model_roundtrip_preserves_values(tmp_path):
    config = ModelConfig(d_x=7, d_z=3, tau=2, decoder_mode="nonlinear")
    params = init_params(config, np.random.default_rng(5))
    path = tmp_path / "m.json"
    dataio.write_model(str(path), params)
    loaded = dataio.read_model(str(path))
    assert loaded.config == config
    for name, value in params.values.items():
        assert np.array_equal(loaded.values[name], value)
