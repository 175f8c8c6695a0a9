"""On-disk formats for datasets, models, reports and diagnostics.

Series live in CSV (data.csv / latents.csv, header x_1.. / z_1.., floats
printed with 17 significant digits so values round-trip exactly);
everything else is JSON with sorted keys and no timestamps, so rerunning a
command with the same seed reproduces files byte for byte. meta.json keeps
the full generator configuration, which is enough to regenerate data.csv.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .model import ModelConfig, ModelParams
from .synthetic import Dataset, GenConfig, GroundTruth


class DataFormatError(Exception):
    """A file exists but does not match the documented layout."""


def _write_csv(path, array, prefix):
    array = np.asarray(array, dtype=np.float64)
    header = ",".join(f"{prefix}_{j + 1}" for j in range(array.shape[1]))
    np.savetxt(path, array, delimiter=",", fmt="%.17g", header=header, comments="")


def _read_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _dump_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_dataset(dirpath, dataset):
    """Write data.csv, meta.json and (for synthetic data) latents.csv."""
    os.makedirs(dirpath, exist_ok=True)
    x = np.asarray(dataset.x, dtype=np.float64)
    _write_csv(os.path.join(dirpath, "data.csv"), x, "x")

    gen = dataset.meta.get("generator")
    if isinstance(gen, GenConfig):
        gen = dataclasses.asdict(gen)
    truth = dataset.ground_truth
    meta = {
        "format": "cdsd-dataset-v1",
        "T": int(x.shape[0]),
        "d_x": int(x.shape[1]),
        "d_z": int(truth.latents.shape[1]) if truth else (gen or {}).get("d_z"),
        "tau": int(truth.graphs.shape[0]) if truth else (gen or {}).get("tau"),
        "seed": (gen or {}).get("seed"),
        "generator": gen,
        "spectral_radius": dataset.meta.get("spectral_radius"),
        "ground_truth": None,
    }
    if truth is not None:
        meta["ground_truth"] = {
            "graphs": truth.graphs.astype(int).tolist(),
            "coefficients": truth.coefficients.tolist(),
            "function_tags": truth.function_tags.astype(int).tolist(),
            "W": truth.mixing.tolist(),
            "decoder_tags": truth.decoder_tags.astype(int).tolist(),
            "decoder_amplitudes": truth.decoder_amplitudes.tolist(),
        }
        _write_csv(os.path.join(dirpath, "latents.csv"), truth.latents, "z")
    _dump_json(os.path.join(dirpath, "meta.json"), meta)


def read_dataset(dirpath):
    if not os.path.isdir(dirpath):
        raise FileNotFoundError(f"dataset directory {dirpath!r} not found")
    x = _read_csv(os.path.join(dirpath, "data.csv"))
    meta = _load_json(os.path.join(dirpath, "meta.json"))
    if meta.get("format") != "cdsd-dataset-v1":
        raise DataFormatError(f"unrecognized meta format {meta.get('format')!r}")
    if int(meta["T"]) != x.shape[0] or int(meta["d_x"]) != x.shape[1]:
        raise DataFormatError(
            f"data.csv is {x.shape} but meta declares T={meta['T']}, d_x={meta['d_x']}"
        )
    truth = None
    gt = meta.get("ground_truth")
    if gt is not None:
        latents_path = os.path.join(dirpath, "latents.csv")
        if not os.path.exists(latents_path):
            raise DataFormatError("meta declares ground truth but latents.csv is missing")
        truth = GroundTruth(
            graphs=np.asarray(gt["graphs"], dtype=np.int64),
            coefficients=np.asarray(gt["coefficients"], dtype=np.float64),
            function_tags=np.asarray(gt["function_tags"], dtype=np.int64),
            mixing=np.asarray(gt["W"], dtype=np.float64),
            decoder_tags=np.asarray(gt["decoder_tags"], dtype=np.int64),
            decoder_amplitudes=np.asarray(gt["decoder_amplitudes"], dtype=np.float64),
            latents=_read_csv(latents_path),
        )
    return Dataset(x=x, ground_truth=truth, meta=meta)


def gen_config_from_meta(meta):
    gen = meta.get("generator")
    if gen is None:
        raise DataFormatError("meta.json carries no generator configuration")
    return GenConfig(**gen)


def write_model(path, params):
    payload = {
        "format": "cdsd-model-v1",
        "config": {
            "d_x": params.config.d_x,
            "d_z": params.config.d_z,
            "tau": params.config.tau,
            "transition_hidden": list(params.config.transition_hidden),
            "decoder_mode": params.config.decoder_mode,
            "decoder_hidden": list(params.config.decoder_hidden),
            "embed_dim": params.config.embed_dim,
            "encoder_hidden": list(params.config.encoder_hidden),
            "transition_variance": params.config.transition_variance,
        },
        "params": {
            name: {"shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in params.values.items()
        },
    }
    _dump_json(path, payload)


def read_model(path):
    payload = _load_json(path)
    if payload.get("format") != "cdsd-model-v1":
        raise DataFormatError(f"unrecognized model format {payload.get('format')!r}")
    raw = payload["config"]
    config = ModelConfig(
        d_x=raw["d_x"],
        d_z=raw["d_z"],
        tau=raw["tau"],
        transition_hidden=tuple(raw["transition_hidden"]),
        decoder_mode=raw["decoder_mode"],
        decoder_hidden=tuple(raw["decoder_hidden"]),
        embed_dim=raw["embed_dim"],
        encoder_hidden=tuple(raw["encoder_hidden"]),
        transition_variance=raw["transition_variance"],
    )
    values = {}
    for name, entry in payload["params"].items():
        values[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return ModelParams(config, values)


def write_report(path, report):
    payload = report if isinstance(report, dict) else report.to_dict()
    _dump_json(path, payload)


def read_report(path):
    return _load_json(path)


def write_diagnostics(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
