"""Experiment pipeline: train -> convert -> normalize -> fine-tune ->
compile -> evaluate on both backends, with metrics, agreement rates and
per-stage wall clock collected into one report.

Every stage is deterministic given the config seeds; wall-clock fields are
the only run-to-run difference in the emitted report.
"""

from __future__ import annotations

import copy
import json
import os
import time

import numpy as np

from . import report as report_mod
from .activation import fit_tanh, poly_depth
from .baseline import train_logistic
from .compiler import (
    compile_forest,
    compiled_to_json,
    complexity_report,
    depth_requirement,
    evaluate,
    pack_input,
)
from .data import (
    ADULT_FETCH_HINT,
    ADULT_SCHEMA,
    Preprocessor,
    Table,
    TableSchema,
    read_csv,
    split_table,
    synthetic_table,
)
from .engine import EngineParams, make_engine
from .errors import ConfigError, StageError
from .forest import forest_to_json, pad_forest, train_forest
from .metrics import agreement, classification_metrics
from .neural import (
    convert_forest,
    finetune_last_layer,
    forward_hard,
    forward_soft,
    network_to_json,
    normalize_forest,
)

DEFAULT_CONFIG = {
    "dataset": {"kind": "synthetic", "rows": 5000, "seed": 0, "path": None, "schema": None},
    "split": {"ratio": 0.8, "seed": 1},
    "forest": {
        "n_trees": 20,
        "max_depth": 4,
        "min_samples_leaf": 20,
        "features_per_split": None,
        "seed": 2,
    },
    "baseline": {"l2": 1e-4, "lr": 1.0, "epochs": 400},
    "activation": {"dilatation": 4.0, "degree": 7},
    "finetune": {
        "epochs": 20,
        "lr": 0.5,
        "label_smoothing": 0.1,
        "batch_size": 128,
        "seed": 3,
    },
    "engine": {
        "slot_count": 8192,
        "scale_bits": 40,
        "depth_budget": None,  # None: exactly the compiled depth requirement
        "seed": 4,
        "ckks_rows": 50,
    },
    "assert": {
        "min_rf_accuracy": None,
        "min_nrf_accuracy": None,
        "min_agreement": 0.95,
        "nrf_not_worse_than_converted": True,
    },
    "output_dir": "runs/latest",
}

_KNOWN_DATASETS = ("synthetic", "csv", "adult")


def _deep_merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(out[key], val, where)
        else:
            out[key] = val
    return out


class ExperimentConfig:
    """Validated experiment configuration; run_pipeline consumes this."""

    def __init__(self, overrides: dict | None = None):
        self.raw = _deep_merge(DEFAULT_CONFIG, overrides or {})
        self.validate()

    @classmethod
    def from_file(cls, path: str, extra: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}") from exc
        if extra:
            doc = _deep_merge_free(doc, extra)
        return cls(doc)

    def __getitem__(self, key):
        return self.raw[key]

    def validate(self) -> None:
        ds = self.raw["dataset"]
        if ds["kind"] not in _KNOWN_DATASETS:
            raise ConfigError(f"dataset.kind must be one of {_KNOWN_DATASETS}")
        if ds["kind"] in ("csv", "adult") and not ds.get("path"):
            raise ConfigError(f"dataset.kind '{ds['kind']}' requires dataset.path")
        if not 0.0 < self.raw["split"]["ratio"] < 1.0:
            raise ConfigError("split.ratio must be in (0, 1)")
        if self.raw["forest"]["n_trees"] < 1 or self.raw["forest"]["max_depth"] < 1:
            raise ConfigError("forest.n_trees and forest.max_depth must be >= 1")
        n = self.raw["engine"]["slot_count"]
        if n < 2 or n & (n - 1):
            raise ConfigError("engine.slot_count must be a power of two")
        if self.raw["engine"]["ckks_rows"] < 1:
            raise ConfigError("engine.ckks_rows must be >= 1")
        if self.raw["activation"]["degree"] < 1:
            raise ConfigError("activation.degree must be >= 1")
        budget = self.raw["engine"]["depth_budget"]
        if budget is not None:
            need = 2 * poly_depth(self.raw["activation"]["degree"]) + 2
            if budget < need:
                raise ConfigError(
                    f"engine.depth_budget {budget} below the {need} levels the "
                    f"degree-{self.raw['activation']['degree']} program needs"
                )

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()
        ).hexdigest()[:12]


def _deep_merge_free(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(out.get(key), dict) and isinstance(val, dict):
            out[key] = _deep_merge_free(out[key], val)
        else:
            out[key] = val
    return out


def load_table(config: ExperimentConfig) -> Table:
    ds = config["dataset"]
    if ds["kind"] == "synthetic":
        return synthetic_table(rows=ds.get("rows", 5000), seed=ds.get("seed", 0))
    if ds["kind"] == "adult":
        schema = ADULT_SCHEMA
    elif ds.get("schema"):
        with open(ds["schema"]) as fh:
            schema = TableSchema.from_json(fh.read())
    else:
        raise ConfigError("dataset.kind 'csv' requires dataset.schema")
    if not os.path.exists(ds["path"]):
        hint = f" ({ADULT_FETCH_HINT})" if ds["kind"] == "adult" else ""
        raise ConfigError(f"dataset file '{ds['path']}' not found{hint}")
    return read_csv(ds["path"], schema)


class _StageTimer:
    def __init__(self):
        self.seconds: dict[str, float] = {}
        self.artifacts: list[str] = []
        self._stage = None
        self._t0 = 0.0

    def start(self, stage: str):
        self._stage = stage
        self._t0 = time.perf_counter()

    def stop(self):
        self.seconds[self._stage] = round(time.perf_counter() - self._t0, 4)


def _persist(path: str, text: str, timer: _StageTimer) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
    timer.artifacts.append(path)
    return path


def run_pipeline(config: ExperimentConfig, render_report: bool = True) -> dict:
    """Execute every stage; returns (and persists) the metrics report."""
    out_dir = config["output_dir"]
    timer = _StageTimer()
    report: dict = {
        "config_digest": config.digest(),
        "config": config.raw,
        "variants": {},
        "agreements": {},
        "stage_seconds": timer.seconds,
    }

    def run_stage(name, fn):
        timer.start(name)
        try:
            result = fn()
        except Exception as exc:
            raise StageError(
                name,
                f"{exc} [completed artifacts: {', '.join(timer.artifacts) or 'none'}]",
            ) from exc
        timer.stop()
        return result

    # -- data ---------------------------------------------------------------
    def stage_data():
        table = load_table(config)
        train_t, val_t = split_table(
            table, config["split"]["ratio"], config["split"]["seed"]
        )
        pre = Preprocessor(schema=table.schema).fit(train_t)
        _persist(os.path.join(out_dir, "preprocessor.json"), pre.to_json(), timer)
        return pre, pre.transform(train_t), pre.transform(val_t)

    pre, train, val = run_stage("data", stage_data)
    positive = pre.positive_class
    report["dataset"] = {
        "rows_train": train.n_rows,
        "rows_val": val.n_rows,
        "n_features": train.n_features,
        "n_classes": train.n_classes,
        "positive_class": positive,
    }

    # -- linear baseline -------------------------------------------------------
    def stage_baseline():
        cfg = config["baseline"]
        model = train_logistic(train, l2=cfg["l2"], lr=cfg["lr"], epochs=cfg["epochs"])
        return classification_metrics(val.labels, model.predict(val.features), positive)

    report["variants"]["linear-baseline"] = run_stage("baseline", stage_baseline)

    # -- forest training ---------------------------------------------------------
    def stage_train():
        cfg = config["forest"]
        forest = train_forest(
            train,
            n_trees=cfg["n_trees"],
            max_depth=cfg["max_depth"],
            min_samples_leaf=cfg["min_samples_leaf"],
            features_per_split=cfg["features_per_split"],
            rng_seed=cfg["seed"],
        )
        forest = pad_forest(forest)
        _persist(os.path.join(out_dir, "forest.json"), forest_to_json(forest), timer)
        return forest

    forest = run_stage("train", stage_train)
    rf_pred = forest.predict_class(val.features)
    report["variants"]["RF"] = classification_metrics(val.labels, rf_pred, positive)
    report["forest"] = {"n_trees": forest.n_trees, "n_leaves": forest.trees[0].n_leaves}

    # -- conversion + normalization ------------------------------------------------
    def stage_convert():
        model = convert_forest(forest, dilatation=config["activation"]["dilatation"])
        model = normalize_forest(model)
        _persist(os.path.join(out_dir, "network.json"), network_to_json(model), timer)
        hard_pred = np.argmax(forward_hard(model, val.features), axis=1)
        if not np.array_equal(hard_pred, rf_pred):
            raise AssertionError("hard-activation network disagrees with the forest")
        return model, hard_pred

    model, hard_pred = run_stage("convert", stage_convert)
    report["variants"]["NRF-hard"] = classification_metrics(val.labels, hard_pred, positive)
    report["agreements"]["rf_vs_nrf_hard"] = agreement(rf_pred, hard_pred)
    converted_soft_pred = np.argmax(forward_soft(model, val.features, "tanh"), axis=1)
    report["variants"]["NRF-converted-soft"] = classification_metrics(
        val.labels, converted_soft_pred, positive
    )

    # -- fine-tuning ---------------------------------------------------------------
    def stage_finetune():
        cfg = config["finetune"]
        tuned = finetune_last_layer(
            model,
            train.features,
            train.labels,
            epochs=cfg["epochs"],
            lr=cfg["lr"],
            label_smoothing_eps=cfg["label_smoothing"],
            rng_seed=cfg["seed"],
            batch_size=cfg["batch_size"],
        )
        _persist(
            os.path.join(out_dir, "network_finetuned.json"), network_to_json(tuned), timer
        )
        return tuned

    tuned = run_stage("finetune", stage_finetune)
    nrf_pred = np.argmax(forward_soft(tuned, val.features, "tanh"), axis=1)
    report["variants"]["NRF-soft"] = classification_metrics(val.labels, nrf_pred, positive)

    # -- activation fit + compile ---------------------------------------------------
    def stage_compile():
        act_cfg = config["activation"]
        poly = fit_tanh(act_cfg["dilatation"], act_cfg["degree"])
        eng_cfg = config["engine"]
        budget = eng_cfg["depth_budget"] or depth_requirement(poly)
        params = EngineParams(
            slot_count=eng_cfg["slot_count"],
            depth_budget=budget,
            scale_bits=eng_cfg["scale_bits"],
        )
        compiled = compile_forest(tuned, params, poly)
        _persist(os.path.join(out_dir, "compiled.json"), compiled_to_json(compiled), timer)
        _persist(os.path.join(out_dir, "layout.json"), compiled.layout.to_json(), timer)
        return poly, params, compiled

    poly, eng_params, compiled = run_stage("compile", stage_compile)
    report["activation"] = {
        "degree": poly.degree,
        "dilatation": poly.dilatation,
        "max_error": poly.max_error,
        "coefficients": poly.coefficients.tolist(),
    }
    report["layout"] = {
        "L": compiled.layout.n_trees,
        "K": compiled.layout.n_leaves,
        "block_width": compiled.layout.block_width,
        "active_width": compiled.layout.active_width,
        "n": compiled.layout.slot_count,
        "depth_requirement": compiled.depth_requirement,
    }
    poly_pred = np.argmax(forward_soft(tuned, val.features, poly), axis=1)

    # -- reference-backend evaluation ---------------------------------------------
    def stage_eval_reference():
        engine = make_engine(EngineParams(**{**eng_params.__dict__, "backend": "reference"}))
        preds = np.empty(val.n_rows, dtype=np.int64)
        sections = None
        for i in range(val.n_rows):
            ct = engine.encode_encrypt(pack_input(compiled.layout, val.features[i]))
            trace = evaluate(engine, compiled, ct)
            scores = [engine.decrypt_decode(h)[0] for h in trace.outputs]
            preds[i] = int(np.argmax(scores))
            if sections is None:
                sections = {k: v.as_dict() for k, v in trace.sections.items()}
        return preds, sections

    hrf_ref_pred, op_sections = run_stage("evaluate-reference", stage_eval_reference)
    report["variants"]["HRF-reference"] = classification_metrics(
        val.labels, hrf_ref_pred, positive
    )
    report["agreements"]["nrf_poly_vs_hrf_reference"] = agreement(poly_pred, hrf_ref_pred)
    predicted = complexity_report(compiled)
    report["op_counts"] = {
        "measured_sections": op_sections,
        "predicted_sections": {
            k: v.as_dict() for k, v in predicted["sections"].items()
        },
        "note": predicted["note"],
    }

    # -- encrypted evaluation ---------------------------------------------------------
    def stage_eval_ckks():
        eng_cfg = config["engine"]
        rows = min(eng_cfg["ckks_rows"], val.n_rows)
        params = EngineParams(**{**eng_params.__dict__, "backend": "ckks"})
        engine = make_engine(
            params, rotation_steps=compiled.rotation_steps(), seed=eng_cfg["seed"]
        )
        preds = np.empty(rows, dtype=np.int64)
        t_first = None
        for i in range(rows):
            t0 = time.perf_counter()
            ct = engine.encode_encrypt(pack_input(compiled.layout, val.features[i]))
            trace = evaluate(engine, compiled, ct)
            scores = [engine.decrypt_decode(h)[0] for h in trace.outputs]
            preds[i] = int(np.argmax(scores))
            if t_first is None:
                t_first = time.perf_counter() - t0
        return preds, rows, t_first

    ckks_pred, ckks_rows, t_single = run_stage("evaluate-ckks", stage_eval_ckks)
    report["variants"]["HRF-ckks"] = classification_metrics(
        val.labels[:ckks_rows], ckks_pred, positive
    )
    report["agreements"]["nrf_soft_vs_hrf_ckks"] = agreement(nrf_pred[:ckks_rows], ckks_pred)
    report["agreements"]["hrf_reference_vs_hrf_ckks"] = agreement(
        hrf_ref_pred[:ckks_rows], ckks_pred
    )
    report["encrypted_inference"] = {
        "rows_evaluated": ckks_rows,
        "single_inference_seconds": round(t_single, 3),
    }

    # -- report ------------------------------------------------------------------------
    def stage_report():
        path = _persist(
            os.path.join(out_dir, "metrics.json"), json.dumps(report, indent=1), timer
        )
        _persist(
            os.path.join(out_dir, "report.txt"), report_mod.render_text(report), timer
        )
        if render_report:
            for p in report_mod.render_all(report, out_dir):
                timer.artifacts.append(p)
        return path

    run_stage("report", stage_report)
    report["artifacts"] = timer.artifacts
    return report


def check_thresholds(report: dict, config: ExperimentConfig) -> list[str]:
    """Returns the list of violated acceptance thresholds (empty when green)."""
    cfg = config["assert"]
    failures = []
    variants = report["variants"]
    if cfg["min_rf_accuracy"] is not None:
        if variants["RF"]["accuracy"] < cfg["min_rf_accuracy"]:
            failures.append(
                f"RF accuracy {variants['RF']['accuracy']:.4f} < {cfg['min_rf_accuracy']}"
            )
    if cfg["min_nrf_accuracy"] is not None:
        if variants["NRF-soft"]["accuracy"] < cfg["min_nrf_accuracy"]:
            failures.append(
                f"NRF accuracy {variants['NRF-soft']['accuracy']:.4f} < {cfg['min_nrf_accuracy']}"
            )
    if cfg["nrf_not_worse_than_converted"]:
        if variants["NRF-soft"]["accuracy"] < variants["NRF-converted-soft"]["accuracy"]:
            failures.append(
                "fine-tuned NRF accuracy "
                f"{variants['NRF-soft']['accuracy']:.4f} below converted "
                f"{variants['NRF-converted-soft']['accuracy']:.4f}"
            )
    if cfg["min_agreement"] is not None:
        rate = report["agreements"]["nrf_soft_vs_hrf_ckks"]
        if rate < cfg["min_agreement"]:
            failures.append(f"NRF/HRF agreement {rate:.4f} < {cfg['min_agreement']}")
    return failures
