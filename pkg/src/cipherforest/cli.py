"""Command-line interface.

Stage commands (train, convert, finetune, compile, keygen, pack, eval) read
and write the artifacts of a run directory so the pipeline can be driven
step by step, including a local client/server demonstration with serialized
keys and ciphertexts; `bench` runs everything end to end and `report`
renders figures and delimited output from a saved metrics file.

Exit codes: 0 success, 1 configuration error, 2 stage failure,
3 acceptance-threshold failure (bench --assert).
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .activation import fit_tanh
from .ckks.backend import CkksEngine
from .ckks.serialize import (
    bundle_from_bytes,
    bundle_to_bytes,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    keyset_from_bytes,
    keyset_to_bytes,
    validate_keyset_chain,
)
from .compiler import (
    compile_forest,
    compiled_from_json,
    compiled_to_json,
    depth_requirement,
    evaluate,
    pack_input,
)
from .data import Preprocessor, split_table
from .engine import CipherHandle, EngineParams, make_engine
from .errors import CipherForestError, ConfigError, StageError
from .forest import forest_from_json, forest_to_json, pad_forest, train_forest
from .neural import (
    convert_forest,
    finetune_last_layer,
    network_from_json,
    network_to_json,
    normalize_forest,
)
from .pipeline import ExperimentConfig, check_thresholds, load_table, run_pipeline
from . import report as report_mod

EXIT_CONFIG = 1
EXIT_STAGE = 2
EXIT_THRESHOLD = 3


def _parse_sets(pairs) -> dict:
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, _, raw = pair.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _load_config(path, sets) -> ExperimentConfig:
    return ExperimentConfig.from_file(path, _parse_sets(sets))


def _guard(fn):
    """Map package errors onto the documented exit codes."""
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except StageError as exc:
        click.echo(f"stage error: {exc}", err=True)
        sys.exit(EXIT_STAGE)
    except CipherForestError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_STAGE)


def _out(config) -> str:
    path = config["output_dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _read(path: str) -> str:
    if not os.path.exists(path):
        raise StageError("load", f"missing artifact '{path}' (run the earlier stages)")
    with open(path) as fh:
        return fh.read()


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)
    click.echo(f"wrote {path}")


def _prepared_splits(config):
    table = load_table(config)
    train_t, val_t = split_table(table, config["split"]["ratio"], config["split"]["seed"])
    return table, train_t, val_t


def _engine_params(config, compiled, backend: str) -> EngineParams:
    eng = config["engine"]
    budget = eng["depth_budget"] or compiled.depth_requirement
    return EngineParams(
        slot_count=eng["slot_count"], depth_budget=budget,
        scale_bits=eng["scale_bits"], backend=backend,
    )


_config_opt = click.option("--config", "config_path", required=True,
                           type=click.Path(exists=True), help="experiment config JSON")
_set_opt = click.option("--set", "sets", multiple=True,
                        help="override config values, e.g. --set forest.n_trees=10")


@click.group()
def main():
    """Random-forest inference on encrypted data."""


@main.command()
@_config_opt
@_set_opt
def train(config_path, sets):
    """Train the forest; writes preprocessor.json and forest.json."""

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        _, train_t, _ = _prepared_splits(config)
        pre = Preprocessor(schema=train_t.schema).fit(train_t)
        _write(os.path.join(out, "preprocessor.json"), pre.to_json())
        data = pre.transform(train_t)
        cfg = config["forest"]
        forest = pad_forest(
            train_forest(
                data, n_trees=cfg["n_trees"], max_depth=cfg["max_depth"],
                min_samples_leaf=cfg["min_samples_leaf"],
                features_per_split=cfg["features_per_split"], rng_seed=cfg["seed"],
            )
        )
        _write(os.path.join(out, "forest.json"), forest_to_json(forest))

    _guard(body)


@main.command()
@_config_opt
@_set_opt
def convert(config_path, sets):
    """Convert the forest to its normalized network form; writes network.json."""

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        forest = forest_from_json(_read(os.path.join(out, "forest.json")))
        model = normalize_forest(
            convert_forest(forest, dilatation=config["activation"]["dilatation"])
        )
        _write(os.path.join(out, "network.json"), network_to_json(model))

    _guard(body)


@main.command()
@_config_opt
@_set_opt
def finetune(config_path, sets):
    """Fine-tune the output layer; writes network_finetuned.json."""

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        model = network_from_json(_read(os.path.join(out, "network.json")))
        pre = Preprocessor.from_json(_read(os.path.join(out, "preprocessor.json")))
        _, train_t, _ = _prepared_splits(config)
        data = pre.transform(train_t)
        cfg = config["finetune"]
        tuned = finetune_last_layer(
            model, data.features, data.labels, epochs=cfg["epochs"], lr=cfg["lr"],
            label_smoothing_eps=cfg["label_smoothing"], rng_seed=cfg["seed"],
            batch_size=cfg["batch_size"],
        )
        _write(os.path.join(out, "network_finetuned.json"), network_to_json(tuned))

    _guard(body)


@main.command(name="compile")
@_config_opt
@_set_opt
def compile_cmd(config_path, sets):
    """Compile packed plaintexts; writes compiled.json and layout.json."""

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        net_path = os.path.join(out, "network_finetuned.json")
        if not os.path.exists(net_path):
            net_path = os.path.join(out, "network.json")
        model = network_from_json(_read(net_path))
        act = config["activation"]
        poly = fit_tanh(act["dilatation"], act["degree"])
        eng = config["engine"]
        params = EngineParams(
            slot_count=eng["slot_count"],
            depth_budget=eng["depth_budget"] or depth_requirement(poly),
            scale_bits=eng["scale_bits"],
        )
        compiled = compile_forest(model, params, poly)
        _write(os.path.join(out, "compiled.json"), compiled_to_json(compiled))
        _write(os.path.join(out, "layout.json"), compiled.layout.to_json())
        click.echo(
            f"L={compiled.layout.n_trees} K={compiled.layout.n_leaves} "
            f"active={compiled.layout.active_width}/{params.slot_count} slots, "
            f"depth {compiled.depth_requirement}/{params.depth_budget}"
        )

    _guard(body)


@main.command()
@_config_opt
@_set_opt
def keygen(config_path, sets):
    """Generate CKKS keys for the compiled program; writes keys/{client,server}.bin."""

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        compiled = compiled_from_json(_read(os.path.join(out, "compiled.json")))
        params = _engine_params(config, compiled, "ckks")
        engine = make_engine(params, rotation_steps=compiled.rotation_steps(),
                             seed=config["engine"]["seed"])
        key_dir = os.path.join(out, "keys")
        os.makedirs(key_dir, exist_ok=True)
        client = os.path.join(key_dir, "client.bin")
        server = os.path.join(key_dir, "server.bin")
        with open(client, "wb") as fh:
            fh.write(keyset_to_bytes(engine.keys, engine.ckks_params, include_secret=True))
        with open(server, "wb") as fh:
            fh.write(keyset_to_bytes(engine.keys.evaluation_only(), engine.ckks_params,
                                     include_secret=False))
        click.echo(f"wrote {client} ({os.path.getsize(client)/1e6:.1f} MB)")
        click.echo(f"wrote {server} ({os.path.getsize(server)/1e6:.1f} MB)")

    _guard(body)


def _client_engine(config, compiled) -> CkksEngine:
    out = config["output_dir"]
    with open(os.path.join(out, "keys", "client.bin"), "rb") as fh:
        keys, _ = keyset_from_bytes(fh.read(), expect_secret=True)
    params = _engine_params(config, compiled, "ckks")
    engine = CkksEngine.from_keyset(params, keys, seed=config["engine"]["seed"])
    validate_keyset_chain(keys, engine.context)
    return engine


def _server_engine(config, compiled) -> CkksEngine:
    out = config["output_dir"]
    with open(os.path.join(out, "keys", "server.bin"), "rb") as fh:
        keys, _ = keyset_from_bytes(fh.read(), expect_secret=False)
    params = _engine_params(config, compiled, "ckks")
    engine = CkksEngine.from_keyset(params, keys, seed=config["engine"]["seed"] + 1)
    validate_keyset_chain(keys, engine.context)
    return engine


@main.command()
@_config_opt
@_set_opt
@click.option("--row", type=int, default=0, help="validation row to encrypt")
@click.option("--out", "out_path", default=None, help="ciphertext output path")
def pack(config_path, sets, row, out_path):
    """Client side: reshuffle, pack and encrypt one validation row."""

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        compiled = compiled_from_json(_read(os.path.join(out, "compiled.json")))
        pre = Preprocessor.from_json(_read(os.path.join(out, "preprocessor.json")))
        _, _, val_t = _prepared_splits(config)
        data = pre.transform(val_t)
        if not 0 <= row < data.n_rows:
            raise ConfigError(f"--row {row} outside the validation split (0..{data.n_rows - 1})")
        engine = _client_engine(config, compiled)
        handle = engine.encode_encrypt(pack_input(compiled.layout, data.features[row]))
        path = out_path or os.path.join(out, f"input_row{row}.ct")
        with open(path, "wb") as fh:
            fh.write(ciphertext_to_bytes(handle.payload, engine.ckks_params))
        click.echo(f"wrote {path} (true label: {int(data.labels[row])})")

    _guard(body)


@main.command(name="eval")
@_config_opt
@_set_opt
@click.option("--mode", type=click.Choice(["server", "client", "trusted"]),
              default="trusted")
@click.option("--in", "in_path", default=None, help="input ciphertext / score bundle")
@click.option("--out", "out_path", default=None, help="output path")
@click.option("--row", type=int, default=0, help="validation row (trusted mode)")
def eval_cmd(config_path, sets, mode, in_path, out_path, row):
    """Evaluate the compiled forest homomorphically.

    server: input ciphertext -> encrypted per-class scores (no secret key);
    client: encrypted scores -> decrypted CSV; trusted: the whole loop
    locally for testing.
    """

    def body():
        config = _load_config(config_path, sets)
        out = _out(config)
        compiled = compiled_from_json(_read(os.path.join(out, "compiled.json")))

        if mode == "server":
            if not in_path:
                raise ConfigError("--mode server requires --in <ciphertext>")
            engine = _server_engine(config, compiled)
            with open(in_path, "rb") as fh:
                ct = ciphertext_from_bytes(fh.read(), engine.ckks_params)
            handle = CipherHandle(payload=ct, level=ct.level, scale=ct.scale,
                                  engine_id=engine.engine_id)
            trace = evaluate(engine, compiled, handle)
            path = out_path or os.path.join(out, "scores.ct")
            with open(path, "wb") as fh:
                fh.write(bundle_to_bytes([h.payload for h in trace.outputs],
                                         engine.ckks_params))
            click.echo(f"wrote {path} ({compiled.n_classes} encrypted class scores)")
            return

        if mode == "client":
            if not in_path:
                raise ConfigError("--mode client requires --in <score bundle>")
            engine = _client_engine(config, compiled)
            with open(in_path, "rb") as fh:
                cts = bundle_from_bytes(fh.read(), engine.ckks_params)
            scores = [engine.evaluator.decrypt_decode(ct)[0] for ct in cts]
            path = out_path or os.path.join(out, "scores.csv")
            with open(path, "w") as fh:
                fh.write("class,score\n")
                for c, s in enumerate(scores):
                    fh.write(f"{c},{s:.6f}\n")
            click.echo(f"wrote {path}")
            click.echo(f"predicted class: {int(np.argmax(scores))}")
            return

        # trusted: full loop in-process
        pre = Preprocessor.from_json(_read(os.path.join(out, "preprocessor.json")))
        _, _, val_t = _prepared_splits(config)
        data = pre.transform(val_t)
        engine = make_engine(
            _engine_params(config, compiled, "ckks"),
            rotation_steps=compiled.rotation_steps(), seed=config["engine"]["seed"],
        )
        handle = engine.encode_encrypt(pack_input(compiled.layout, data.features[row]))
        trace = evaluate(engine, compiled, handle)
        scores = [engine.decrypt_decode(h)[0] for h in trace.outputs]
        click.echo(f"scores: {['%.5f' % s for s in scores]}")
        click.echo(
            f"predicted {int(np.argmax(scores))}, true {int(data.labels[row])}"
        )

    _guard(body)


@main.command()
@_config_opt
@_set_opt
@click.option("--assert", "do_assert", is_flag=True,
              help="exit 3 when acceptance thresholds fail")
@click.option("--no-figures", is_flag=True, help="skip figure rendering")
def bench(config_path, sets, do_assert, no_figures):
    """Run the full pipeline and write the metrics report."""

    def body():
        config = _load_config(config_path, sets)
        report = run_pipeline(config, render_report=not no_figures)
        click.echo(report_mod.render_text(report))
        if do_assert:
            failures = check_thresholds(report, config)
            if failures:
                for f in failures:
                    click.echo(f"THRESHOLD FAIL: {f}", err=True)
                sys.exit(EXIT_THRESHOLD)
            click.echo("all acceptance thresholds met")

    _guard(body)


@main.command(name="report")
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", default=None, help="directory for figures + CSV")
def report_cmd(metrics_path, out_dir):
    """Render the text table, CSV and figures from a saved metrics.json."""

    def body():
        with open(metrics_path) as fh:
            report = json.load(fh)
        target = out_dir or os.path.dirname(metrics_path) or "."
        click.echo(report_mod.render_text(report))
        for path in report_mod.render_all(report, target):
            click.echo(f"wrote {path}")

    _guard(body)


if __name__ == "__main__":
    main()
