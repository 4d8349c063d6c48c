"""Command-line interface: dataset generation, training, serving, scripted
session replay, and tree validation."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import demo, mlp
from .records import ObservationValue, PatientRecord, tests_from_json
from .service import ServiceConfig, ServiceState, create_app, train_pipeline
from .session import Concluded
from .synth import generate_dataset, make_test_registry, read_dataset, write_dataset
from .trees import TreeParseError, parse_tree, validate_tree


@click.group()
def main():
    """Contextual care protocol engine."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Generator config JSON (profiles, n_records, noise_sigma, seed, ...).")
@click.option("--preset", type=click.Choice(["demo"]), default=None,
              help="Use the built-in demo generator config.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n-records", type=int, default=None, help="Override the record count.")
@click.option("--seed", type=int, default=None, help="Override the RNG seed.")
def generate(config_path, preset, out_dir, n_records, seed):
    """Generate a labeled synthetic dataset (records.ndjson + labels.ndjson + tests.json)."""
    if (config_path is None) == (preset is None):
        raise click.UsageError("give exactly one of --config or --preset")
    if preset == "demo":
        config = demo.demo_generator_config()
    else:
        config = demo.generator_config_from_json(
            json.loads(Path(config_path).read_text(encoding="utf-8"))
        )
    if n_records is not None or seed is not None:
        from dataclasses import replace

        config = replace(
            config,
            n_records=n_records if n_records is not None else config.n_records,
            seed=seed if seed is not None else config.seed,
        )
    records, labels = generate_dataset(config)
    write_dataset(out_dir, records, labels, config.disease_ids, make_test_registry(config))
    click.echo(f"wrote {len(records)} records for {len(config.profiles)} diseases to {out_dir}")


@main.command()
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True), required=True,
              help="Directory produced by `generate`.")
@click.option("--data-dir", type=click.Path(), required=True,
              help="Service data directory receiving model.json/schema.json/tests.json.")
@click.option("--learning-rate", type=float, default=1.0, show_default=True)
@click.option("--epochs", type=int, default=400, show_default=True)
@click.option("--n-hidden", type=int, default=None, help="Defaults to the midpoint rule.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--l2", type=float, default=1e-4, show_default=True)
def train(dataset_dir, data_dir, learning_rate, epochs, n_hidden, seed, l2):
    """Train the disease classifier on a generated dataset."""
    records, labels, diseases = read_dataset(dataset_dir)
    state = ServiceState(ServiceConfig(data_dir=str(data_dir)))
    tests_path = Path(dataset_dir) / "tests.json"
    if tests_path.exists():
        merged = dict(state.tests)
        merged.update(tests_from_json(json.loads(tests_path.read_text(encoding="utf-8"))))
        state.save_tests(merged)
    overrides = {
        "learning_rate": learning_rate,
        "epochs": epochs,
        "seed": seed,
        "l2": l2,
        "n_hidden": n_hidden,
    }
    model, config, schema, loss = train_pipeline(records, labels, diseases, state.tests, overrides)
    state.save_model(model, config, schema)
    click.echo(
        f"trained {config.n_in}-{config.n_hidden}-{config.n_out} model "
        f"on {len(records)} records, final loss {loss:.4f}"
    )
    click.echo(f"model_ref {mlp.model_ref(model, config)}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
def serve(config_path, data_dir, host, port):
    """Run the HTTP service (env: CARELOOP_DATA_DIR, CARELOOP_LISTEN)."""
    import uvicorn

    config = ServiceConfig.load(config_path)
    if data_dir is not None:
        config.data_dir = data_dir
    if host is not None:
        config.host = host
    if port is not None:
        config.port = port
    app = create_app(ServiceState(config))
    uvicorn.run(app, host=config.host, port=config.port)


@main.group()
def session():
    """Session utilities."""


@session.command("run")
@click.option("--script", "script_path", type=click.Path(exists=True), required=True,
              help="JSON: {record, theta?, answers: {observation: value}}.")
@click.option("--data-dir", type=click.Path(exists=True), required=True)
def session_run(script_path, data_dir):
    """Replay a scripted session non-interactively and print the summary."""
    script = json.loads(Path(script_path).read_text(encoding="utf-8"))
    state = ServiceState(ServiceConfig(data_dir=str(data_dir)))
    engine = state.engine()
    record = PatientRecord.from_json(script["record"])
    answers = {
        name: ObservationValue.from_json(doc) for name, doc in script.get("answers", {}).items()
    }
    sess = engine.start_session(record, threshold=script.get("theta"))
    result = engine.step(sess)
    unanswered: list[str] = []
    while not isinstance(result, Concluded):
        chosen = None
        for rec in result:
            if rec.test.produces in answers and rec.test.produces not in sess.observation_cache:
                chosen = rec
                break
        if chosen is None:
            unanswered = [r.test.test_id for r in result]
            break
        engine.submit_observation(sess, chosen.test.produces, answers[chosen.test.produces])
        result = engine.step(sess)
    summary = engine.session_summary(sess)
    if unanswered:
        summary["unanswered_recommendations"] = unanswered
    click.echo(json.dumps(summary, indent=2))


@main.command("validate-tree")
@click.argument("tree_file", type=click.Path(exists=True))
@click.option("--tests", "tests_path", type=click.Path(exists=True), default=None,
              help="Test registry JSON; omit to skip registry checks.")
def validate_tree_cmd(tree_file, tests_path):
    """Parse and validate a tree document; nonzero exit on any problem."""
    try:
        tree = parse_tree(Path(tree_file).read_bytes())
    except TreeParseError as exc:
        click.echo(f"parse error: {exc}", err=True)
        sys.exit(2)
    registry = {}
    if tests_path is not None:
        registry = tests_from_json(json.loads(Path(tests_path).read_text(encoding="utf-8")))
    violations = validate_tree(tree, registry)
    if tests_path is None:
        violations = [v for v in violations if v.rule != "unknown test"]
    if violations:
        for v in violations:
            click.echo(f"violation at {v.node_id}: {v.rule}: {v.detail}", err=True)
        sys.exit(1)
    click.echo(f"ok: {tree.disease_id} ({len(tree.nodes)} nodes)")


if __name__ == "__main__":
    main()
