"""Command-line entry points: ingest bundles into a local archive, run
the analysis, render reports, serve the HTTP API, and generate synthetic
scenarios."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click

from . import ingest, pipeline, reporting, synth
from .config import ProcessingParameters, ServiceConfig
from .review import Archive, User

_CLI_ANALYST = User(id="cli-analyst", display_name="CLI Analyst",
                    role="analyst")
_CLI_TECH = User(id="cli-tech", display_name="CLI Technician",
                 role="technician")


def _store(archive: str) -> Archive:
    return Archive(archive)


@click.group()
def main() -> None:
    """Post-processing service for robotic in-pipe assay runs."""


@main.command("ingest")
@click.argument("bundle", type=click.Path(exists=True, dir_okay=False))
@click.option("--archive", default="./pps-archive", show_default=True,
              help="Archive root directory.")
def ingest_cmd(bundle: str, archive: str) -> None:
    """Upload a run bundle zip into the archive."""
    data = Path(bundle).read_bytes()
    try:
        parsed = ingest.unpack_run_bundle(data)
    except ingest.IngestError as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}")
    issues = ingest.validate_bundle(parsed)
    for issue in issues:
        click.echo(f"{issue.severity.upper()} {issue.code}: {issue.message}")
    if any(i.fatal for i in issues):
        raise click.ClickException("fatal ingest issues; bundle rejected")
    batch_id = str(ingest.make_batch_id(parsed.manifest.robot_id,
                                        parsed.manifest.start_time))
    store = _store(archive)
    store.ensure_user(_CLI_TECH)
    store.create_batch(
        batch_id, data,
        manifest={"robot_id": parsed.manifest.robot_id,
                  "fov_length_in": parsed.manifest.fov_length_in,
                  "pipe_diameter_in": parsed.manifest.pipe_diameter_in,
                  "channel_count": parsed.manifest.channel_count,
                  "energy_cal": asdict(parsed.manifest.energy_cal),
                  "qc_live_time_s": parsed.manifest.qc_live_time_s},
        request=asdict(parsed.request),
        issues=[asdict(i) for i in issues], user=_CLI_TECH,
        robot_id=parsed.manifest.robot_id,
        start_time_iso=parsed.manifest.start_time.isoformat())
    click.echo(batch_id)


@main.command("process")
@click.argument("batch_id")
@click.option("--archive", default="./pps-archive", show_default=True)
@click.option("--param", "params", multiple=True,
              help="Override a parameter, e.g. --param material=tacky_mat "
                   "or --param replicate.rpd_percent=20")
def process_cmd(batch_id: str, archive: str, params: tuple[str, ...]) -> None:
    """Run the automated analysis for an uploaded batch."""
    overrides = {}
    for p in params:
        key, _, value = p.partition("=")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    try:
        parameters = ProcessingParameters().apply_overrides(overrides)
    except KeyError as exc:
        raise click.ClickException(str(exc))
    store = _store(archive)
    store.ensure_user(_CLI_ANALYST)
    config = ServiceConfig(archive_root=archive)
    bundle = ingest.unpack_run_bundle(store.load_bundle(batch_id))
    processed = pipeline.process_bundle(bundle, parameters,
                                        config.calibration, config.offsets)
    rev = store.record_revision(batch_id, _CLI_ANALYST, parameters.to_json(),
                                processed.results, processed.segments,
                                processed.flags, processed.artifacts,
                                processed.trend)
    store.write_qc_trend_artifact(batch_id, rev, bundle.manifest.robot_id,
                                  _CLI_ANALYST.id)
    click.echo(f"revision {rev}: {processed.state}")
    for flag in processed.flags:
        where = "batch" if flag.scope == "batch" else f"seg {flag.segment}"
        click.echo(f"  flag {flag.code} [{where}] {flag.message}")


@main.command("report")
@click.argument("batch_id")
@click.option("--archive", default="./pps-archive", show_default=True)
@click.option("--draft/--final", default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
def report_cmd(batch_id: str, archive: str, draft: bool,
               output: str | None) -> None:
    """Render the NDA report for a batch."""
    store = _store(archive)
    view = store.batch_view(batch_id)
    trend = store.qc_trend(view["robot_id"], limit=30)
    try:
        doc = reporting.build_report(view, trend, draft=draft)
    except reporting.ReportingError as exc:
        raise click.ClickException(str(exc))
    payload = reporting.render_report(doc)
    out = Path(output) if output else Path(f"{batch_id}-report.html")
    out.write_bytes(payload)
    click.echo(str(out))


@main.command("serve")
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--archive", default="./pps-archive", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="ServiceConfig JSON file.")
def serve_cmd(port: int, host: str, archive: str,
              config_path: str | None) -> None:
    """Run the HTTP API server."""
    import uvicorn

    from .service import create_app
    if config_path:
        config = ServiceConfig.load(config_path)
    else:
        config = ServiceConfig(archive_root=archive)
    uvicorn.run(create_app(config), host=host, port=port)


@main.command("gen")
@click.argument("scenario")
@click.option("-o", "--out-dir", type=click.Path(file_okay=False),
              default=".", show_default=True)
@click.option("--seed", type=int, default=None,
              help="Override the scenario seed.")
def gen_cmd(scenario: str, out_dir: str, seed: int | None) -> None:
    """Generate a synthetic bundle (+ ground truth) from a scenario JSON
    file or a canned scenario name."""
    if Path(scenario).exists():
        scn = synth.Scenario.from_json(Path(scenario).read_text())
    elif scenario in synth.CANNED_SCENARIOS:
        scn = synth.CANNED_SCENARIOS[scenario]()
    else:
        names = ", ".join(sorted(synth.CANNED_SCENARIOS))
        raise click.ClickException(
            f"{scenario!r} is neither a file nor one of: {names}")
    if seed is not None:
        scn.seed = seed
    try:
        bundle, truth = synth.generate_run(scn)
    except synth.InvalidScenario as exc:
        raise click.ClickException(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle_path = out / f"{scn.name}.zip"
    truth_path = out / f"{scn.name}.truth.json"
    bundle_path.write_bytes(bundle)
    truth_path.write_text(truth.to_json())
    click.echo(f"{bundle_path}\n{truth_path}")


if __name__ == "__main__":
    sys.exit(main())
