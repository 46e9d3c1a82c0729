#!/usr/bin/env python3
"""End-to-end demonstration on synthetic runs.

Generates the canned scenarios, pushes each through ingest -> process ->
review -> report in a throwaway archive, and prints a summary table plus
where the artifacts landed.

    python3 scripts/run_demo.py [workdir]
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pps import ingest, pipeline, reporting, synth
from pps.config import ProcessingParameters
from pps.review import Archive, User

TECH = User(id="tech1", display_name="Demo Technician", role="technician")
ANALYST = User(id="ana1", display_name="Demo Analyst", role="analyst")
PM = User(id="pm1", display_name="Demo Program Manager",
          role="program_manager")


def main() -> None:
    workdir = Path(sys.argv[1] if len(sys.argv) > 1 else "./demo-archive")
    store = Archive(workdir)
    for user in (TECH, ANALYST, PM):
        store.ensure_user(user)

    scenarios = {
        "source-3g": (synth.scenario_source_3g(), "tacky_mat"),
        "empty-pipe": (synth.scenario_empty_pipe(), "uo2f2"),
        "vial-lump": (synth.scenario_vial_lump(), "uo2f2"),
        "contamination": (synth.scenario_contamination(), "uo2f2"),
        "vacuum-void": (synth.scenario_vacuum_void(), "uo2f2"),
    }
    print(f"archive: {workdir.resolve()}\n")
    for name, (scn, material) in scenarios.items():
        data, truth = synth.generate_run(scn)
        bundle = ingest.unpack_run_bundle(data)
        batch_id = str(ingest.make_batch_id(bundle.manifest.robot_id,
                                            bundle.manifest.start_time))
        try:
            store.create_batch(batch_id, data, {},
                               bundle.request.__dict__, [], TECH,
                               bundle.manifest.robot_id,
                               bundle.manifest.start_time.isoformat())
        except Exception as exc:
            print(f"{name}: skipped ({exc})")
            continue
        params = ProcessingParameters(material=material)
        processed = pipeline.process_bundle(bundle, params)
        store.record_revision(batch_id, ANALYST, params.to_json(),
                              processed.results, processed.segments,
                              processed.flags, processed.artifacts,
                              processed.trend)
        view = store.batch_view(batch_id)
        total = sum((s["data"].get("averaged") or {}).get("mass_g", 0.0)
                    for s in view["segments"])
        flags = ", ".join(sorted({f["code"] for f in view["flags"]})) or "none"
        print(f"{name:14s} {view['state']:9s} rev {view['revision']} "
              f"total {total:7.3f} g   flags: {flags}")
        if view["state"] == "PROCESSED" and not view["flags"]:
            store.transition(batch_id, "lock", ANALYST)
            store.transition(batch_id, "approve", PM)
            view = store.batch_view(batch_id)
            trend = store.qc_trend(view["robot_id"], limit=30)
            doc = reporting.build_report(view, trend, draft=False)
            out = workdir / f"{name}-final-report.html"
            out.write_bytes(reporting.render_report(doc))
            conda = workdir / f"{name}-conda.csv"
            conda.write_bytes(reporting.build_conda_export(view))
            print(f"{'':14s} approved; final report -> {out.name}, "
                  f"export -> {conda.name}")
        # each scenario uses a distinct start time only via robot id; shift
        # the next batch by reusing ids is prevented upstream
    store.close()


if __name__ == "__main__":
    main()
