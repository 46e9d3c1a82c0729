#!/usr/bin/env python3
"""Regenerate the frozen golden draft report for the 3 g scenario.

Run from the repository root after any intentional change to the report
content or the analysis chain, then review the diff:

    python3 scripts/make_golden.py
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pps import ingest, pipeline, reporting, synth
from pps.config import ProcessingParameters
from pps.review import Archive, User

ANALYST = User(id="ana1", display_name="Test Analyst", role="analyst")
TECH = User(id="tech1", display_name="Test Technician", role="technician")


def build_draft_report_bytes() -> bytes:
    data, _ = synth.generate_run(synth.scenario_source_3g())
    bundle = ingest.unpack_run_bundle(data)
    params = ProcessingParameters(material="tacky_mat")
    processed = pipeline.process_bundle(bundle, params)
    with tempfile.TemporaryDirectory() as tmp:
        store = Archive(tmp)
        store.ensure_user(TECH)
        store.ensure_user(ANALYST)
        batch_id = str(ingest.make_batch_id(bundle.manifest.robot_id,
                                            bundle.manifest.start_time))
        store.create_batch(batch_id, data, {}, bundle.request.__dict__, [],
                           TECH, bundle.manifest.robot_id,
                           bundle.manifest.start_time.isoformat())
        store.record_revision(batch_id, ANALYST, params.to_json(),
                              processed.results, processed.segments,
                              processed.flags, processed.artifacts,
                              processed.trend)
        view = store.batch_view(batch_id)
        trend = store.qc_trend(view["robot_id"], limit=30)
        doc = reporting.build_report(view, trend, draft=True)
        payload = reporting.render_report(doc)
        store.close()
    return payload


if __name__ == "__main__":
    out = Path(__file__).resolve().parent.parent / "tests" / "data" / \
        "source3g_report_draft.html"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(build_draft_report_bytes())
    print(f"wrote {out} ({out.stat().st_size} bytes)")
