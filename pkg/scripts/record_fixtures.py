#!/usr/bin/env python3
"""Record live API responses as JSON fixtures for the console's contract
tests. Re-run after intentional API changes:

    python3 scripts/record_fixtures.py
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fastapi.testclient import TestClient

from pps import synth
from pps.config import ServiceConfig
from pps.service import create_app

TECH = {"Authorization": "Bearer tech-token"}
ANALYST = {"Authorization": "Bearer analyst-token"}
PM = {"Authorization": "Bearer pm-token"}

OUT = Path(__file__).resolve().parent.parent / "frontend" / "fixtures"


def record(client: TestClient) -> dict[str, object]:
    fixtures: dict[str, object] = {}

    def upload_and_process(scn, params=None):
        data, _ = synth.generate_run(scn)
        bid = client.post("/api/batches", content=data,
                          headers=TECH).json()["batch_id"]
        body = json.dumps({"params": params}) if params else None
        client.post(f"/api/batches/{bid}/process", content=body,
                    headers=ANALYST)
        assert client.get(f"/api/batches/{bid}/status",
                          headers=ANALYST).json()["phase"] == "done"
        return bid

    # clean batch, processed then approved
    bid_clean = upload_and_process(synth.scenario_source_3g(),
                                   {"material": "tacky_mat"})
    fixtures["batch_processed_clean"] = client.get(
        f"/api/batches/{bid_clean}", headers=ANALYST).json()
    fixtures["segment_detail_7"] = client.get(
        f"/api/batches/{bid_clean}/segments/7", headers=ANALYST).json()
    client.post(f"/api/batches/{bid_clean}/comments",
                content=json.dumps({"scope": "segment", "segment": 7,
                                    "text": "strongest deposit in the run"}),
                headers=ANALYST)
    client.post(f"/api/batches/{bid_clean}/lock", headers=ANALYST)
    fixtures["batch_locked"] = client.get(
        f"/api/batches/{bid_clean}", headers=ANALYST).json()
    client.post(f"/api/batches/{bid_clean}/approve", headers=PM)
    fixtures["batch_approved"] = client.get(
        f"/api/batches/{bid_clean}", headers=PM).json()

    # batch with open clearable flags (vial lump)
    bid_flags = upload_and_process(synth.scenario_vial_lump())
    fixtures["batch_open_flags"] = client.get(
        f"/api/batches/{bid_flags}", headers=ANALYST).json()

    # invalid batch (contamination)
    bid_invalid = upload_and_process(synth.scenario_contamination())
    fixtures["batch_invalid"] = client.get(
        f"/api/batches/{bid_invalid}", headers=ANALYST).json()

    fixtures["batches_list"] = client.get("/api/batches",
                                          headers=ANALYST).json()
    fixtures["qc_trend"] = client.get("/api/qc/trend",
                                      params={"robot": "RP001"},
                                      headers=ANALYST).json()

    # error bodies the console renders as banners
    fixtures["error_lock_open_flags"] = {
        "status": 409,
        "body": client.post(f"/api/batches/{bid_flags}/lock",
                            headers=ANALYST).json()}
    fixtures["error_approve_wrong_role"] = {
        "status": 403,
        "body": client.post(f"/api/batches/{bid_clean}/approve",
                            headers=ANALYST).json()}

    # small artifact samples for chart parsing tests
    summary = fixtures["batch_processed_clean"]
    fwd_id = summary["artifacts"]["mass_curve_fwd"]
    curve_text = client.get(f"/api/artifacts/{fwd_id}", headers=ANALYST).text
    fixtures["artifact_mass_curve_fwd"] = {
        "id": fwd_id, "text": "\n".join(curve_text.splitlines()[:200])}
    spec_id = summary["segment_artifacts"]["7"]["spectrum"]
    spec_text = client.get(f"/api/artifacts/{spec_id}", headers=ANALYST).text
    fixtures["artifact_spectrum_seg7"] = {"id": spec_id, "text": spec_text}
    return fixtures


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        app = create_app(ServiceConfig(archive_root=tmp), inline_jobs=True)
        with TestClient(app) as client:
            fixtures = record(client)
    for name, payload in fixtures.items():
        path = OUT / f"{name}.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        print(f"wrote {path.relative_to(OUT.parent.parent)}")


if __name__ == "__main__":
    main()
