"""Shared fixtures: canned synthetic runs (generated once per session) and
archive/service helpers."""

from __future__ import annotations

import pytest

from pps import synth
from pps.config import ServiceConfig
from pps.review import Archive, User


@pytest.fixture(scope="session")
def source3g_run():
    return synth.generate_run(synth.scenario_source_3g())


@pytest.fixture(scope="session")
def empty_pipe_run():
    return synth.generate_run(synth.scenario_empty_pipe())


@pytest.fixture(scope="session")
def contamination_run():
    return synth.generate_run(synth.scenario_contamination())


@pytest.fixture(scope="session")
def vial_lump_run():
    return synth.generate_run(synth.scenario_vial_lump())


@pytest.fixture(scope="session")
def vacuum_void_run():
    return synth.generate_run(synth.scenario_vacuum_void())


@pytest.fixture(scope="session")
def surface_blocks_run():
    return synth.generate_run(synth.scenario_surface_blocks())


TECH = User(id="tech1", display_name="Test Technician", role="technician")
ANALYST = User(id="ana1", display_name="Test Analyst", role="analyst")
PM = User(id="pm1", display_name="Test Program Manager",
          role="program_manager")


@pytest.fixture()
def store(tmp_path):
    archive = Archive(tmp_path / "archive-root")
    for user in (TECH, ANALYST, PM):
        archive.ensure_user(user)
    yield archive
    archive.close()


@pytest.fixture()
def client(tmp_path):
    from fastapi.testclient import TestClient

    from pps.service import create_app

    app = create_app(ServiceConfig(archive_root=str(tmp_path / "svc-root")),
                     inline_jobs=True)
    with TestClient(app) as c:
        yield c


AUTH_TECH = {"Authorization": "Bearer tech-token"}
AUTH_ANALYST = {"Authorization": "Bearer analyst-token"}
AUTH_PM = {"Authorization": "Bearer pm-token"}
