"""Bundle parsing, packing, batch identity, and validation checks."""

from __future__ import annotations

import io
import zipfile
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pps.ingest import (DecreasingAccumulation, EmptyRobotId,
                        EnergyCal, MalformedRow, Manifest, MeasurementRequest,
                        MissingStream, NonMonotonicTime, QcSpectrumRecord,
                        RunBundle, SpectraStream, make_batch_id,
                        pack_run_bundle, unpack_run_bundle, validate_bundle)

T0 = datetime(2018, 7, 10, 14, 3, 22, tzinfo=timezone.utc)


def tiny_bundle(channels: int = 4, with_qc: bool = True,
                with_images: bool = True) -> RunBundle:
    t0 = T0.timestamp()
    manifest = Manifest(robot_id="RP001", fov_length_in=12.0,
                        pipe_diameter_in=30.0, start_time=T0,
                        channel_count=channels,
                        energy_cal=EnergyCal(a_kev=0.0, b_kev_per_ch=0.5),
                        qc_live_time_s=10.0)
    request = MeasurementRequest(job_id="J1", building="B", unit="U",
                                 cell="C", pipe_item_id="P",
                                 expected_length_ft=2.0)
    counts = np.array([[0] * channels, [1, 2, 0, 3][:channels]],
                      dtype=np.int64)
    qc = QcSpectrumRecord(t=t0 - 60, live_time=10.0,
                          counts=np.array([5, 6, 7, 8][:channels],
                                          dtype=np.int64))
    qc2 = QcSpectrumRecord(t=t0 + 90, live_time=10.0,
                           counts=np.array([5, 5, 7, 9][:channels],
                                           dtype=np.int64))
    return RunBundle(
        manifest=manifest, request=request,
        odometry_t=np.array([t0, t0 + 0.1]),
        odometry_dx=np.array([0.0, 0.2]),
        odometry_sigma=np.array([1e-4, 0.02]),
        spectra=SpectraStream(t=np.array([t0, t0 + 0.1]),
                              live_time=np.array([0.0, 0.098]),
                              counts=counts),
        qc_pre=qc if with_qc else None,
        qc_post=qc2 if with_qc else None,
        lidar_t=np.array([t0, t0]), lidar_theta=np.array([0.0, 1.0]),
        lidar_r=np.array([38.0, 38.1]),
        images=[(t0 + 0.05, "0001.png")] if with_images else [],
        image_data={"0001.png": b"\x89PNG fake"} if with_images else {},
    )


def test_minimal_bundle_round_trips():
    bundle = tiny_bundle()
    packed = pack_run_bundle(bundle)
    parsed = unpack_run_bundle(packed)
    assert len(parsed.odometry_t) == 2
    assert len(parsed.spectra.t) == 2
    assert parsed.manifest.robot_id == "RP001"
    assert parsed.manifest.channel_count == 4
    np.testing.assert_array_equal(parsed.spectra.counts,
                                  bundle.spectra.counts)
    np.testing.assert_allclose(parsed.odometry_dx, bundle.odometry_dx)
    assert parsed.images == [(pytest.approx(bundle.images[0][0]), "0001.png")]


def test_unpack_pack_identity_field_level():
    bundle = tiny_bundle()
    once = unpack_run_bundle(pack_run_bundle(bundle))
    twice = unpack_run_bundle(pack_run_bundle(once))
    np.testing.assert_array_equal(once.spectra.counts, twice.spectra.counts)
    np.testing.assert_array_equal(once.odometry_t, twice.odometry_t)
    np.testing.assert_array_equal(once.odometry_dx, twice.odometry_dx)
    np.testing.assert_array_equal(once.lidar_r, twice.lidar_r)
    assert once.manifest == twice.manifest
    assert once.request == twice.request
    assert pack_run_bundle(once) == pack_run_bundle(twice)


def test_pack_is_deterministic():
    a = pack_run_bundle(tiny_bundle())
    b = pack_run_bundle(tiny_bundle())
    assert a == b


def test_decreasing_accumulation_rejected():
    bundle = tiny_bundle()
    bundle.spectra.counts = np.array([[7, 15, 3, 0], [7, 14, 3, 0]],
                                     dtype=np.int64)
    with pytest.raises(DecreasingAccumulation) as err:
        unpack_run_bundle(pack_run_bundle(bundle))
    assert err.value.channel == 1


def test_synthetic_bundle_parses_clean(source3g_run):
    data, _ = source3g_run
    bundle = unpack_run_bundle(data)
    assert validate_bundle(bundle) == []
    assert bundle.spectra.counts.shape[1] == bundle.manifest.channel_count


def test_missing_required_stream():
    packed = pack_run_bundle(tiny_bundle())
    zin = zipfile.ZipFile(io.BytesIO(packed))
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as zout:
        for name in zin.namelist():
            if name != "spectra.csv":
                zout.writestr(name, zin.read(name))
    with pytest.raises(MissingStream) as err:
        unpack_run_bundle(out.getvalue())
    assert err.value.stream == "spectra.csv"


def _replace_member(packed: bytes, name: str, payload: str) -> bytes:
    zin = zipfile.ZipFile(io.BytesIO(packed))
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as zout:
        for member in zin.namelist():
            data = payload.encode() if member == name else zin.read(member)
            zout.writestr(member, data)
    return out.getvalue()


def test_malformed_row_reports_line_and_column():
    packed = pack_run_bundle(tiny_bundle())
    bad = _replace_member(packed, "odometry.csv",
                          "t,dx,sigma\n0.0,0.0,0.0001\n0.1,oops,0.02\n")
    with pytest.raises(MalformedRow) as err:
        unpack_run_bundle(bad)
    assert err.value.stream == "odometry.csv"
    assert err.value.line == 3
    assert err.value.column == 2


def test_non_monotonic_time_rejected():
    packed = pack_run_bundle(tiny_bundle())
    bad = _replace_member(packed, "odometry.csv",
                          "t,dx,sigma\n5.0,0.0,0.01\n5.0,0.1,0.01\n")
    with pytest.raises(NonMonotonicTime):
        unpack_run_bundle(bad)


def test_make_batch_id_format():
    assert str(make_batch_id("RP001", T0)) == "RP001-20180710T140322Z"


def test_make_batch_id_deterministic_and_unique_by_second():
    a = make_batch_id("RP001", T0)
    b = make_batch_id("RP001", T0)
    c = make_batch_id("RP001", T0 + timedelta(seconds=1))
    assert str(a) == str(b)
    assert str(a) != str(c)


def test_make_batch_id_empty_robot():
    with pytest.raises(EmptyRobotId):
        make_batch_id("", T0)


@settings(max_examples=200, deadline=None)
@given(robot=st.sampled_from(["RP001", "RP002", "R9"]),
       seconds=st.integers(min_value=0, max_value=10_000_000))
def test_batch_id_injective(robot, seconds):
    t = T0 + timedelta(seconds=seconds)
    rendered = str(make_batch_id(robot, t))
    back_robot, _, stamp = rendered.rpartition("-")
    assert back_robot == robot
    assert stamp == f"{t:%Y%m%dT%H%M%S}Z"


def test_validate_missing_post_qc_is_fatal():
    bundle = tiny_bundle(with_qc=True)
    bundle.qc_post = None
    issues = validate_bundle(bundle)
    codes = {(i.code, i.severity) for i in issues}
    assert ("MISSING_POST_QC", "fatal") in codes


def test_validate_image_time_range_warning():
    bundle = tiny_bundle()
    bundle.images = [(T0.timestamp() + 9999.0, "0001.png")]
    issues = validate_bundle(bundle)
    assert any(i.code == "IMAGE_TIME_RANGE" and i.severity == "warning"
               for i in issues)


def test_validate_clean_synthetic(empty_pipe_run):
    data, _ = empty_pipe_run
    bundle = unpack_run_bundle(data)
    fatal = [i for i in validate_bundle(bundle) if i.fatal]
    assert fatal == []
