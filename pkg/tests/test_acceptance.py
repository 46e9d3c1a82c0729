"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with `pytest -s tests/test_acceptance.py` to see them).
Every tolerance is pinned here, not calibrated elsewhere."""

from __future__ import annotations

import io
import csv
import json
import math
import time

import numpy as np
import pytest

from pps import geometry, ingest, localize, pipeline, qc, radiometrics, synth
from pps.config import (AM241_ROI, GeometryConfig, ProcessingParameters,
                        ReplicateThresholds, RoiDefinition, SensorOffsets)
from pps.qc import replicate_check
from pps.review import (APPROVED, FLAG_CLEARED, FLAG_OPEN, INVALID, LOCKED,
                        PROCESSED, FlagRec, InvalidatedBatch,
                        InvalidatingFlag, OpenFlags, SegRec, WorkflowError,
                        WorkflowSnapshot, apply_approve, apply_clear_flag,
                        apply_invalidate, apply_lock, apply_process_complete,
                        apply_reject_segment, apply_return,
                        evaluate_replicate, flag_severity)
from tests.conftest import (ANALYST, AUTH_ANALYST, AUTH_PM, AUTH_TECH, PM,
                            TECH)


def report_line(name: str, ok: bool, detail: str = "") -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" +
          (f" - {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


# 1 ---------------------------------------------------------------------------

def test_acceptance_segmentation_rules():
    """Division rules hold for every length/FOV combination."""
    start = time.monotonic()
    checked = 0
    for fov in range(12, 37):
        lengths = list(np.arange(float(fov), 1200.0, 1.0)) + \
            [fov + 0.5, fov + 2.9, fov + 3.0, 1199.99]
        for L in lengths:
            plan = localize.divide_segments(float(L), float(fov))
            segs = plan.segments
            assert abs(sum(s.length_in for s in segs) - L) < 1e-6
            assert segs[-1].kind == "fov"
            assert abs(segs[-1].length_in - fov) < 1e-9
            assert [s.number for s in segs] == list(range(1, len(segs) + 1))
            assert segs[0].start_in == 0.0
            for s in segs[:-1]:
                if plan.notes and s is segs[0]:
                    assert s.length_in < 3.0
                    continue
                assert (abs(s.length_in - 12.0) < 1e-9 or
                        3.0 - 1e-9 <= s.length_in < 15.0), \
                    (L, fov, s.length_in)
            checked += 1
    elapsed = time.monotonic() - start
    report_line("segmentation-rules", elapsed < 5.0,
                f"{checked} plans in {elapsed:.2f}s")


# 2 ---------------------------------------------------------------------------

def _curve_from_csv(text: str):
    rows = list(csv.DictReader(io.StringIO(text)))
    pos = np.array([float(r["position_in"]) for r in rows])
    dens = np.array([float(r["g_per_ft"]) for r in rows])
    return pos, dens


def test_acceptance_3g_source_pipeline(client, source3g_run):
    """3 g source at 6-7 ft is recovered in its segment within 15%."""
    data, truth = source3g_run
    start = time.monotonic()
    bid = client.post("/api/batches", content=data,
                      headers=AUTH_TECH).json()["batch_id"]
    r = client.post(f"/api/batches/{bid}/process", headers=AUTH_ANALYST)
    assert r.status_code == 200
    status = client.get(f"/api/batches/{bid}/status",
                        headers=AUTH_ANALYST).json()
    elapsed = time.monotonic() - start
    assert status["phase"] == "done", status
    summary = client.get(f"/api/batches/{bid}", headers=AUTH_ANALYST).json()
    assert summary["state"] == PROCESSED

    seg7 = [s for s in summary["segments"] if s["number"] == 7][0]
    assert (seg7["start_in"], seg7["end_in"]) == (72.0, 84.0)
    mass = float(seg7["reported"]["mass_g"])
    ok_mass = abs(mass - 3.0) <= 0.45
    assert summary["replicate"]["passed"] is True
    assert summary["replicate"]["total"]["passed"] is True
    assert summary["replicate"]["max"]["passed"] is True

    # forward and reverse mass curves overlay
    fwd_id = summary["artifacts"]["mass_curve_fwd"]
    rev_id = summary["artifacts"]["mass_curve_rev"]
    fwd = client.get(f"/api/artifacts/{fwd_id}", headers=AUTH_ANALYST).text
    rev = client.get(f"/api/artifacts/{rev_id}", headers=AUTH_ANALYST).text
    fpos, fdens = _curve_from_csv(fwd)
    rpos, rdens = _curve_from_csv(rev)
    zone = (fpos > 66.0) & (fpos < 90.0)
    rdens_on_f = np.interp(fpos[zone], rpos[::-1], rdens[::-1])
    rms = float(np.sqrt(np.mean((fdens[zone] - rdens_on_f) ** 2)))
    peak_f = fpos[np.argmax(fdens)]
    peak_r = rpos[np.argmax(rdens)]
    overlay_ok = rms < 0.3 and abs(peak_f - peak_r) < 2.0

    report_line("3g-source-pipeline",
                ok_mass and overlay_ok and elapsed < 60.0,
                f"segment 7 = {mass:.3f} g, curve RMS diff {rms:.3f} g/ft, "
                f"pipeline {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------

def _seg_pair(number, mf, mr, sf, sr):
    return SegRec(number=number, mass_fwd_g=mf, sigma_fwd_g=sf,
                  mass_rev_g=mr, sigma_rev_g=sr)


def test_acceptance_replicate_thresholds(store):
    """Replicate pass/fail decisions are exact; failure invalidates."""
    th = ReplicateThresholds()

    def one(mass_f, mass_r, sigma):
        fwd = [radiometrics.SegmentResult(1, "forward", mass_f, mass_f, sigma,
                                          0, 0, 1, False, 0)]
        rev = [radiometrics.SegmentResult(1, "reverse", mass_r, mass_r, sigma,
                                          0, 0, 1, False, 0)]
        return replicate_check(fwd, rev, th)

    t1, m1 = one(10.0, 12.0, 0.1)
    assert t1.rpd_percent == abs(10.0 - 12.0) / ((10.0 + 12.0) / 2) * 100
    assert t1.rpd_percent <= 25.0 and t1.passed and m1.passed

    t2, _ = one(10.0, 14.0, 1.5)
    assert t2.rpd_percent > 25.0
    assert t2.two_sigma_bound_g == 2.0 * math.sqrt(1.5 ** 2 + 1.5 ** 2)
    assert abs(10.0 - 14.0) <= t2.two_sigma_bound_g and t2.passed

    t3, m3 = one(10.0, 14.0, 0.5)
    assert not t3.passed and not m3.passed

    # failing replicate invalidates the batch through the archive wiring
    store.create_batch("B-REP", b"z", {}, {}, [], TECH, "R", "2018-01-01")
    segs = [{"number": 1, "start_in": 0.0, "end_in": 12.0,
             "kind": "standard", "mass_fwd": 10.0, "sigma_fwd": 0.5,
             "mass_rev": 14.0, "sigma_rev": 0.5, "data": {}}]
    passed, results = evaluate_replicate(
        tuple(_seg_pair(1, 10.0, 14.0, 0.5, 0.5) for _ in range(1)), th)
    assert passed is False
    flags = [FlagRec(id=("REPLICATE_TOTAL" if r.kind == "total"
                         else "REPLICATE_MAX"), scope="batch", segment=None,
                     code=("REPLICATE_TOTAL" if r.kind == "total"
                           else "REPLICATE_MAX"),
                     severity="invalidating", status=FLAG_OPEN)
             for r in results if not r.passed]
    store.record_revision("B-REP", ANALYST, "{}",
                          {"replicate": {"passed": False}}, segs, flags,
                          [], [])
    ok = store.batch_state("B-REP") == INVALID
    report_line("replicate-thresholds", ok,
                "exact decisions + INVALID on failure")


# 4 ---------------------------------------------------------------------------

def test_acceptance_surface_fidelity(surface_blocks_run):
    """>= 95% of occupied heatmap cells within 1 cm of ground truth at
    3 mm range noise; Delaunay verified brute force on <= 500 vertices."""
    from tests.test_geometry import brute_force_delaunay_check

    data, truth = surface_blocks_run
    scn = synth.scenario_surface_blocks()
    assert scn.lidar.range_noise_cm == pytest.approx(0.3)
    bundle = ingest.unpack_run_bundle(data)
    traj = localize.estimate_trajectory(bundle.odometry_t, bundle.odometry_dx,
                                        bundle.odometry_sigma)
    radial = SensorOffsets.lidar_radial(bundle.manifest.pipe_diameter_in)
    z, th, r = geometry.scan_points_recentered(
        bundle.lidar_t, bundle.lidar_theta, bundle.lidar_r, traj, 0.0, radial)

    fractions = []
    for seg_bounds in ((0.0, 12.0), (12.0, 24.0)):
        hm = geometry.build_heatmap(z, th, r, 1, *seg_bounds,
                                    truth.nominal_radius_cm)
        zz, tt = np.meshgrid(hm.z_centers_cm, hm.theta_centers_rad)
        expected = synth.true_wall_radius(scn, zz, tt)
        err = np.abs(hm.radius_cm - expected)[hm.occupied]
        fractions.append(float(np.mean(err < 1.0)))

    coarse = GeometryConfig(cell_z_cm=2.5, cell_theta_deg=12.0)
    hm_coarse = geometry.build_heatmap(z, th, r, 1, 0.0, 12.0,
                                       truth.nominal_radius_cm, coarse)
    mesh = geometry.triangulate_surface(hm_coarse)
    assert len(mesh.vertices) <= 500
    brute_force_delaunay_check(mesh)
    worst = min(fractions)
    report_line("surface-fidelity", worst >= 0.95,
                f"within-1cm fractions {fractions}, "
                f"mesh {len(mesh.vertices)} vertices Delaunay-verified")


# 5 ---------------------------------------------------------------------------

def test_acceptance_recentering_equivalence():
    rng = np.random.default_rng(2718)
    n = 100_000
    theta = rng.uniform(-math.pi, math.pi, n)
    r = rng.uniform(15.0, 120.0, n)
    r0 = rng.uniform(0.0, 10.0, n)
    theta0 = rng.uniform(-math.pi, math.pi, n)
    x = r * np.cos(theta) + r0 * np.cos(theta0)
    y = r * np.sin(theta) + r0 * np.sin(theta0)
    r_cart = np.hypot(x, y)
    r_ref = geometry.radial_recenter_reference(theta, r, r0, theta0)
    rel = np.abs(r_cart - r_ref) / r_ref
    report_line("recentering-equivalence", float(rel.max()) < 1e-12,
                f"max relative difference {rel.max():.2e} over {n} samples")


# 6 ---------------------------------------------------------------------------

def test_acceptance_spectrum_conservation(source3g_run, empty_pipe_run,
                                          contamination_run):
    """Channelwise sums of incremental windows telescope exactly to the
    accumulated difference on every synthetic run."""
    for data, _ in (source3g_run, empty_pipe_run, contamination_run):
        bundle = ingest.unpack_run_bundle(data)
        traj = localize.estimate_trajectory(
            bundle.odometry_t, bundle.odometry_dx, bundle.odometry_sigma)
        for phase in ("forward", "reverse"):
            t_phase, x_phase = localize.phase_times_positions(traj, phase,
                                                              0.0)
            increasing = phase == "forward"
            env_t, env_x = localize.monotone_envelope(t_phase, x_phase,
                                                      increasing)
            polls = np.nonzero((bundle.spectra.t >= env_t[0]) &
                               (bundle.spectra.t <= env_t[-1]))[0]
            pos = np.interp(bundle.spectra.t[polls], env_t, env_x)
            # partition the phase at arbitrary positions via the shared
            # bracket function; adjacent windows share their boundary poll
            qs = np.linspace(env_x[0], env_x[-1], 23)
            idx = localize.bracket_indices(pos, qs, increasing)
            total = np.zeros(bundle.manifest.channel_count, dtype=np.int64)
            for a, b in zip(idx[:-1], idx[1:]):
                ga, gb = polls[min(a, b)], polls[max(a, b)]
                total += bundle.spectra.counts[gb] - bundle.spectra.counts[ga]
            first, last = polls[idx[0]], polls[idx[-1]]
            expect = bundle.spectra.counts[last] - bundle.spectra.counts[first]
            np.testing.assert_array_equal(total, expect)
    report_line("spectrum-conservation", True,
                "exact channelwise telescoping on 3 runs x 2 phases")


# 7 ---------------------------------------------------------------------------

def test_acceptance_qc_suite(client, contamination_run):
    from tests.test_qc import BOUNDS, gaussian_spectrum

    nominal = gaussian_spectrum(60.0, 2.1, 10000, background=2.0, live=60.0)
    res = qc.qc_check(nominal, BOUNDS, AM241_ROI, qc.CONTEXT_PRE)
    assert res.overall_pass

    shifted = gaussian_spectrum(65.0, 2.1, 10000, background=2.0, live=60.0)
    res2 = qc.qc_check(shifted, BOUNDS, RoiDefinition(center_kev=65.0),
                       qc.CONTEXT_PRE)
    assert not res2.overall_pass
    assert not res2.centroid_pass and res2.fwhm_pass and res2.efficiency_pass

    # segment context never fails on efficiency above the maximum
    for mult in (1.0, 2.0, 5.0, 10.0, 100.0):
        hot = gaussian_spectrum(60.0, 2.1,
                                BOUNDS.efficiency_cps[1] * mult * 60.0,
                                live=60.0)
        seg_res = qc.qc_check(hot, BOUNDS, AM241_ROI, qc.CONTEXT_SEGMENT_FWD)
        assert seg_res.efficiency_pass, mult

    # contamination scenario invalidates the batch end to end
    data, _ = contamination_run
    bid = client.post("/api/batches", content=data,
                      headers=AUTH_TECH).json()["batch_id"]
    client.post(f"/api/batches/{bid}/process", headers=AUTH_ANALYST)
    summary = client.get(f"/api/batches/{bid}", headers=AUTH_ANALYST).json()
    assert summary["state"] == INVALID
    codes = {f["code"] for f in summary["flags"]}
    assert "CONTAMINATION" in codes
    report_line("qc-suite", True,
                "bounds, waiver, and contamination invalidation")


# 8 ---------------------------------------------------------------------------

def test_acceptance_trajectory_optimizer():
    from tests.test_localize import brute_force_solution, chain
    from pps.config import TrajectorySolverConfig

    cfg = TrajectorySolverConfig()
    # noise-free chain reproduces the displacement integral exactly
    t, dx, sig = chain(np.full(200, 0.1), 150, np.full(200, -0.1))
    traj = localize.estimate_trajectory(t, dx, sig, cfg)
    exact = np.max(np.abs(traj.x - np.cumsum(dx)))
    assert exact < 1e-10

    # gradient vanishes on random noisy instances
    rng = np.random.default_rng(99)
    worst_grad = 0.0
    for _ in range(5):
        n = int(rng.integers(100, 400))
        fwd = rng.uniform(0.05, 0.2, n)
        rev = -fwd[::-1]
        t, dx, sig = chain(fwd, 120, rev)
        noise = rng.normal(0, 0.02, len(dx))
        noise[np.abs(dx) < 1e-12] = 0.0
        dx = dx + noise
        traj = localize.estimate_trajectory(t, dx, sig, cfg)
        g = localize.objective_gradient(traj, dx, sig, cfg)
        worst_grad = max(worst_grad, float(np.linalg.norm(g)))
    assert worst_grad < 1e-8

    # brute-force dense least squares agrees on short chains (<= 50 samples)
    worst_dx = 0.0
    for trial in range(10):
        n_fwd = int(rng.integers(5, 16))
        fwd = rng.uniform(0.5, 2.0, n_fwd)
        rev = -rng.uniform(0.5, 2.0, n_fwd)
        dx = np.concatenate([[0.0], fwd, np.zeros(12), rev])
        assert len(dx) <= 50
        t = np.arange(len(dx)) * 1.0  # 12 s dwell at 1 Hz
        sig = np.full(len(dx), 0.3)
        traj = localize.estimate_trajectory(t, dx, sig, cfg)
        x_ref, sig_ref = brute_force_solution(t, dx, sig, cfg)
        worst_dx = max(worst_dx,
                       float(np.max(np.abs(traj.x - x_ref))),
                       float(np.max(np.abs(traj.sigma - sig_ref))))
    report_line("trajectory-optimizer", worst_dx < 1e-9,
                f"noise-free exact, |grad| {worst_grad:.1e}, "
                f"brute-force delta {worst_dx:.1e}")


# 9 ---------------------------------------------------------------------------

def _model_flag(code, segment=None, status=FLAG_OPEN):
    scope = "segment" if segment else "batch"
    fid = code if segment is None else f"{code}.s{segment}"
    return FlagRec(id=fid, scope=scope, segment=segment, code=code,
                   severity=flag_severity(code), status=status)


def test_acceptance_workflow_safety(store, source3g_run, client):
    """Exhaustive reachable-state exploration (depth 6, all roles):
    LOCKED needs a clean ledger, APPROVED is immutable, invalidating flags
    are uncleanable, rejected segments vanish from replicate totals and
    render as REJECTED."""
    th = ReplicateThresholds()
    segs = (_seg_pair(1, 10.0, 10.5, 1.0, 1.0),
            _seg_pair(2, 2.0, 2.1, 0.3, 0.3))
    payloads = {
        "clean": ((), segs, True),
        "flagged": ((_model_flag("PRE_QC_FAIL"),
                     _model_flag("SEG_QC_FWD", segment=2)), segs, True),
        "contaminated": ((_model_flag("CONTAMINATION"),), segs, True),
    }
    users = (ANALYST, PM, TECH)

    def actions(snap):
        for user in users:
            for name, (fl, sg, rep) in payloads.items():
                yield (f"process-{name}-{user.role}",
                       lambda u=user, f=fl, s=sg, r=rep:
                       apply_process_complete(snap, u, f, s, r))
            yield (f"lock-{user.role}", lambda u=user: apply_lock(snap, u))
            yield (f"approve-{user.role}",
                   lambda u=user: apply_approve(snap, u, 1.0))
            yield (f"return-{user.role}", lambda u=user: apply_return(snap, u))
            yield (f"invalidate-{user.role}",
                   lambda u=user: apply_invalidate(snap, u))
        open_flags = [f for f in snap.flags if f.status == FLAG_OPEN]
        if open_flags:
            fid = open_flags[0].id
            yield ("clear-ok", lambda: apply_clear_flag(
                snap, fid, "justified", ANALYST, 2.0))
            yield ("clear-empty", lambda: apply_clear_flag(
                snap, fid, "", ANALYST, 2.0))
            yield ("clear-pm", lambda: apply_clear_flag(
                snap, fid, "justified", PM, 2.0))
        for s in snap.segments:
            if not s.rejected:
                yield (f"reject-{s.number}", lambda n=s.number:
                       apply_reject_segment(snap, n, "joint", ANALYST, 3.0,
                                            th))
                break

    def check_invariants(snap: WorkflowSnapshot):
        if snap.state == LOCKED:
            assert not snap.open_flags(), "LOCKED with open flags"
            assert not snap.has_invalidating()
            assert snap.replicate_passed is True
            assert any(not s.rejected for s in snap.segments)
        for f in snap.flags:
            if f.status == FLAG_CLEARED:
                assert f.clear_comment and f.cleared_by and f.cleared_at
            if f.severity == "invalidating":
                assert f.status == FLAG_OPEN, "cleared invalidating flag"
        if snap.state == APPROVED:
            assert snap.approved_by is not None
        # rejected segments are excluded from replicate totals
        passed, results = evaluate_replicate(snap.segments, th)
        for r in results:
            if r.kind == "total":
                expect = sum(s.mass_fwd_g for s in snap.segments
                             if not s.rejected)
                assert r.forward_g == pytest.approx(expect)

    initial = WorkflowSnapshot()
    frontier = {initial}
    visited = {initial}
    transitions = 0
    errors_seen = set()
    for _ply in range(6):
        next_frontier = set()
        for snap in frontier:
            check_invariants(snap)
            for name, fn in actions(snap):
                try:
                    result = fn()
                except WorkflowError as exc:
                    errors_seen.add(type(exc).__name__)
                    continue
                transitions += 1
                check_invariants(result)
                if snap.state == APPROVED:
                    raise AssertionError(
                        f"mutation {name} succeeded on APPROVED")
                if result not in visited:
                    visited.add(result)
                    next_frontier.add(result)
        frontier = next_frontier
        if not frontier:
            break
    assert {"ForbiddenRole", "InvalidTransition",
            "OpenFlags"} <= errors_seen
    assert any(s.state == APPROVED for s in visited)
    assert any(s.state == INVALID for s in visited)
    assert any(s.state == LOCKED for s in visited)

    # invalidating flags can never be cleared, probed directly
    contaminated = apply_process_complete(
        WorkflowSnapshot(), ANALYST, (_model_flag("CONTAMINATION"),), segs,
        True)
    with pytest.raises((InvalidatingFlag, InvalidatedBatch)):
        apply_clear_flag(contaminated, "CONTAMINATION", "please", ANALYST,
                         1.0)

    # rejected segments render REJECTED in the report and leave the totals
    data, _ = source3g_run
    bid = client.post("/api/batches", content=data,
                      headers=AUTH_TECH).json()["batch_id"]
    client.post(f"/api/batches/{bid}/process", headers=AUTH_ANALYST)
    before = client.get(f"/api/batches/{bid}",
                        headers=AUTH_ANALYST).json()
    total_before = before["replicate"]["total"]["forward_g"]
    client.post(f"/api/batches/{bid}/segments/7/reject",
                content=json.dumps({"reason": "expansion joint"}),
                headers=AUTH_ANALYST)
    after = client.get(f"/api/batches/{bid}", headers=AUTH_ANALYST).json()
    total_after = after["replicate"]["total"]["forward_g"]
    seg7_fwd = [s for s in before["segments"] if s["number"] == 7][0]
    assert total_before - total_after == pytest.approx(
        float(seg7_fwd["forward"]["mass_g"]), abs=0.02)
    report = client.get(f"/api/batches/{bid}/report?draft=true",
                        headers=AUTH_ANALYST)
    assert report.text.count("REJECTED") >= 2
    report_line("workflow-safety", True,
                f"{len(visited)} states, {transitions} transitions explored")


# 10 --------------------------------------------------------------------------

def test_acceptance_determinism(client, source3g_run):
    data, _ = source3g_run
    bid = client.post("/api/batches", content=data,
                      headers=AUTH_TECH).json()["batch_id"]
    client.post(f"/api/batches/{bid}/process", headers=AUTH_ANALYST)
    client.post(f"/api/batches/{bid}/lock", headers=AUTH_ANALYST)
    client.post(f"/api/batches/{bid}/approve", headers=AUTH_PM)

    heads = AUTH_PM
    rep1 = client.get(f"/api/batches/{bid}/report?draft=false", headers=heads)
    rep2 = client.get(f"/api/batches/{bid}/report?draft=false", headers=heads)
    ncs1 = client.get(f"/api/batches/{bid}/ncs", headers=heads)
    ncs2 = client.get(f"/api/batches/{bid}/ncs", headers=heads)
    conda1 = client.get(f"/api/batches/{bid}/conda", headers=heads)
    conda2 = client.get(f"/api/batches/{bid}/conda", headers=heads)
    assert rep1.content == rep2.content
    assert ncs1.content == ncs2.content
    assert conda1.content == conda2.content

    # export round-trips to the stored values
    summary = client.get(f"/api/batches/{bid}", headers=heads).json()
    by_number = {s["number"]: s for s in summary["segments"]}
    rows = list(csv.DictReader(io.StringIO(conda1.text)))
    assert len(rows) == len(by_number)
    for row in rows:
        seg = by_number[int(row["segment_number"])]
        assert row["u235_g"] == seg["reported"]["mass_g"]
        assert row["tmu_g"] == seg["reported"]["tmu_g"]
        assert row["mda_g"] == seg["reported"]["mda_g"]
        assert row["batch_id"] == bid
    report_line("determinism", True,
                "byte-identical report/NCS/export + field round-trip")


# 11 --------------------------------------------------------------------------

def test_acceptance_zero_source_mda(empty_pipe_run):
    data, _ = empty_pipe_run
    bundle = ingest.unpack_run_bundle(data)
    processed = pipeline.process_bundle(bundle, ProcessingParameters())
    below = 0
    total = 0
    for seg in processed.segments:
        total += 1
        fwd = seg["data"]["forward"]
        rev = seg["data"]["reverse"]
        if fwd["mass_g"] <= fwd["mda_g"] and rev["mass_g"] <= rev["mda_g"]:
            below += 1
    frac = below / total
    report_line("zero-source-mda", frac >= 0.95,
                f"{below}/{total} segments below their MDA")
