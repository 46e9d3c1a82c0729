"""One-shot analysis of an unpacked bundle: localization, radiometrics,
quality control, geometry, and the machine-raised flag set.

The output is everything the archive needs to record a revision: a
JSON-able results dict, segment rows, flags, artifact files, and QC trend
entries. Reports are built later from these stored results only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from datetime import datetime

import numpy as np

from . import geometry, localize, qc, radiometrics, review
from .config import (CalibrationConstants, ProcessingParameters, SensorOffsets)
from .ingest import RunBundle
from .localize import PHASE_FORWARD, PHASE_REVERSE
from .radiometrics import Spectrum
from .review import FlagRec, flag_severity
from .units import IN_PER_FT


class ProcessingFailure(Exception):
    def __init__(self, module: str, error: Exception):
        self.module = module
        self.error = error
        super().__init__(f"{module}: {error}")


@dataclass
class ProcessedResults:
    state: str                      # PROCESSED | INVALID
    results: dict
    segments: list[dict]
    flags: list[FlagRec]
    artifacts: list[tuple[str, bytes, str]]
    trend: list[tuple[str, float, str, float, bool]]


def _flag(code: str, scope: str, segment: int | None, message: str,
          ) -> FlagRec:
    fid = code if scope == "batch" else f"{code}.s{segment}"
    return FlagRec(id=fid, scope=scope, segment=segment, code=code,
                   severity=flag_severity(code), status=review.FLAG_OPEN,
                   message=message)


def _qc_result_dict(r: qc.QcResult) -> dict:
    return asdict(r)


def _segment_result_dict(r: radiometrics.SegmentResult) -> dict:
    return asdict(r)


def _window_spectrum_at(bundle: RunBundle, traj, center: float,
                        window_in: float, phase: str,
                        detector_offset: float) -> Spectrum | None:
    """Re-extract the incremental window spectrum centered closest to the
    given position (the one the reported mass came from)."""
    best = None
    for pos, spec in radiometrics.moving_window_spectra(
            bundle.spectra, bundle.manifest.energy_cal, traj, window_in,
            phase, detector_offset):
        d = abs(pos - center)
        if best is None or d < best[0]:
            best = (d, spec)
    return best[1] if best else None


def _calibration_block(cal: CalibrationConstants, start_time: str) -> dict:
    measured = datetime.fromisoformat(start_time.replace("Z", "+00:00"))
    cal_date = datetime.fromisoformat(cal.calibration_date)
    if cal_date.tzinfo is None:
        cal_date = cal_date.replace(tzinfo=measured.tzinfo)
    age_days = (measured - cal_date).days
    return {"id": cal.calibration_id, "date": cal.calibration_date,
            "age_days": age_days,
            "current": 0 <= age_days <= cal.calibration_valid_days,
            "k_cal_g_per_cps": cal.k_cal_g_per_cps,
            "systematic_fraction": cal.systematic_fraction,
            "tau_max_g_per_cm2": cal.tau_max_g_per_cm2,
            "deposit_width_cm": cal.deposit_width_cm}


def process_bundle(bundle: RunBundle, params: ProcessingParameters,
                   cal: CalibrationConstants = CalibrationConstants(),
                   offsets: SensorOffsets = SensorOffsets(),
                   ) -> ProcessedResults:
    """Run the full analysis chain. Never raises for QC outcomes (those
    become flags); raises ProcessingFailure for structural problems."""
    flags: list[FlagRec] = []
    artifacts: list[tuple[str, bytes, str]] = []
    trend: list[tuple[str, float, str, float, bool]] = []
    manifest = bundle.manifest
    energy_cal = manifest.energy_cal
    fov = manifest.fov_length_in
    window = params.window_length_in or fov
    mu = cal.mu_for(params.material)
    det_off = offsets.detector_fov_center_in

    # pre/post QC recomputation; onboard values are audit-only
    pre_spec = post_spec = None
    if bundle.qc_pre is not None:
        pre_spec = Spectrum(counts=bundle.qc_pre.counts,
                            live_time=bundle.qc_pre.live_time,
                            energy_cal=energy_cal, label="qc")
    if bundle.qc_post is not None:
        post_spec = Spectrum(counts=bundle.qc_post.counts,
                             live_time=bundle.qc_post.live_time,
                             energy_cal=energy_cal, label="qc")
    try:
        onboard = qc.recompute_onboard_checks(
            pre_spec, post_spec, params.qc_bounds, params.am241_roi,
            manifest.robot_qc)
    except qc.MissingQcSpectrum as exc:
        raise ProcessingFailure("qc", exc)
    if not onboard.pre.overall_pass:
        flags.append(_flag("PRE_QC_FAIL", "batch", None,
                           "pre-run check-source QC failed"))
    if not onboard.post.overall_pass:
        flags.append(_flag("POST_QC_FAIL", "batch", None,
                           "post-run check-source QC failed"))
    contamination = qc.contamination_check(
        pre_spec, post_spec, params.u235_roi,
        sigma_factor=params.contamination.sigma_factor,
        floor_cps=params.contamination.floor_g / cal.k_cal_g_per_cps)
    if not contamination.passed:
        flags.append(_flag("CONTAMINATION", "batch", None,
                           f"pre/post 186 keV rate changed by "
                           f"{contamination.delta_cps:.2f} cps"))
    trend.append((manifest.robot_id, bundle.qc_pre.t, qc.CONTEXT_PRE,
                  onboard.pre.gross_rate_cps or 0.0, onboard.pre.overall_pass))
    trend.append((manifest.robot_id, bundle.qc_post.t, qc.CONTEXT_POST,
                  onboard.post.gross_rate_cps or 0.0,
                  onboard.post.overall_pass))

    # localization
    try:
        traj = localize.estimate_trajectory(
            bundle.odometry_t, bundle.odometry_dx, bundle.odometry_sigma,
            params.solver)
        plan = localize.divide_segments(traj.max_position, fov)
        localize.segment_time_windows(traj, plan, det_off)
    except localize.LocalizeError as exc:
        raise ProcessingFailure("localize", exc)
    if abs(traj.closure_residual) > params.solver.closure_warn_in:
        flags.append(_flag(
            "LOCALIZATION_CLOSURE", "batch", None,
            f"exit position {traj.closure_residual:.2f} in differs from the "
            f"entrance by more than {params.solver.closure_warn_in} in"))
    artifacts.append(("trajectory.csv",
                      localize.trajectory_csv(traj).encode(), "text/csv"))

    # radiometric curves and per-segment results
    detector_reset = False
    curves: dict[str, radiometrics.MassCurve] = {}
    try:
        for phase in (PHASE_FORWARD, PHASE_REVERSE):
            curves[phase] = radiometrics.build_mass_curve(
                bundle.spectra, energy_cal, traj, params.u235_roi, cal, mu,
                window, fov, phase, det_off)
    except radiometrics.NegativeDifference as exc:
        detector_reset = True
        flags.append(_flag("DETECTOR_RESET", "batch", None,
                           f"accumulated spectrum decreased mid-run: {exc}"))
    except radiometrics.RadiometricsError as exc:
        raise ProcessingFailure("radiometrics", exc)

    seg_rows: list[dict] = []
    fwd_results: list[radiometrics.SegmentResult] = []
    rev_results: list[radiometrics.SegmentResult] = []
    qc_segments: dict[str, dict] = {}
    if not detector_reset:
        artifacts.append(("mass_curve_fwd.csv", radiometrics.mass_curve_csv(
            curves[PHASE_FORWARD]).encode(), "text/csv"))
        artifacts.append(("mass_curve_rev.csv", radiometrics.mass_curve_csv(
            curves[PHASE_REVERSE]).encode(), "text/csv"))
        for seg in plan.segments:
            try:
                rf = radiometrics.segment_result(curves[PHASE_FORWARD], seg, cal)
                rr = radiometrics.segment_result(curves[PHASE_REVERSE], seg, cal)
            except radiometrics.NoSamplesInSegment as exc:
                raise ProcessingFailure("radiometrics", exc)
            fwd_results.append(rf)
            rev_results.append(rr)
            if rf.lump_flagged or rr.lump_flagged:
                flags.append(_flag(
                    "SEG_LUMP_SELF_ATTENUATION", "segment", seg.number,
                    "self-attenuation beyond the measurable range "
                    "(lump-like deposit)"))

            # per-segment check-source QC on each traversal
            seg_qc = {}
            for phase, code, context in (
                    (PHASE_FORWARD, "SEG_QC_FWD", qc.CONTEXT_SEGMENT_FWD),
                    (PHASE_REVERSE, "SEG_QC_REV", qc.CONTEXT_SEGMENT_REV)):
                t_enter, t_exit = seg.windows[phase]
                i0 = int(np.searchsorted(bundle.spectra.t, t_enter, "left"))
                i1 = int(np.searchsorted(bundle.spectra.t, t_exit, "right")) - 1
                i0 = max(0, min(i0, len(bundle.spectra.t) - 1))
                i1 = max(i0, min(i1, len(bundle.spectra.t) - 1))
                if i1 <= i0:
                    continue
                window_spec = radiometrics.incremental_spectrum(
                    Spectrum(bundle.spectra.counts[i0],
                             bundle.spectra.live_time[i0], energy_cal,
                             "accumulated"),
                    Spectrum(bundle.spectra.counts[i1],
                             bundle.spectra.live_time[i1], energy_cal,
                             "accumulated"))
                res = qc.qc_check(window_spec, params.qc_bounds,
                                  params.am241_roi, context, seg.number)
                seg_qc[phase] = _qc_result_dict(res)
                if not res.overall_pass:
                    flags.append(_flag(
                        code, "segment", seg.number,
                        f"check-source QC failed on the {phase} traversal"))
            qc_segments[str(seg.number)] = seg_qc

    # whole-run spectrum drift/defocus check
    full_spec = radiometrics.incremental_spectrum(
        Spectrum(bundle.spectra.counts[0], bundle.spectra.live_time[0],
                 energy_cal, "accumulated"),
        Spectrum(bundle.spectra.counts[-1], bundle.spectra.live_time[-1],
                 energy_cal, "accumulated"))
    full_pipe = qc.full_pipe_check(full_spec, params.u235_roi,
                                   params.full_pipe_bounds)
    if not full_pipe.overall_pass:
        flags.append(_flag("FULL_PIPE_SPECTRUM", "batch", None,
                           "whole-run 186 keV peak drifted or defocused"))

    # replicate check and averaging
    replicate_passed: bool | None = None
    replicate_results: list[qc.ReplicateResult] = []
    averaged: dict[int, radiometrics.SegmentResult] = {}
    if not detector_reset and fwd_results:
        total, mx = qc.replicate_check(fwd_results, rev_results,
                                       params.replicate)
        replicate_results = [total, mx]
        replicate_passed = total.passed and mx.passed
        if not total.passed:
            flags.append(_flag("REPLICATE_TOTAL", "batch", None,
                               "forward/reverse total mass replicate failed"))
        if not mx.passed:
            flags.append(_flag("REPLICATE_MAX", "batch", None,
                               "forward/reverse max-segment replicate failed"))
        if replicate_passed:
            for rf, rr in zip(fwd_results, rev_results):
                averaged[rf.segment_number] = radiometrics.average_fwd_rev(
                    rf, rr, cal)

    # geometry
    geometry_metrics: dict[str, dict] = {}
    positioned_images: list[geometry.PositionedImage] = []
    if len(bundle.lidar_t):
        nominal_r = (manifest.pipe_diameter_in / 2.0) * 2.54
        radial = SensorOffsets.lidar_radial(manifest.pipe_diameter_in)
        z_cm, theta_c, r_c = geometry.scan_points_recentered(
            bundle.lidar_t, bundle.lidar_theta, bundle.lidar_r, traj,
            offsets.lidar_along_in, radial)
        for seg in plan.segments:
            try:
                hm = geometry.build_heatmap(
                    z_cm, theta_c, r_c, seg.number, seg.start_in, seg.end_in,
                    nominal_r, params.geometry)
            except geometry.NoScansInSegment:
                geometry_metrics[str(seg.number)] = {"available": False}
                continue
            dev = geometry.geometric_deviation_flags(hm, params.geometry)
            geometry_metrics[str(seg.number)] = {
                "available": True,
                "fraction_deviating": dev.fraction_deviating,
                "max_deviation_cm": dev.max_deviation_cm,
                "flagged": dev.flagged}
            if dev.flagged:
                flags.append(_flag(
                    "SEG_GEOMETRY_DEVIATION", "segment", seg.number,
                    f"{dev.fraction_deviating:.1%} of surface cells deviate "
                    f"more than {dev.threshold_cm} cm from the nominal pipe"))
            artifacts.append((f"heatmap_seg{seg.number}.png",
                              geometry.heatmap_png(hm), "image/png"))
            artifacts.append((f"heatmap_dev_seg{seg.number}.png",
                              geometry.heatmap_png(hm, deviation=True),
                              "image/png"))
            try:
                mesh = geometry.triangulate_surface(hm)
                artifacts.append((f"mesh_seg{seg.number}.off",
                                  geometry.mesh_off(mesh, nominal_r).encode(),
                                  "text/plain"))
            except geometry.DegenerateInput:
                pass
    positioned_images = geometry.assign_image_positions(
        bundle.images, traj, offsets.camera_view_in, plan)
    for img in positioned_images:
        if img.file in bundle.image_data:
            artifacts.append((f"images/{img.file}",
                              bundle.image_data[img.file], "image/png"))

    # per-segment spectrum exhibits (the forward window behind the
    # reported value, per the detail display convention)
    if not detector_reset:
        for rf, seg in zip(fwd_results, plan.segments):
            spec = _window_spectrum_at(bundle, traj, rf.max_position_in,
                                       window, PHASE_FORWARD, det_off)
            if spec is not None:
                artifacts.append((f"spectrum_seg{seg.number}.csv",
                                  radiometrics.spectrum_csv(spec).encode(),
                                  "text/csv"))

    # segment rows for the archive
    by_num_avg = {n: _segment_result_dict(r) for n, r in averaged.items()}
    for i, seg in enumerate(plan.segments):
        rf = _segment_result_dict(fwd_results[i]) if fwd_results else None
        rr = _segment_result_dict(rev_results[i]) if rev_results else None
        images = [img.file for img in positioned_images
                  if img.segment_number == seg.number]
        seg_rows.append({
            "number": seg.number, "start_in": seg.start_in,
            "end_in": seg.end_in, "kind": seg.kind,
            "mass_fwd": rf["mass_g"] if rf else 0.0,
            "sigma_fwd": rf["sigma_g"] if rf else 0.0,
            "mass_rev": rr["mass_g"] if rr else 0.0,
            "sigma_rev": rr["sigma_g"] if rr else 0.0,
            "data": {
                "forward": rf, "reverse": rr,
                "averaged": by_num_avg.get(seg.number),
                "windows": {p: list(seg.windows[p]) for p in seg.windows},
                "images": images,
                "qc": qc_segments.get(str(seg.number), {}),
                "geometry": geometry_metrics.get(str(seg.number)),
            }})

    # QC results artifact
    qc_rows = ["context,segment,centroid_kev,fwhm_kev,gross_rate_cps,passed"]
    all_qc = [(onboard.pre, ""), (onboard.post, ""), (full_pipe, "")]
    for res, _ in all_qc:
        qc_rows.append(f"{res.context},,"
                       f"{_num(res.centroid_kev)},{_num(res.fwhm_kev)},"
                       f"{_num(res.gross_rate_cps)},{res.overall_pass}")
    for seg_num, phases in sorted(qc_segments.items(), key=lambda kv: int(kv[0])):
        for phase in (PHASE_FORWARD, PHASE_REVERSE):
            if phase in phases:
                d = phases[phase]
                qc_rows.append(f"{d['context']},{seg_num},"
                               f"{_num(d['centroid_kev'])},{_num(d['fwhm_kev'])},"
                               f"{_num(d['gross_rate_cps'])},{d['overall_pass']}")
    artifacts.append(("qc_results.csv", ("\n".join(qc_rows) + "\n").encode(),
                      "text/csv"))

    # segments summary artifact
    seg_csv = ["number,start_ft,end_ft,kind,mass_fwd_g,mass_rev_g"]
    for row in seg_rows:
        seg_csv.append(
            f"{row['number']},{row['start_in'] / IN_PER_FT!r},"
            f"{row['end_in'] / IN_PER_FT!r},{row['kind']},"
            f"{row['mass_fwd']!r},{row['mass_rev']!r}")
    artifacts.append(("segments.csv", ("\n".join(seg_csv) + "\n").encode(),
                      "text/csv"))

    duration = float(bundle.odometry_t[-1] - bundle.odometry_t[0])
    fwd_time = traj.dwell_start - float(bundle.odometry_t[0])
    results = {
        "trajectory": {
            "max_position_in": traj.max_position,
            "closure_residual_in": traj.closure_residual,
            "turnaround_time": traj.turnaround_time,
            "dwell_start": traj.dwell_start, "dwell_end": traj.dwell_end,
            "duration_s": duration,
            "average_forward_speed_in_s":
                traj.max_position / fwd_time if fwd_time > 0 else None,
        },
        "plan_notes": plan.notes,
        "window_length_in": window,
        "fov_length_in": fov,
        "material": params.material,
        "qc": {
            "pre": _qc_result_dict(onboard.pre),
            "post": _qc_result_dict(onboard.post),
            "full_pipe": _qc_result_dict(full_pipe),
            "contamination": asdict(contamination),
            "onboard_reported": onboard.robot_reported,
            "precedence_note": onboard.note,
            "segments": qc_segments,
        },
        "replicate": review.replicate_block(replicate_passed,
                                            replicate_results),
        "geometry": geometry_metrics,
        "images": [asdict(img) for img in positioned_images],
        "calibration": _calibration_block(cal, manifest.start_time.isoformat()),
        "detector_reset": detector_reset,
    }
    has_invalidating = any(
        f.severity == review.SEVERITY_INVALIDATING for f in flags)
    return ProcessedResults(
        state=review.INVALID if has_invalidating else review.PROCESSED,
        results=results, segments=seg_rows, flags=flags,
        artifacts=artifacts, trend=trend)


def _num(x) -> str:
    return "" if x is None else repr(float(x))
