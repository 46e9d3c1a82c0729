"""Quality-control checks: check-source peak health pre/post-run and per
segment, pre/post contamination comparison, whole-run spectrum drift, and
the forward/reverse replicate comparison.

Onboard check results shipped with a bundle are retained for audit only;
everything here is recomputed and the recomputed values govern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import FullPipeBounds, QcBounds, ReplicateThresholds, RoiDefinition
from .radiometrics import (SegmentResult, Spectrum, critical_level,
                           net_peak_counts, roi_background_estimate,
                           roi_channel_slice)

CONTEXT_PRE = "pre"
CONTEXT_POST = "post"
CONTEXT_SEGMENT_FWD = "segment_fwd"
CONTEXT_SEGMENT_REV = "segment_rev"
CONTEXT_FULL_PIPE = "full_pipe"

_SEGMENT_CONTEXTS = (CONTEXT_SEGMENT_FWD, CONTEXT_SEGMENT_REV)


class QcError(Exception):
    pass


class NoPeak(QcError):
    """Too few gross counts in the ROI to measure peak shape at all."""


class NoSegments(QcError):
    pass


class MissingQcSpectrum(QcError):
    pass


@dataclass
class PeakMetrics:
    centroid_kev: float
    fwhm_kev: float
    gross_rate_cps: float
    gross_counts: float


def peak_metrics(spec: Spectrum, roi: RoiDefinition,
                 min_gross_counts: float = 0.0) -> PeakMetrics:
    """Centroid, FWHM, and gross rate of the ROI peak.

    Centroid is the counts-weighted mean energy over the peak window; FWHM
    interpolates the half-maximum crossings walking outward from the mode,
    allowed to extend through the side windows.
    """
    if spec.live_time <= 0:
        raise QcError("live_time must be positive")
    n = spec.channel_count
    sl_peak = roi_channel_slice(spec.energy_cal, roi.peak_window(), n)
    sl_span = roi_channel_slice(spec.energy_cal, roi.span(), n)
    peak_counts = spec.counts[sl_peak].astype(float)
    gross = float(peak_counts.sum())
    if gross < max(min_gross_counts, 1.0):
        raise NoPeak(f"gross ROI counts {gross} below minimum")

    channels = np.arange(sl_peak.start, sl_peak.stop)
    energies = spec.energy_cal.channel_energy(channels)
    centroid = float(np.sum(energies * peak_counts) / gross)

    span_counts = spec.counts[sl_span].astype(float)
    span_channels = np.arange(sl_span.start, sl_span.stop)
    mode_local = sl_peak.start - sl_span.start + int(np.argmax(peak_counts))
    peak_height = span_counts[mode_local]
    half = peak_height / 2.0

    def crossing(direction: int) -> float:
        i = mode_local
        while 0 <= i + direction < len(span_counts) and \
                span_counts[i + direction] >= half:
            i += direction
        j = i + direction
        if not (0 <= j < len(span_counts)):
            return float(span_channels[i])
        # linear interpolation between the last >= half and first < half
        c0, c1 = float(span_counts[i]), float(span_counts[j])
        if c0 == c1:
            return float(span_channels[j])
        frac = (c0 - half) / (c0 - c1)
        return float(span_channels[i]) + direction * frac

    ch_left = crossing(-1)
    ch_right = crossing(+1)
    fwhm = float((ch_right - ch_left) * spec.energy_cal.b_kev_per_ch)
    return PeakMetrics(centroid_kev=centroid, fwhm_kev=fwhm,
                       gross_rate_cps=gross / spec.live_time,
                       gross_counts=gross)


@dataclass
class QcResult:
    context: str
    centroid_kev: float | None
    fwhm_kev: float | None
    gross_rate_cps: float | None
    centroid_pass: bool
    fwhm_pass: bool
    efficiency_pass: bool
    overall_pass: bool
    note: str = ""
    segment_number: int | None = None

    def criteria(self) -> dict[str, bool]:
        return {"centroid": self.centroid_pass, "fwhm": self.fwhm_pass,
                "efficiency": self.efficiency_pass}


def qc_check(spec: Spectrum, bounds: QcBounds, roi: RoiDefinition,
             context: str, segment_number: int | None = None) -> QcResult:
    """Evaluate peak health against bounds. Segment contexts waive the
    efficiency upper bound, since a strong source in the pipe legitimately
    raises the check-source ROI rate."""
    try:
        m = peak_metrics(spec, roi, bounds.min_gross_counts)
    except NoPeak as exc:
        return QcResult(context=context, centroid_kev=None, fwhm_kev=None,
                        gross_rate_cps=None, centroid_pass=False,
                        fwhm_pass=False, efficiency_pass=False,
                        overall_pass=False, note=f"no peak: {exc}",
                        segment_number=segment_number)
    c_lo, c_hi = bounds.centroid_kev
    f_lo, f_hi = bounds.fwhm_kev
    e_lo, e_hi = bounds.efficiency_cps
    centroid_ok = c_lo <= m.centroid_kev <= c_hi
    fwhm_ok = f_lo <= m.fwhm_kev <= f_hi
    if context in _SEGMENT_CONTEXTS:
        eff_ok = m.gross_rate_cps >= e_lo
    else:
        eff_ok = e_lo <= m.gross_rate_cps <= e_hi
    return QcResult(context=context, centroid_kev=m.centroid_kev,
                    fwhm_kev=m.fwhm_kev, gross_rate_cps=m.gross_rate_cps,
                    centroid_pass=centroid_ok, fwhm_pass=fwhm_ok,
                    efficiency_pass=eff_ok,
                    overall_pass=centroid_ok and fwhm_ok and eff_ok,
                    segment_number=segment_number)


@dataclass
class ContaminationResult:
    delta_cps: float
    sigma_cps: float
    threshold_cps: float
    passed: bool


def contamination_check(pre: Spectrum, post: Spectrum, roi: RoiDefinition,
                        sigma_factor: float = 3.0,
                        floor_cps: float = 0.0) -> ContaminationResult:
    """Compare the 186 keV net rate before and after the run. A significant
    change means material was picked up or dropped; that invalidates the
    batch."""
    net_pre, s_pre = net_peak_counts(pre, roi)
    net_post, s_post = net_peak_counts(post, roi)
    r_pre, sr_pre = net_pre / pre.live_time, s_pre / pre.live_time
    r_post, sr_post = net_post / post.live_time, s_post / post.live_time
    delta = r_post - r_pre
    sigma = math.sqrt(sr_pre ** 2 + sr_post ** 2)
    threshold = max(sigma_factor * sigma, floor_cps)
    return ContaminationResult(delta_cps=delta, sigma_cps=sigma,
                               threshold_cps=threshold,
                               passed=abs(delta) <= threshold)


def full_pipe_check(run_spectrum: Spectrum, roi: RoiDefinition,
                    bounds: FullPipeBounds) -> QcResult:
    """Check the whole-run accumulated spectrum for 186 keV drift and
    defocusing. Below the critical level there is no peak to measure, so
    the check passes vacuously with a note."""
    net, _ = net_peak_counts(run_spectrum, roi)
    background = roi_background_estimate(run_spectrum, roi)
    if net < critical_level(background):
        return QcResult(context=CONTEXT_FULL_PIPE, centroid_kev=None,
                        fwhm_kev=None, gross_rate_cps=None,
                        centroid_pass=True, fwhm_pass=True,
                        efficiency_pass=True, overall_pass=True,
                        note="below LLD")
    try:
        m = peak_metrics(run_spectrum, roi)
    except NoPeak:
        return QcResult(context=CONTEXT_FULL_PIPE, centroid_kev=None,
                        fwhm_kev=None, gross_rate_cps=None,
                        centroid_pass=True, fwhm_pass=True,
                        efficiency_pass=True, overall_pass=True,
                        note="below LLD")
    c_lo, c_hi = bounds.centroid_kev
    f_lo, f_hi = bounds.fwhm_kev
    centroid_ok = c_lo <= m.centroid_kev <= c_hi
    fwhm_ok = f_lo <= m.fwhm_kev <= f_hi
    return QcResult(context=CONTEXT_FULL_PIPE, centroid_kev=m.centroid_kev,
                    fwhm_kev=m.fwhm_kev, gross_rate_cps=m.gross_rate_cps,
                    centroid_pass=centroid_ok, fwhm_pass=fwhm_ok,
                    efficiency_pass=True,
                    overall_pass=centroid_ok and fwhm_ok)


@dataclass
class ReplicateResult:
    kind: str  # total | max
    forward_g: float
    forward_sigma_g: float
    reverse_g: float
    reverse_sigma_g: float
    rpd_percent: float | None
    two_sigma_bound_g: float
    passed: bool
    segment_number: int | None = None


def relative_percent_difference(a: float, b: float) -> float | None:
    """|a-b| / mean(a,b) * 100; undefined (None) at zero mean."""
    mean = (a + b) / 2.0
    if mean == 0:
        return None
    return abs(a - b) / abs(mean) * 100.0


def _replicate(kind: str, a: float, sa: float, b: float, sb: float,
               thresholds: ReplicateThresholds,
               segment_number: int | None = None) -> ReplicateResult:
    rpd = relative_percent_difference(a, b)
    bound = thresholds.sigma_factor * math.sqrt(sa ** 2 + sb ** 2)
    rpd_ok = rpd is not None and rpd <= thresholds.rpd_percent
    sigma_ok = abs(a - b) <= bound
    return ReplicateResult(kind=kind, forward_g=a, forward_sigma_g=sa,
                           reverse_g=b, reverse_sigma_g=sb,
                           rpd_percent=rpd, two_sigma_bound_g=bound,
                           passed=rpd_ok or sigma_ok,
                           segment_number=segment_number)


def replicate_check(fwd: list[SegmentResult], rev: list[SegmentResult],
                    thresholds: ReplicateThresholds = ReplicateThresholds(),
                    ) -> tuple[ReplicateResult, ReplicateResult]:
    """Forward-vs-reverse repeatability: Total compares whole-pipe sums,
    Max compares the forward-argmax segment against its reverse twin. Each
    passes on RPD or on combined sigma; failing either invalidates the run.
    Rejected segments must already be excluded from both lists."""
    if not fwd or not rev:
        raise NoSegments("replicate check needs at least one segment")
    fwd_by_num = {r.segment_number: r for r in fwd}
    rev_by_num = {r.segment_number: r for r in rev}
    if set(fwd_by_num) != set(rev_by_num):
        raise NoSegments("forward and reverse segment sets differ")

    tot_f = sum(r.mass_g for r in fwd)
    tot_r = sum(r.mass_g for r in rev)
    sig_f = math.sqrt(sum(r.sigma_g ** 2 for r in fwd))
    sig_r = math.sqrt(sum(r.sigma_g ** 2 for r in rev))
    total = _replicate("total", tot_f, sig_f, tot_r, sig_r, thresholds)

    max_seg = max(fwd, key=lambda r: r.mass_g)
    twin = rev_by_num[max_seg.segment_number]
    max_res = _replicate("max", max_seg.mass_g, max_seg.sigma_g,
                         twin.mass_g, twin.sigma_g, thresholds,
                         segment_number=max_seg.segment_number)
    return total, max_res


@dataclass
class OnboardChecks:
    pre: QcResult
    post: QcResult
    robot_reported: dict | None
    note: str = ("recomputed post-processing values govern; "
                 "onboard values retained for audit only")


def recompute_onboard_checks(pre: Spectrum | None, post: Spectrum | None,
                             bounds: QcBounds, roi: RoiDefinition,
                             robot_reported: dict | None = None,
                             ) -> OnboardChecks:
    if pre is None or post is None:
        raise MissingQcSpectrum("both pre and post QC spectra are required")
    return OnboardChecks(
        pre=qc_check(pre, bounds, roi, CONTEXT_PRE),
        post=qc_check(post, bounds, roi, CONTEXT_POST),
        robot_reported=robot_reported)


@dataclass(frozen=True)
class QcTrendEntry:
    batch_id: str
    timestamp: float
    context: str
    efficiency_cps: float
    passed: bool
