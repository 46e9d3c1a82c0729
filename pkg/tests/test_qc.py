"""Quality-control checks: peak metrics, bounds checks, contamination,
full-pipe spectrum, and the replicate comparison."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pps import qc
from pps.config import (AM241_ROI, U235_ROI, FullPipeBounds, QcBounds,
                        ReplicateThresholds, RoiDefinition)
from pps.ingest import EnergyCal
from pps.qc import (CONTEXT_PRE, CONTEXT_SEGMENT_FWD,
                    NoPeak, NoSegments, contamination_check, full_pipe_check,
                    peak_metrics, qc_check, recompute_onboard_checks,
                    relative_percent_difference, replicate_check)
from pps.radiometrics import SegmentResult, Spectrum

CAL = EnergyCal(a_kev=0.0, b_kev_per_ch=0.5)


def spec(counts, live=1.0):
    return Spectrum(counts=np.asarray(counts, dtype=np.int64),
                    live_time=live, energy_cal=CAL, label="qc")


def gaussian_spectrum(center_kev, sigma_kev, area, background=0.0,
                      channels=512, live=1.0, rng=None):
    energies = CAL.channel_energy(np.arange(channels))
    profile = np.exp(-0.5 * ((energies - center_kev) / sigma_kev) ** 2)
    profile /= profile.sum()
    lam = profile * area + background
    counts = rng.poisson(lam) if rng is not None else np.round(lam)
    return spec(counts.astype(np.int64), live=live)


def triangular_spectrum(center_kev, halfwidth_kev, peak_counts,
                        channels=512):
    energies = CAL.channel_energy(np.arange(channels))
    w = np.clip(1.0 - np.abs(energies - center_kev) / halfwidth_kev, 0, None)
    return spec(np.round(w * peak_counts).astype(np.int64))


def test_triangular_centroid():
    s = triangular_spectrum(60.0, 6.0, 1000)
    m = peak_metrics(s, AM241_ROI)
    assert m.centroid_kev == pytest.approx(60.0, abs=0.05)


def test_gaussian_fwhm():
    s = gaussian_spectrum(60.0, 2.0, 100000)
    m = peak_metrics(s, AM241_ROI)
    assert m.fwhm_kev == pytest.approx(2.0 * 2.3548, rel=0.02)


def test_fwhm_converges_with_channel_density():
    # 10+ channels per FWHM keeps interpolation error under 2%
    fine = EnergyCal(a_kev=0.0, b_kev_per_ch=0.25)
    energies = fine.channel_energy(np.arange(1024))
    sigma = 1.5
    profile = np.exp(-0.5 * ((energies - 60.0) / sigma) ** 2)
    s = Spectrum(counts=np.round(profile * 5e4).astype(np.int64),
                 live_time=1.0, energy_cal=fine, label="qc")
    m = peak_metrics(s, AM241_ROI)
    assert m.fwhm_kev == pytest.approx(2.3548 * sigma, rel=0.02)


def test_no_peak_on_empty_roi():
    with pytest.raises(NoPeak):
        peak_metrics(spec(np.zeros(512)), AM241_ROI, min_gross_counts=100)


BOUNDS = QcBounds(fwhm_kev=(2.0, 9.0), centroid_kev=(58.0, 62.0),
                  efficiency_cps=(50.0, 400.0), min_gross_counts=200.0)


def test_qc_check_nominal_pass():
    s = gaussian_spectrum(60.0, 2.1, 10000, background=2.0, live=60.0)
    res = qc_check(s, BOUNDS, AM241_ROI, CONTEXT_PRE)
    assert res.overall_pass
    assert res.criteria() == {"centroid": True, "fwhm": True,
                              "efficiency": True}


def test_qc_check_centroid_shift_fails_only_centroid():
    s = gaussian_spectrum(65.0, 2.1, 10000, background=2.0, live=60.0)
    roi = RoiDefinition(center_kev=65.0)
    res = qc_check(s, BOUNDS, roi, CONTEXT_PRE)
    assert not res.overall_pass
    assert not res.centroid_pass
    assert res.fwhm_pass
    assert res.efficiency_pass


def test_qc_check_segment_context_waives_upper_efficiency():
    # 10x the pre-run upper bound still passes in a segment context
    s = gaussian_spectrum(60.0, 2.1, 400.0 * 10 * 60.0, live=60.0)
    res_seg = qc_check(s, BOUNDS, AM241_ROI, CONTEXT_SEGMENT_FWD,
                       segment_number=3)
    assert res_seg.efficiency_pass
    assert res_seg.overall_pass
    res_pre = qc_check(s, BOUNDS, AM241_ROI, CONTEXT_PRE)
    assert not res_pre.efficiency_pass


def test_qc_check_no_peak_overall_fail():
    res = qc_check(spec(np.zeros(512)), BOUNDS, AM241_ROI, CONTEXT_PRE)
    assert not res.overall_pass
    assert "no peak" in res.note


# --- contamination -----------------------------------------------------------

def test_contamination_identical_passes():
    s = gaussian_spectrum(186.0, 2.5, 5000, background=3.0, live=60.0)
    res = contamination_check(s, s, U235_ROI)
    assert res.passed
    assert res.delta_cps == pytest.approx(0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_contamination_self_always_passes(seed):
    rng = np.random.default_rng(seed)
    s = spec(rng.poisson(5.0, 512), live=30.0)
    assert contamination_check(s, s, U235_ROI).passed


def test_contamination_arithmetic():
    # pre net 0+/-5, post net 50+/-8 at equal live time -> delta 50 over
    # 3*sqrt(25+64)=28.3 -> fail
    assert 50.0 > 3.0 * math.sqrt(5.0 ** 2 + 8.0 ** 2)
    pre = spec(np.zeros(512), live=1.0)
    rng = np.random.default_rng(5)
    post = gaussian_spectrum(186.0, 2.5, 500.0, live=1.0)
    res = contamination_check(pre, post, U235_ROI)
    assert not res.passed


def test_contamination_floor():
    s = gaussian_spectrum(186.0, 2.5, 500000, background=3.0, live=60.0)
    t = gaussian_spectrum(186.0, 2.5, 504500, background=3.0, live=60.0)
    strict = contamination_check(s, t, U235_ROI, floor_cps=0.0)
    with_floor = contamination_check(s, t, U235_ROI, floor_cps=120.0)
    assert not strict.passed
    assert with_floor.passed


# --- full pipe ----------------------------------------------------------------

FP = FullPipeBounds(fwhm_kev=(2.0, 12.0), centroid_kev=(181.0, 191.0))


def test_full_pipe_nominal():
    s = gaussian_spectrum(186.0, 2.5, 50000, background=5.0, live=120.0)
    res = full_pipe_check(s, U235_ROI, FP)
    assert res.overall_pass
    assert res.note == ""


def test_full_pipe_defocused_fails():
    s = gaussian_spectrum(186.0, 11.0, 200000, background=5.0, live=120.0)
    res = full_pipe_check(s, U235_ROI, FP)
    assert not res.overall_pass
    assert not res.fwhm_pass


def test_full_pipe_below_lld_vacuous_pass():
    s = spec(np.random.default_rng(1).poisson(4.0, 512), live=120.0)
    res = full_pipe_check(s, U235_ROI, FP)
    assert res.overall_pass
    assert res.note == "below LLD"


# --- replicate -----------------------------------------------------------------

def seg_result(number, mass, sigma, phase="forward"):
    return SegmentResult(segment_number=number, phase=phase, mass_g=mass,
                         density_g_per_ft=mass, sigma_g=sigma, tmu_g=0.0,
                         mda_g=0.0, attenuation_factor=1.0,
                         lump_flagged=False, max_position_in=0.0)


def totals_case(total_fwd, total_rev, sigma_each):
    fwd = [seg_result(1, total_fwd, sigma_each)]
    rev = [seg_result(1, total_rev, sigma_each, "reverse")]
    return replicate_check(fwd, rev)


def test_replicate_pass_by_rpd():
    total, mx = totals_case(10.0, 12.0, 0.1)
    assert total.rpd_percent == pytest.approx(100 * 2 / 11, rel=1e-12)
    assert total.passed
    assert mx.passed


def test_replicate_pass_by_two_sigma():
    total, _ = totals_case(10.0, 14.0, 1.5)
    assert total.rpd_percent == pytest.approx(100 * 4 / 12, rel=1e-12)
    assert total.rpd_percent > 25.0
    assert total.two_sigma_bound_g == pytest.approx(
        2 * math.sqrt(2) * 1.5, rel=1e-12)
    assert total.passed  # |delta|=4 <= 4.243


def test_replicate_fail_both_criteria():
    total, mx = totals_case(10.0, 14.0, 0.5)
    assert not total.passed
    assert not mx.passed


def test_replicate_max_uses_forward_argmax():
    fwd = [seg_result(1, 1.0, 0.1), seg_result(2, 9.0, 0.1)]
    rev = [seg_result(1, 8.5, 0.1, "reverse"), seg_result(2, 9.2, 0.1,
                                                          "reverse")]
    _, mx = replicate_check(fwd, rev)
    assert mx.segment_number == 2
    assert mx.forward_g == pytest.approx(9.0)
    assert mx.reverse_g == pytest.approx(9.2)


def test_replicate_no_segments():
    with pytest.raises(NoSegments):
        replicate_check([], [])


def test_replicate_total_symmetric():
    a, _ = totals_case(10.0, 14.0, 1.5)
    b, _ = totals_case(14.0, 10.0, 1.5)
    assert a.passed == b.passed
    assert a.rpd_percent == pytest.approx(b.rpd_percent)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(min_value=0.01, max_value=1e3),
       b=st.floats(min_value=0.01, max_value=1e3),
       c=st.floats(min_value=0.01, max_value=100.0))
def test_rpd_scale_invariant(a, b, c):
    base = relative_percent_difference(a, b)
    scaled = relative_percent_difference(c * a, c * b)
    assert scaled == pytest.approx(base, rel=1e-9)


def test_rpd_zero_mean_skipped():
    assert relative_percent_difference(0.0, 0.0) is None
    thresholds = ReplicateThresholds()
    fwd = [seg_result(1, 0.0, 0.5)]
    rev = [seg_result(1, 0.0, 0.5, "reverse")]
    total, mx = replicate_check(fwd, rev, thresholds)
    assert total.rpd_percent is None
    assert total.passed  # 2-sigma criterion alone


# --- onboard recompute ----------------------------------------------------------

def test_recomputed_values_govern():
    good = gaussian_spectrum(60.0, 2.1, 10000, background=2.0, live=60.0)
    bad = gaussian_spectrum(65.0, 2.1, 10000, background=2.0, live=60.0)
    onboard = recompute_onboard_checks(
        good, bad, BOUNDS, AM241_ROI,
        robot_reported={"pre": {"pass": True}, "post": {"pass": True}})
    assert onboard.pre.overall_pass
    assert not onboard.post.overall_pass  # recomputed fail governs
    assert onboard.robot_reported == {"pre": {"pass": True},
                                      "post": {"pass": True}}


def test_recompute_requires_both_spectra():
    good = gaussian_spectrum(60.0, 2.1, 10000, live=60.0)
    with pytest.raises(qc.MissingQcSpectrum):
        recompute_onboard_checks(good, None, BOUNDS, AM241_ROI)


def test_recompute_nominal_agreement(source3g_run):
    from pps import ingest
    data, _ = source3g_run
    bundle = ingest.unpack_run_bundle(data)
    pre = Spectrum(bundle.qc_pre.counts, bundle.qc_pre.live_time,
                   bundle.manifest.energy_cal, "qc")
    post = Spectrum(bundle.qc_post.counts, bundle.qc_post.live_time,
                    bundle.manifest.energy_cal, "qc")
    onboard = recompute_onboard_checks(pre, post, QcBounds(), AM241_ROI)
    assert onboard.pre.overall_pass
    assert onboard.post.overall_pass
