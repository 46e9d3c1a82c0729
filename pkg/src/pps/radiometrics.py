"""Spectrum arithmetic and the mass-per-foot analysis chain.

Accumulated spectra are differenced over distance windows to get usable
counting statistics, the 186 keV net peak area is estimated against side
windows, and net rates are inverted to deposit mass with a slab
self-attenuation correction. Each segment reports the maximum of the
smooth curve inside it, a deliberately conservative choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import CalibrationConstants, RoiDefinition
from .ingest import EnergyCal, SpectraStream
from .localize import (PHASE_FORWARD, Segment, Trajectory, bracket_indices,
                       monotone_envelope, phase_times_positions)
from .units import IN_PER_FT, in_to_cm

MDA_CONST = 2.71
MDA_SLOPE = 4.65
CRITICAL_LEVEL_SLOPE = 2.33


class RadiometricsError(Exception):
    pass


class NegativeDifference(RadiometricsError):
    """Accumulated counts went backwards: detector reset mid-run. The batch
    must be invalidated rather than the difference clamped."""


class EmptyWindow(RadiometricsError):
    pass


class RoiOutOfRange(RadiometricsError):
    pass


class NoSamplesInSegment(RadiometricsError):
    pass


class SegmentNumberMismatch(RadiometricsError):
    pass


class NoConvergence(RadiometricsError):
    pass


@dataclass
class Spectrum:
    counts: np.ndarray
    live_time: float
    energy_cal: EnergyCal
    label: str = "incremental"

    @property
    def channel_count(self) -> int:
        return len(self.counts)

    def channel_energies(self) -> np.ndarray:
        return self.energy_cal.channel_energy(np.arange(self.channel_count))


def incremental_spectrum(acc_start: Spectrum, acc_end: Spectrum) -> Spectrum:
    """Difference of two accumulated spectra; live time is the live-clock
    difference. A negative channel difference means the detector reset."""
    if acc_start.channel_count != acc_end.channel_count:
        raise RadiometricsError("channel counts differ")
    if acc_start.energy_cal != acc_end.energy_cal:
        raise RadiometricsError("energy calibrations differ")
    diff = acc_end.counts - acc_start.counts
    if np.any(diff < 0):
        ch = int(np.nonzero(diff < 0)[0][0])
        raise NegativeDifference(f"channel {ch} decreased")
    return Spectrum(counts=diff,
                    live_time=float(acc_end.live_time - acc_start.live_time),
                    energy_cal=acc_end.energy_cal, label="incremental")


def roi_channel_slice(cal: EnergyCal, window: tuple[float, float],
                      channel_count: int) -> slice:
    """Channels whose center energy falls in [lo, hi)."""
    lo, hi = window
    a, b = cal.a_kev, cal.b_kev_per_ch
    first = int(math.ceil((lo - a) / b))
    last = int(math.ceil((hi - a) / b))  # exclusive
    if first < 0 or last > channel_count or first >= last:
        raise RoiOutOfRange(
            f"window [{lo}, {hi}) keV outside spectrum span or empty")
    return slice(first, last)


def net_peak_counts(spec: Spectrum, roi: RoiDefinition) -> tuple[float, float]:
    """Net peak area above a straight side-window baseline.

    net = G - (C_L + C_R) * w_p / (w_L + w_R), with Poisson propagation
    sigma = sqrt(G + f^2 (C_L + C_R)). Net may go negative on fluctuation.
    """
    cal, n = spec.energy_cal, spec.channel_count
    sl_peak = roi_channel_slice(cal, roi.peak_window(), n)
    sl_left = roi_channel_slice(cal, roi.left_window(), n)
    sl_right = roi_channel_slice(cal, roi.right_window(), n)
    G = float(spec.counts[sl_peak].sum())
    C = float(spec.counts[sl_left].sum() + spec.counts[sl_right].sum())
    w_p = sl_peak.stop - sl_peak.start
    w_s = (sl_left.stop - sl_left.start) + (sl_right.stop - sl_right.start)
    f = w_p / w_s
    net = G - f * C
    sigma = math.sqrt(G + f * f * C)
    return net, sigma


def roi_background_estimate(spec: Spectrum, roi: RoiDefinition) -> float:
    """Baseline counts expected under the peak window, from the sides."""
    cal, n = spec.energy_cal, spec.channel_count
    sl_peak = roi_channel_slice(cal, roi.peak_window(), n)
    sl_left = roi_channel_slice(cal, roi.left_window(), n)
    sl_right = roi_channel_slice(cal, roi.right_window(), n)
    C = float(spec.counts[sl_left].sum() + spec.counts[sl_right].sum())
    w_p = sl_peak.stop - sl_peak.start
    w_s = (sl_left.stop - sl_left.start) + (sl_right.stop - sl_right.start)
    return C * w_p / w_s


def self_attenuation_factor(tau: float, mu_eff: float) -> float:
    """Slab correction mu*tau / (1 - exp(-mu*tau)); 1 at zero thickness,
    strictly increasing in tau."""
    if tau < 0:
        raise ValueError("areal density must be non-negative")
    x = mu_eff * tau
    if x < 1e-12:
        return 1.0 + x / 2.0
    return x / -math.expm1(-x)


def mda(background_counts: float, live_time: float,
        cal: CalibrationConstants, fov_length_in: float) -> float:
    """Minimum detectable amount in grams at the standard 95/95 criterion:
    L_d = 2.71 + 4.65 sqrt(B) counts, converted through k_cal."""
    if live_time <= 0:
        raise ValueError("live_time must be positive")
    b = max(background_counts, 0.0)
    counts = MDA_CONST + MDA_SLOPE * math.sqrt(b)
    return counts / live_time * cal.k_cal_g_per_cps


def critical_level(background_counts: float) -> float:
    return CRITICAL_LEVEL_SLOPE * math.sqrt(max(background_counts, 0.0))


@dataclass
class MassSolution:
    mass_g: float
    sigma_g: float
    attenuation_factor: float
    areal_density: float
    lump_flagged: bool
    converged: bool


def solve_mass(net_rate_cps: float, sigma_rate_cps: float,
               cal: CalibrationConstants, mu_eff: float,
               fov_length_in: float,
               tol_g: float = 1e-6, max_iter: int = 100) -> MassSolution:
    """Fixed-point solve of m = R * k_cal * AF(tau(m)) where tau(m) spreads
    the mass over the effective deposit strip within the FOV."""
    area_cm2 = cal.deposit_width_cm * in_to_cm(fov_length_in)
    k = cal.k_cal_g_per_cps
    if net_rate_cps <= 0:
        return MassSolution(mass_g=net_rate_cps * k, sigma_g=sigma_rate_cps * k,
                            attenuation_factor=1.0, areal_density=0.0,
                            lump_flagged=False, converged=True)
    m = net_rate_cps * k
    converged = False
    af = 1.0
    for _ in range(max_iter):
        tau = m / area_cm2
        af = self_attenuation_factor(tau, mu_eff)
        m_next = net_rate_cps * k * af
        if abs(m_next - m) <= tol_g:
            m = m_next
            converged = True
            break
        m = m_next
    tau = m / area_cm2
    lump = (tau > cal.tau_max_g_per_cm2) or not converged
    return MassSolution(mass_g=m, sigma_g=sigma_rate_cps * k * af,
                        attenuation_factor=af, areal_density=tau,
                        lump_flagged=lump, converged=converged)


@dataclass
class MassCurve:
    """Smooth mass-density curve over distance for one traversal phase.
    Density is FOV mass over FOV length, so a uniform deposit reads its
    true grams per foot regardless of the smoothing window."""
    position_in: np.ndarray
    density_g_per_ft: np.ndarray
    sigma_g_per_ft: np.ndarray
    net_counts: np.ndarray
    background_counts: np.ndarray
    live_time_s: np.ndarray
    lump_flagged: np.ndarray
    attenuation: np.ndarray
    window_length_in: float
    fov_length_in: float
    phase: str

    def __len__(self) -> int:
        return len(self.position_in)


def moving_window_spectra(stream: SpectraStream, cal: EnergyCal,
                          traj: Trajectory, window_length_in: float,
                          phase: str, detector_offset_in: float = 0.0,
                          ):
    """Yield (center position, incremental Spectrum) pairs for a moving
    distance window along one traversal phase.

    The incremental spectrum for the window centered at p is the
    accumulated difference between the polls bracketing positions p-w/2
    and p+w/2 on that phase; truncation at the pipe ends keeps the true
    (shorter) live time. Poll positions are taken on the monotone envelope
    so dwell-stationary polls collapse onto the final one.
    """
    if window_length_in <= 0:
        raise ValueError("window_length_in must be positive")
    t_phase, x_phase = phase_times_positions(traj, phase, detector_offset_in)
    if len(t_phase) < 2:
        raise EmptyWindow(f"phase {phase} has fewer than two polls")
    increasing = phase == PHASE_FORWARD
    env_t, env_x = monotone_envelope(t_phase, x_phase, increasing)
    lo_t, hi_t = (env_t[0], env_t[-1])

    poll_mask = (stream.t >= lo_t) & (stream.t <= hi_t)
    polls = np.nonzero(poll_mask)[0]
    if polls.size < 2:
        raise EmptyWindow(f"no spectrum polls within phase {phase}")
    poll_t = stream.t[polls]
    poll_pos = np.interp(poll_t, env_t, env_x)

    half = window_length_in / 2.0
    lo_idx = bracket_indices(poll_pos, poll_pos - half, increasing)
    hi_idx = bracket_indices(poll_pos, poll_pos + half, increasing)
    if not increasing:
        lo_idx, hi_idx = hi_idx, lo_idx

    emitted = 0
    seen = set()
    for k in range(len(polls)):
        i, j = int(lo_idx[k]), int(hi_idx[k])
        if j <= i or (i, j) in seen:
            continue
        seen.add((i, j))
        gi, gj = polls[i], polls[j]
        live = float(stream.live_time[gj] - stream.live_time[gi])
        if live <= 0:
            continue
        diff = stream.counts[gj] - stream.counts[gi]
        if np.any(diff < 0):
            ch = int(np.nonzero(diff < 0)[0][0])
            raise NegativeDifference(f"channel {ch} decreased inside window")
        center = float(poll_pos[k])
        yield center, Spectrum(counts=diff, live_time=live, energy_cal=cal,
                               label="incremental")
        emitted += 1
    if emitted == 0:
        raise EmptyWindow(f"no non-empty windows on phase {phase}")


def build_mass_curve(stream: SpectraStream, energy_cal: EnergyCal,
                     traj: Trajectory, roi: RoiDefinition,
                     cal: CalibrationConstants, mu_eff: float,
                     window_length_in: float, fov_length_in: float,
                     phase: str, detector_offset_in: float = 0.0) -> MassCurve:
    """Run the window -> net counts -> mass inversion chain for one phase."""
    pos, dens, sig, nets, bgs, lives, lumps, afs = [], [], [], [], [], [], [], []
    fov_ft = fov_length_in / IN_PER_FT
    for center, spec in moving_window_spectra(
            stream, energy_cal, traj, window_length_in, phase,
            detector_offset_in):
        net, sigma = net_peak_counts(spec, roi)
        rate = net / spec.live_time
        rate_sigma = sigma / spec.live_time
        sol = solve_mass(rate, rate_sigma, cal, mu_eff, fov_length_in)
        pos.append(center)
        dens.append(sol.mass_g / fov_ft)
        sig.append(sol.sigma_g / fov_ft)
        nets.append(net)
        bgs.append(roi_background_estimate(spec, roi))
        lives.append(spec.live_time)
        lumps.append(sol.lump_flagged)
        afs.append(sol.attenuation_factor)
    order = np.argsort(pos) if phase == PHASE_FORWARD else \
        np.argsort(pos)[::-1]
    arr = lambda v, dt=float: np.asarray(v, dtype=dt)[order]
    return MassCurve(position_in=arr(pos), density_g_per_ft=arr(dens),
                     sigma_g_per_ft=arr(sig), net_counts=arr(nets),
                     background_counts=arr(bgs), live_time_s=arr(lives),
                     lump_flagged=arr(lumps, bool), attenuation=arr(afs),
                     window_length_in=window_length_in,
                     fov_length_in=fov_length_in, phase=phase)


@dataclass
class SegmentResult:
    segment_number: int
    phase: str
    mass_g: float
    density_g_per_ft: float
    sigma_g: float
    tmu_g: float
    mda_g: float
    attenuation_factor: float
    lump_flagged: bool
    max_position_in: float


def segment_result(curve: MassCurve, segment: Segment,
                   cal: CalibrationConstants) -> SegmentResult:
    """Report the maximum of the curve inside the segment, scaled to the
    segment length; TMU combines the random sigma with the systematic
    fraction under the configured coverage factor."""
    inside = np.nonzero((curve.position_in >= segment.start_in - 1e-9) &
                        (curve.position_in <= segment.end_in + 1e-9))[0]
    if inside.size == 0:
        raise NoSamplesInSegment(
            f"no curve samples inside segment {segment.number}")
    k = inside[np.argmax(curve.density_g_per_ft[inside])]
    seg_ft = segment.length_in / IN_PER_FT
    density = float(curve.density_g_per_ft[k])
    mass = density * seg_ft
    sigma = float(curve.sigma_g_per_ft[k]) * seg_ft
    tmu = cal.tmu_coverage_factor * math.sqrt(
        sigma ** 2 + (cal.systematic_fraction * mass) ** 2)
    seg_mda = mda(float(curve.background_counts[k]),
                  float(curve.live_time_s[k]), cal, curve.window_length_in)
    return SegmentResult(
        segment_number=segment.number, phase=curve.phase, mass_g=mass,
        density_g_per_ft=density, sigma_g=sigma, tmu_g=tmu, mda_g=seg_mda,
        attenuation_factor=float(curve.attenuation[k]),
        lump_flagged=bool(curve.lump_flagged[inside].any()),
        max_position_in=float(curve.position_in[k]))


def average_fwd_rev(fwd: SegmentResult, rev: SegmentResult,
                    cal: CalibrationConstants) -> SegmentResult:
    """Average the two traversals into the reported per-segment value;
    only meaningful once the replicate check has passed."""
    if fwd.segment_number != rev.segment_number:
        raise SegmentNumberMismatch(
            f"{fwd.segment_number} != {rev.segment_number}")
    mass = (fwd.mass_g + rev.mass_g) / 2.0
    sigma = 0.5 * math.sqrt(fwd.sigma_g ** 2 + rev.sigma_g ** 2)
    tmu = cal.tmu_coverage_factor * math.sqrt(
        sigma ** 2 + (cal.systematic_fraction * mass) ** 2)
    return SegmentResult(
        segment_number=fwd.segment_number, phase="mean",
        mass_g=mass,
        density_g_per_ft=(fwd.density_g_per_ft + rev.density_g_per_ft) / 2.0,
        sigma_g=sigma, tmu_g=tmu,
        mda_g=max(fwd.mda_g, rev.mda_g),
        attenuation_factor=(fwd.attenuation_factor + rev.attenuation_factor) / 2.0,
        lump_flagged=fwd.lump_flagged or rev.lump_flagged,
        max_position_in=fwd.max_position_in)


def mass_curve_csv(curve: MassCurve) -> str:
    rows = ["position_in,g_per_ft,sigma"]
    for i in range(len(curve)):
        rows.append(f"{float(curve.position_in[i])!r},"
                    f"{float(curve.density_g_per_ft[i])!r},"
                    f"{float(curve.sigma_g_per_ft[i])!r}")
    return "\n".join(rows) + "\n"


def spectrum_csv(spec: Spectrum) -> str:
    rows = ["energy_kev,counts"]
    energies = spec.channel_energies()
    for e, c in zip(energies, spec.counts):
        rows.append(f"{float(e)!r},{int(c)}")
    return "\n".join(rows) + "\n"
