"""Robot-datum trajectory estimation and pipe segmentation.

The trajectory is the weighted least-squares solution of the 1-D odometry
chain with three anchor factors: start position zero, continuity across
the turnaround dwell, and closure back to zero at the exit. Per-sample
uncertainty comes from the diagonal of the inverse information matrix.

Segmentation follows the standard division rules: every segment is twelve
inches except the farthest one or two; the farthest is the detector FOV
length, and the remainder modulo twelve either stands alone (>= 3 in) or
merges into its neighbor (making it up to 15 in, exclusive).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .config import TrajectorySolverConfig

PHASE_FORWARD = "forward"
PHASE_DWELL = "dwell"
PHASE_REVERSE = "reverse"


class LocalizeError(Exception):
    pass


class NoDwellFound(LocalizeError):
    pass


class SingularSystem(LocalizeError):
    pass


class OutOfSpan(LocalizeError):
    pass


class PipeTooShort(LocalizeError):
    pass


class SegmentNotTraversed(LocalizeError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    sigma: np.ndarray
    phase: np.ndarray            # array of str labels per sample
    turnaround_time: float
    dwell_start: float
    dwell_end: float
    max_position: float
    closure_residual: float      # estimated exit position minus zero

    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])


def find_dwell(t: np.ndarray, dx: np.ndarray,
               threshold_in: float = 0.01,
               min_duration_s: float = 10.0) -> tuple[int, int]:
    """Locate the turnaround as the longest contiguous run of near-zero
    displacements lasting at least min_duration_s. Returns (start, end)
    sample indices, inclusive."""
    still = np.abs(dx) < threshold_in
    best = None
    i = 0
    n = len(t)
    while i < n:
        if not still[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and still[j + 1]:
            j += 1
        duration = t[j] - t[i]
        if duration >= min_duration_s and (best is None or
                                           duration > best[2]):
            best = (i, j, duration)
        i = j + 1
    if best is None:
        raise NoDwellFound(
            f"no stationary interval of at least {min_duration_s} s found")
    return best[0], best[1]


def _tridiag_inverse_diagonal(dl: np.ndarray, d: np.ndarray,
                              du: np.ndarray) -> np.ndarray:
    """Diagonal of the inverse of a symmetric tridiagonal matrix via the
    two-sided LDL recurrences (O(n), numerically stable)."""
    n = len(d)
    delta = np.empty(n)
    delta[0] = d[0]
    for i in range(1, n):
        delta[i] = d[i] - dl[i - 1] ** 2 / delta[i - 1]
    mu = np.empty(n)
    mu[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        mu[i] = d[i] - du[i] ** 2 / mu[i + 1]
    return 1.0 / (delta + mu - d)


def estimate_trajectory(odometry_t: np.ndarray,
                        odometry_dx: np.ndarray,
                        odometry_sigma: np.ndarray | None = None,
                        config: TrajectorySolverConfig = TrajectorySolverConfig(),
                        ) -> Trajectory:
    """Fuse incremental odometry into datum positions along the pipe.

    Minimizes
        sum_i ((x_i - x_{i-1} - dx_i) / sigma_i)^2
        + (x_0 / sigma_start)^2
        + ((x_fwd_end - x_rev_start) / sigma_dwell)^2
        + (x_end / sigma_closure)^2
    The information matrix is tridiagonal plus the rank-one dwell factor,
    so the solve and its inverse diagonal are both O(n).
    """
    t = np.asarray(odometry_t, dtype=float)
    dx = np.asarray(odometry_dx, dtype=float)
    n = len(t)
    if n < 2:
        raise SingularSystem("need at least two odometry samples")
    if odometry_sigma is None:
        sig = np.full(n, config.sigma_odom_default_in)
    else:
        sig = np.asarray(odometry_sigma, dtype=float).copy()
        sig[sig <= 0] = config.sigma_odom_default_in
    if np.any(~np.isfinite(sig)) or np.any(~np.isfinite(dx)):
        raise SingularSystem("non-finite odometry inputs")

    i_dwell_0, i_dwell_1 = find_dwell(t, dx, config.dwell_dx_threshold_in,
                                      config.dwell_min_duration_s)

    # weights: odometry rows 1..n-1 constrain (x_i - x_{i-1}); row 0 is the
    # stream origin and carries no increment.
    w = 1.0 / sig[1:] ** 2                      # length n-1
    w0 = 1.0 / config.sigma_start_in ** 2
    wc = 1.0 / config.sigma_closure_in ** 2
    rho = 1.0 / config.sigma_dwell_in ** 2

    d = np.zeros(n)
    d[:-1] += w
    d[1:] += w
    d[0] += w0
    d[-1] += wc
    off = -w                                    # sub/super diagonal
    rhs = np.zeros(n)
    contrib = w * dx[1:]
    rhs[1:] += contrib
    rhs[:-1] -= contrib

    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1, :] = d
    ab[2, :-1] = off
    try:
        z = solve_banded((1, 1), ab, rhs)
        u_rhs = np.zeros(n)
        u_rhs[i_dwell_0] = 1.0
        u_rhs[i_dwell_1] = -1.0
        y = solve_banded((1, 1), ab, u_rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc))
    if np.any(~np.isfinite(z)) or np.any(~np.isfinite(y)):
        raise SingularSystem("singular normal equations")

    # Sherman-Morrison update for the dwell factor rho * u u^T,
    # u = e_a - e_b with a,b the dwell endpoints.
    uy = y[i_dwell_0] - y[i_dwell_1]
    uz = z[i_dwell_0] - z[i_dwell_1]
    denom = 1.0 + rho * uy
    x = z - y * (rho * uz / denom)

    diag_t_inv = _tridiag_inverse_diagonal(off, d, off)
    var = diag_t_inv - (rho / denom) * y ** 2
    var = np.maximum(var, 0.0)
    sigma_x = np.sqrt(var)

    phase = np.empty(n, dtype=object)
    phase[:i_dwell_0] = PHASE_FORWARD
    phase[i_dwell_0:i_dwell_1 + 1] = PHASE_DWELL
    phase[i_dwell_1 + 1:] = PHASE_REVERSE
    if config.entrance_offset_in:
        x = x + config.entrance_offset_in

    return Trajectory(
        t=t, x=x, sigma=sigma_x, phase=phase,
        turnaround_time=float((t[i_dwell_0] + t[i_dwell_1]) / 2.0),
        dwell_start=float(t[i_dwell_0]),
        dwell_end=float(t[i_dwell_1]),
        max_position=float(np.max(x)),
        closure_residual=float(x[-1]),
    )


def objective_gradient(traj: Trajectory, odometry_dx: np.ndarray,
                       odometry_sigma: np.ndarray,
                       config: TrajectorySolverConfig) -> np.ndarray:
    """Gradient of the least-squares objective at the trajectory solution;
    zero (to numerical precision) certifies optimality."""
    x = traj.x - config.entrance_offset_in
    n = len(x)
    dx = np.asarray(odometry_dx, dtype=float)
    sig = np.asarray(odometry_sigma, dtype=float).copy()
    sig[sig <= 0] = config.sigma_odom_default_in
    g = np.zeros(n)
    r = (x[1:] - x[:-1] - dx[1:]) / sig[1:] ** 2
    g[1:] += r
    g[:-1] -= r
    g[0] += x[0] / config.sigma_start_in ** 2
    g[-1] += x[-1] / config.sigma_closure_in ** 2
    still = np.nonzero(traj.phase == PHASE_DWELL)[0]
    a, b = still[0], still[-1]
    rd = (x[a] - x[b]) / config.sigma_dwell_in ** 2
    g[a] += rd
    g[b] -= rd
    return 2.0 * g


def position_at(traj: Trajectory, t: float, offset_in: float = 0.0,
                ) -> tuple[float, float]:
    """Datum position (plus along-pipe sensor offset) and 1-sigma at time t
    by linear interpolation between the bracketing samples."""
    t0, t1 = traj.span()
    if not (t0 <= t <= t1):
        raise OutOfSpan(f"t={t} outside run span [{t0}, {t1}]")
    x = float(np.interp(t, traj.t, traj.x)) + offset_in
    s = float(np.interp(t, traj.t, traj.sigma))
    return x, s


def positions_at(traj: Trajectory, times: np.ndarray,
                 offset_in: float = 0.0) -> np.ndarray:
    lo, hi = traj.span()
    times = np.asarray(times, dtype=float)
    if times.size and (times.min() < lo - 1e-9 or times.max() > hi + 1e-9):
        raise OutOfSpan("timestamps outside run span")
    return np.interp(times, traj.t, traj.x) + offset_in


SEG_STANDARD = "standard"
SEG_STRETCH = "stretch"
SEG_FOV = "fov"

STANDARD_LEN_IN = 12.0
MIN_STRETCH_IN = 3.0


@dataclass
class Segment:
    number: int
    start_in: float
    end_in: float
    kind: str
    windows: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def length_in(self) -> float:
        return self.end_in - self.start_in


@dataclass
class SegmentPlan:
    segments: list[Segment]
    max_position: float
    fov_length: float
    notes: list[str] = field(default_factory=list)

    def by_number(self, number: int) -> Segment:
        return self.segments[number - 1]

    def segment_at(self, position_in: float) -> Segment | None:
        for seg in self.segments:
            if seg.start_in <= position_in < seg.end_in:
                return seg
        if self.segments and abs(position_in - self.segments[-1].end_in) < 1e-9:
            return self.segments[-1]
        return None


def divide_segments(max_position: float, fov_length: float) -> SegmentPlan:
    """Divide [0, max_position] into numbered segments from the launch edge.

    The farthest segment is the FOV length. The remainder of the rest
    modulo 12 in stays its own segment when >= 3 in, otherwise merges into
    the preceding 12-in segment (yielding up to 15 in, exclusive). A pipe
    barely longer than the FOV (remainder < 3 in with nothing to merge
    into) keeps the short remainder as its own segment and notes it.
    """
    if fov_length <= 0:
        raise PipeTooShort("fov_length must be positive")
    if max_position < fov_length - 1e-9:
        raise PipeTooShort(
            f"pipe length {max_position} shorter than FOV {fov_length}")
    notes: list[str] = []
    rest = max_position - fov_length
    n_full = int(rest // STANDARD_LEN_IN)
    r = rest - n_full * STANDARD_LEN_IN
    if r < 1e-9:
        r = 0.0
    lengths: list[tuple[float, str]] = [(STANDARD_LEN_IN, SEG_STANDARD)] * n_full
    if r >= MIN_STRETCH_IN:
        lengths.append((r, SEG_STRETCH))
    elif r > 0 and n_full >= 1:
        lengths[-1] = (STANDARD_LEN_IN + r, SEG_STRETCH)
    elif r > 0:
        lengths.append((r, SEG_STRETCH))
        notes.append(
            f"leading remainder {r:.3f} in is shorter than {MIN_STRETCH_IN} in "
            "with no segment to merge into; kept as its own segment")
    lengths.append((fov_length, SEG_FOV))

    segments = []
    cursor = 0.0
    for i, (length, kind) in enumerate(lengths, start=1):
        segments.append(Segment(number=i, start_in=cursor,
                                end_in=cursor + length, kind=kind))
        cursor += length
    # pin the far edge exactly to avoid accumulated float drift
    segments[-1].end_in = max_position
    return SegmentPlan(segments=segments, max_position=max_position,
                       fov_length=fov_length, notes=notes)


def phase_times_positions(traj: Trajectory, phase: str, offset_in: float):
    """Times and detector positions eligible for a phase window. The dwell
    is split at the turnaround: its first half belongs to forward, the
    second to reverse, so the farthest segment pools its stationary dwell
    counts on both traversals."""
    if phase == PHASE_FORWARD:
        mask = (traj.phase == PHASE_FORWARD) | (
            (traj.phase == PHASE_DWELL) & (traj.t <= traj.turnaround_time))
    elif phase == PHASE_REVERSE:
        mask = (traj.phase == PHASE_REVERSE) | (
            (traj.phase == PHASE_DWELL) & (traj.t > traj.turnaround_time))
    else:
        raise ValueError(f"phase must be forward or reverse, got {phase!r}")
    return traj.t[mask], traj.x[mask] + offset_in


def segment_time_windows(traj: Trajectory, plan: SegmentPlan,
                         detector_offset_in: float = 0.0) -> SegmentPlan:
    """Attach (enter, exit) timestamps per segment and phase: the interval
    during which the detector FOV center sits inside the segment."""
    for phase in (PHASE_FORWARD, PHASE_REVERSE):
        times, pos = phase_times_positions(traj, phase, detector_offset_in)
        for seg in plan.segments:
            inside = np.nonzero((pos >= seg.start_in - 1e-9) &
                                (pos <= seg.end_in + 1e-9))[0]
            if inside.size == 0:
                raise SegmentNotTraversed(
                    f"segment {seg.number} not traversed on {phase}")
            seg.windows[phase] = (float(times[inside[0]]),
                                  float(times[inside[-1]]))
    return plan


def monotone_envelope(times: np.ndarray, positions: np.ndarray,
                      increasing: bool) -> tuple[np.ndarray, np.ndarray]:
    """Reduce a noisy, near-monotone position series to a strictly monotone
    one: keep the last sample at each new extremum. Used to index polls by
    position when building distance windows."""
    env = np.maximum.accumulate(positions) if increasing else \
        np.minimum.accumulate(positions)
    keep = np.ones(len(env), dtype=bool)
    keep[:-1] = env[1:] != env[:-1]
    return times[keep], env[keep]


def bracket_indices(env_positions: np.ndarray, q: np.ndarray,
                    increasing: bool) -> np.ndarray:
    """Indices of the polls where the monotone envelope first reaches each
    position in q, clipped to the phase. Using one shared index function
    for every window edge makes adjacent distance windows telescope."""
    if increasing:
        idx = np.searchsorted(env_positions, q, side="left")
    else:
        idx = np.searchsorted(-env_positions, -np.asarray(q), side="left")
    return np.clip(idx, 0, len(env_positions) - 1)


def trajectory_csv(traj: Trajectory) -> str:
    rows = ["t,x,sigma,phase"]
    for i in range(len(traj.t)):
        rows.append(f"{float(traj.t[i])!r},{float(traj.x[i])!r},"
                    f"{float(traj.sigma[i])!r},{traj.phase[i]}")
    return "\n".join(rows) + "\n"
