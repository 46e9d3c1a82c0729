"""Pipe-surface modeling from rotating planar LiDAR and image positioning.

Scans are re-centered from the sensor mount offset to the pipe axis,
binned into a 2.5D heatmap unwrapped at theta = pi (theta = 0 is the pipe
bottom), triangulated, and screened for deviation from the nominal
cylinder. Camera images get along-pipe distances from the trajectory.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .config import GeometryConfig
from .localize import SegmentPlan, Trajectory, positions_at
from .units import in_to_cm


class GeometryError(Exception):
    pass


class NoScansInSegment(GeometryError):
    pass


class DegenerateInput(GeometryError):
    pass


def recenter_points(theta: np.ndarray, r: np.ndarray,
                    r0: float, theta0: float) -> tuple[np.ndarray, np.ndarray]:
    """Shift polar points from the sensor frame to the pipe-center frame.

    Goes through Cartesian coordinates; the radial result is identical to
    the law-of-cosines form r' = sqrt(r^2 + r0^2 + 2 r r0 cos(theta0 -
    theta)) but the angle is quadrant-safe.
    """
    if r0 < 0:
        raise ValueError("offset magnitude must be non-negative")
    x = r * np.cos(theta) + r0 * math.cos(theta0)
    y = r * np.sin(theta) + r0 * math.sin(theta0)
    return np.arctan2(y, x), np.hypot(x, y)


def radial_recenter_reference(theta: np.ndarray, r: np.ndarray,
                              r0: float, theta0: float) -> np.ndarray:
    """Law-of-cosines radial form, kept as an independent cross-check of
    recenter_points."""
    return np.sqrt(r ** 2 + r0 ** 2 + 2.0 * r * r0 * np.cos(theta0 - theta))


@dataclass(frozen=True)
class RangeCalibration:
    """Piecewise-linear range correction lookup: measured range (cm) to
    additive correction (cm). Identity outside the knot span or when
    empty."""
    range_cm: tuple[float, ...] = ()
    correction_cm: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.range_cm) != len(self.correction_cm):
            raise ValueError("knot arrays must have equal length")
        if any(b <= a for a, b in zip(self.range_cm, self.range_cm[1:])):
            raise ValueError("knots must be strictly increasing")


def apply_range_calibration(r: np.ndarray, cal: RangeCalibration) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not cal.range_cm:
        return r.copy()
    knots = np.asarray(cal.range_cm)
    corr = np.interp(r, knots, np.asarray(cal.correction_cm))
    outside = (r < knots[0]) | (r > knots[-1])
    corr[outside] = 0.0
    return r + corr


@dataclass
class SurfaceHeatmap:
    """Unwrapped (z along pipe, theta) grid of mean wall radii for one
    segment. theta spans (-pi, pi], cut at pi, with 0 at the pipe bottom."""
    z_edges_cm: np.ndarray
    theta_edges_rad: np.ndarray
    radius_cm: np.ndarray        # (n_theta, n_z), NaN where unoccupied
    occupied: np.ndarray         # bool mask, same shape
    nominal_radius_cm: float
    segment_number: int
    z_offset_cm: float           # segment start in cm along the pipe

    @property
    def z_centers_cm(self) -> np.ndarray:
        return (self.z_edges_cm[:-1] + self.z_edges_cm[1:]) / 2.0

    @property
    def theta_centers_rad(self) -> np.ndarray:
        return (self.theta_edges_rad[:-1] + self.theta_edges_rad[1:]) / 2.0


def _nearest_fill(values: np.ndarray, occupied: np.ndarray,
                  max_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Fill holes from the nearest occupied neighbor within max_cells
    (Euclidean, theta axis wraps); farther holes stay unoccupied."""
    from scipy.ndimage import distance_transform_edt

    if occupied.all() or not occupied.any() or max_cells <= 0:
        return values.copy(), occupied.copy()
    pad = min(max_cells, occupied.shape[0])
    occ_p = np.vstack([occupied[-pad:], occupied, occupied[:pad]])
    val_p = np.vstack([values[-pad:], values, values[:pad]])
    dist, (it, iz) = distance_transform_edt(~occ_p, return_indices=True)
    filled_p = val_p[it, iz]
    reach = dist <= max_cells
    out_p = np.where(reach, filled_p, np.nan)
    out = out_p[pad:pad + values.shape[0]]
    occ_out = reach[pad:pad + values.shape[0]]
    return out, occ_out


def build_heatmap(z_cm: np.ndarray, theta: np.ndarray, r_cm: np.ndarray,
                  segment_number: int, seg_start_in: float, seg_end_in: float,
                  nominal_radius_cm: float,
                  config: GeometryConfig = GeometryConfig()) -> SurfaceHeatmap:
    """Bin centered points falling inside the segment into the heatmap
    grid; cell value is the mean radius. Interior holes are filled by
    nearest neighbor within a few cells, the rest stay unoccupied."""
    z0, z1 = in_to_cm(seg_start_in), in_to_cm(seg_end_in)
    inside = (z_cm >= z0) & (z_cm < z1)
    if not np.any(inside):
        raise NoScansInSegment(f"no scan points inside segment {segment_number}")
    z_in = z_cm[inside]
    th_in = np.mod(theta[inside] + math.pi, 2.0 * math.pi) - math.pi
    # the cut sits at pi: fold exact -pi onto pi's side
    th_in = np.where(th_in == -math.pi, math.pi, th_in)
    r_in = r_cm[inside]

    n_z = max(1, int(round((z1 - z0) / config.cell_z_cm)))
    n_th = max(1, int(round(360.0 / config.cell_theta_deg)))
    z_edges = np.linspace(z0, z1, n_z + 1)
    th_edges = np.linspace(-math.pi, math.pi, n_th + 1)

    zi = np.clip(np.searchsorted(z_edges, z_in, side="right") - 1, 0, n_z - 1)
    ti = np.clip(np.searchsorted(th_edges, th_in, side="right") - 1, 0, n_th - 1)
    flat = ti * n_z + zi
    sums = np.bincount(flat, weights=r_in, minlength=n_th * n_z)
    counts = np.bincount(flat, minlength=n_th * n_z)
    with np.errstate(invalid="ignore"):
        mean = (sums / counts).reshape(n_th, n_z)
    occupied = counts.reshape(n_th, n_z) > 0
    mean[~occupied] = np.nan
    filled, occ = _nearest_fill(mean, occupied, config.fill_radius_cells)
    return SurfaceHeatmap(z_edges_cm=z_edges, theta_edges_rad=th_edges,
                          radius_cm=filled, occupied=occ,
                          nominal_radius_cm=nominal_radius_cm,
                          segment_number=segment_number, z_offset_cm=z0)


@dataclass
class SurfaceMesh:
    vertices: np.ndarray   # (n, 3): z_cm, theta_rad, radius_cm
    triangles: np.ndarray  # (m, 3) vertex indices


def triangulate_surface(hm: SurfaceHeatmap) -> SurfaceMesh:
    """Delaunay-triangulate occupied cell centers in the (z, theta) plane,
    carrying radius as height."""
    ti, zi = np.nonzero(hm.occupied)
    if len(ti) < 3:
        raise DegenerateInput("need at least three occupied cells")
    z = hm.z_centers_cm[zi]
    th = hm.theta_centers_rad[ti]
    pts = np.column_stack([z, th])
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateInput(f"degenerate cell layout: {exc}")
    if len(tri.simplices) == 0:
        raise DegenerateInput("triangulation produced no simplices")
    vertices = np.column_stack([z, th, hm.radius_cm[ti, zi]])
    return SurfaceMesh(vertices=vertices, triangles=tri.simplices.copy())


@dataclass
class DeviationMetrics:
    fraction_deviating: float
    max_deviation_cm: float
    threshold_cm: float
    fraction_threshold: float
    flagged: bool


def geometric_deviation_flags(hm: SurfaceHeatmap,
                              config: GeometryConfig = GeometryConfig(),
                              ) -> DeviationMetrics:
    """Flag the segment when too many cells sit too far off the nominal
    cylinder (vacuum spools, joints, missing panels)."""
    occ = hm.occupied
    dev = np.abs(hm.radius_cm[occ] - hm.nominal_radius_cm)
    if dev.size == 0:
        return DeviationMetrics(0.0, 0.0, config.deviation_threshold_cm,
                                config.deviation_fraction, False)
    frac = float(np.mean(dev > config.deviation_threshold_cm))
    return DeviationMetrics(
        fraction_deviating=frac,
        max_deviation_cm=float(dev.max()),
        threshold_cm=config.deviation_threshold_cm,
        fraction_threshold=config.deviation_fraction,
        flagged=frac > config.deviation_fraction)


@dataclass
class PositionedImage:
    file: str
    timestamp: float
    distance_in: float | None
    segment_number: int | None


def assign_image_positions(images: list[tuple[float, str]], traj: Trajectory,
                           camera_offset_in: float, plan: SegmentPlan,
                           ) -> list[PositionedImage]:
    """Give each image the pipe distance the camera viewed at its
    timestamp and the owning segment; images outside the run span or the
    segment extent stay unassigned."""
    out = []
    t0, t1 = traj.span()
    for ts, name in images:
        if not (t0 <= ts <= t1):
            out.append(PositionedImage(file=name, timestamp=ts,
                                       distance_in=None, segment_number=None))
            continue
        d = float(positions_at(traj, np.array([ts]), camera_offset_in)[0])
        seg = plan.segment_at(d)
        out.append(PositionedImage(file=name, timestamp=ts, distance_in=d,
                                   segment_number=seg.number if seg else None))
    return out


def scan_points_recentered(lidar_t: np.ndarray, lidar_theta: np.ndarray,
                           lidar_r: np.ndarray, traj: Trajectory,
                           lidar_along_in: float,
                           radial_offset: tuple[float, float],
                           range_cal: RangeCalibration = RangeCalibration(),
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All LiDAR points calibrated, re-centered, and located along the
    pipe: returns (z_cm, theta, r_cm) in the pipe-center frame."""
    t0, t1 = traj.span()
    keep = (lidar_t >= t0) & (lidar_t <= t1)
    t = lidar_t[keep]
    r_corr = apply_range_calibration(lidar_r[keep], range_cal)
    r0, theta0 = radial_offset
    theta_c, r_c = recenter_points(lidar_theta[keep], r_corr, r0, theta0)
    z_in = positions_at(traj, t, lidar_along_in)
    return in_to_cm(z_in), theta_c, r_c


# --- artifact renderers -------------------------------------------------

def heatmap_png(hm: SurfaceHeatmap, deviation: bool = False,
                scale_cm: float = 4.0) -> bytes:
    """Render the grid as a PNG, z on x and theta on y: grayscale absolute
    radius, or blue-white-red deviation from nominal. Unoccupied cells are
    black. Deterministic bytes for identical grids."""
    from PIL import Image

    n_th, n_z = hm.radius_cm.shape
    rgb = np.zeros((n_th, n_z, 3), dtype=np.uint8)
    occ = hm.occupied
    if deviation:
        dev = np.clip((hm.radius_cm - hm.nominal_radius_cm) / scale_cm, -1, 1)
        pos = np.clip(dev, 0, 1)
        neg = np.clip(-dev, 0, 1)
        rgb[..., 0] = np.where(occ, 255 * (1 - neg), 0).astype(np.uint8)
        rgb[..., 1] = np.where(occ, 255 * (1 - np.abs(dev)), 0).astype(np.uint8)
        rgb[..., 2] = np.where(occ, 255 * (1 - pos), 0).astype(np.uint8)
    else:
        lo = hm.nominal_radius_cm - scale_cm
        hi = hm.nominal_radius_cm + scale_cm
        norm = np.clip((hm.radius_cm - lo) / (hi - lo), 0, 1)
        gray = np.where(occ, (norm * 255), 0).astype(np.uint8)
        rgb[..., 0] = rgb[..., 1] = rgb[..., 2] = gray
    img = Image.fromarray(rgb[::-1], mode="RGB")  # theta increases upward
    upscale = max(1, 256 // max(n_th, 1))
    if upscale > 1:
        img = img.resize((n_z * upscale, n_th * upscale), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def mesh_off(mesh: SurfaceMesh, nominal_radius_cm: float) -> str:
    """OFF text of the unwrapped relief: x along the pipe, y the unwrapped
    arc length theta * R_nominal, z the wall radius."""
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    for z, th, r in mesh.vertices:
        lines.append(f"{float(z)!r} {float(th * nominal_radius_cm)!r} {float(r)!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    return "\n".join(lines) + "\n"
