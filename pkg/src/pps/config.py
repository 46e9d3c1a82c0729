"""Dataclass configuration for the processing pipeline.

Everything an analyst can change lives in ProcessingParameters; per-robot
calibration and institutional defaults live in the remaining dataclasses.
All values here are configuration, echoed verbatim into each analysis
revision so results stay reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path


@dataclass(frozen=True)
class RoiDefinition:
    """Energy windows for net-peak-area estimation.

    The peak window is center +/- peak_halfwidth; two side windows of
    side_window_width sit outside a symmetric gap on either flank.
    """

    center_kev: float
    peak_halfwidth_kev: float = 8.0
    gap_kev: float = 4.0
    side_window_kev: float = 8.0

    def peak_window(self) -> tuple[float, float]:
        return (self.center_kev - self.peak_halfwidth_kev,
                self.center_kev + self.peak_halfwidth_kev)

    def left_window(self) -> tuple[float, float]:
        lo = self.center_kev - self.peak_halfwidth_kev - self.gap_kev
        return (lo - self.side_window_kev, lo)

    def right_window(self) -> tuple[float, float]:
        hi = self.center_kev + self.peak_halfwidth_kev + self.gap_kev
        return (hi, hi + self.side_window_kev)

    def span(self) -> tuple[float, float]:
        return (self.left_window()[0], self.right_window()[1])


U235_ROI = RoiDefinition(center_kev=186.0)
AM241_ROI = RoiDefinition(center_kev=60.0)


@dataclass(frozen=True)
class CalibrationConstants:
    """Detector calibration and attenuation model constants.

    k_cal converts a net peak count rate into grams in the field of view.
    The deposit is modeled as a strip of effective width deposit_width_cm
    along the pipe; its areal density drives the slab self-attenuation
    factor. tau_max is the unmeasurable-lump threshold.
    """

    k_cal_g_per_cps: float = 0.002
    systematic_fraction: float = 0.05
    mu_eff_cm2_per_g: dict[str, float] = field(
        default_factory=lambda: {"uo2f2": 1.2, "tacky_mat": 1.5})
    deposit_width_cm: float = 10.0
    tau_max_g_per_cm2: float = 0.05
    calibration_id: str = "CAL-DEFAULT"
    calibration_date: str = "2018-06-01"
    calibration_valid_days: int = 365
    tmu_coverage_factor: float = 2.0

    def mu_for(self, material: str) -> float:
        try:
            return self.mu_eff_cm2_per_g[material]
        except KeyError:
            raise KeyError(f"no attenuation constants for material {material!r}")


@dataclass(frozen=True)
class QcBounds:
    """Acceptance bounds for check-source peak metrics."""

    fwhm_kev: tuple[float, float] = (2.0, 9.0)
    centroid_kev: tuple[float, float] = (57.0, 63.0)
    efficiency_cps: tuple[float, float] = (50.0, 400.0)
    min_gross_counts: float = 200.0


@dataclass(frozen=True)
class FullPipeBounds:
    """Bounds for the whole-run 186 keV drift/defocus check."""

    fwhm_kev: tuple[float, float] = (2.0, 12.0)
    centroid_kev: tuple[float, float] = (181.0, 191.0)


@dataclass(frozen=True)
class SensorOffsets:
    """Along-pipe offsets of each sensor from the robot datum (inches) and
    the LiDAR radial mount offset (cm, robot frame with theta=0 at pipe
    bottom). The radial offset depends on pipe diameter: the sensor sits
    9 cm above center in the 30-inch configuration and 7 cm below center
    in the 42-inch configuration.
    """

    detector_fov_center_in: float = 0.0
    camera_view_in: float = 6.0
    lidar_along_in: float = 0.0

    @staticmethod
    def lidar_radial(pipe_diameter_in: float) -> tuple[float, float]:
        import math
        if int(round(pipe_diameter_in)) == 30:
            return (9.0, math.pi)   # above center
        if int(round(pipe_diameter_in)) == 42:
            return (7.0, 0.0)       # below center
        raise ValueError(f"unsupported pipe diameter {pipe_diameter_in}")


@dataclass(frozen=True)
class TrajectorySolverConfig:
    """Anchor factors and defaults for the 1-D trajectory least squares."""

    sigma_start_in: float = 1e-3
    sigma_closure_in: float = 1.0
    sigma_dwell_in: float = 0.01
    sigma_odom_default_in: float = 0.02
    dwell_dx_threshold_in: float = 0.01
    dwell_min_duration_s: float = 10.0
    entrance_offset_in: float = 0.0
    closure_warn_in: float = 2.0


@dataclass(frozen=True)
class GeometryConfig:
    """Heatmap grid and deviation-flag thresholds."""

    cell_z_cm: float = 1.0
    cell_theta_deg: float = 1.0
    fill_radius_cells: int = 3
    deviation_threshold_cm: float = 2.0
    deviation_fraction: float = 0.05


@dataclass(frozen=True)
class ReplicateThresholds:
    rpd_percent: float = 25.0
    sigma_factor: float = 2.0


@dataclass(frozen=True)
class ContaminationThresholds:
    sigma_factor: float = 3.0
    floor_g: float = 0.05


@dataclass
class ProcessingParameters:
    """Analyst-editable inputs to one analysis revision.

    window_length_in None means "use the calibrated FOV length from the
    bundle manifest".
    """

    window_length_in: float | None = None
    material: str = "uo2f2"
    u235_roi: RoiDefinition = U235_ROI
    am241_roi: RoiDefinition = AM241_ROI
    qc_bounds: QcBounds = QcBounds()
    full_pipe_bounds: FullPipeBounds = FullPipeBounds()
    geometry: GeometryConfig = GeometryConfig()
    replicate: ReplicateThresholds = ReplicateThresholds()
    contamination: ContaminationThresholds = ContaminationThresholds()
    solver: TrajectorySolverConfig = TrajectorySolverConfig()
    ncs_threshold_g: float = 100.0
    notes: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def apply_overrides(self, overrides: dict) -> "ProcessingParameters":
        """Return a copy with dotted-key overrides applied, e.g.
        {"material": "tacky_mat", "replicate.rpd_percent": 20}."""
        data = asdict(self)
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            if parts[-1] not in node:
                raise KeyError(f"unknown parameter {key!r}")
            node[parts[-1]] = value
        return parameters_from_dict(data)


def _roi_from(d: dict) -> RoiDefinition:
    return RoiDefinition(**d)


def parameters_from_dict(data: dict) -> ProcessingParameters:
    merged = asdict(ProcessingParameters())
    merged.update(data)
    merged["u235_roi"] = _roi_from(merged["u235_roi"])
    merged["am241_roi"] = _roi_from(merged["am241_roi"])
    for key, cls in (("qc_bounds", QcBounds),
                     ("full_pipe_bounds", FullPipeBounds),
                     ("geometry", GeometryConfig),
                     ("replicate", ReplicateThresholds),
                     ("contamination", ContaminationThresholds),
                     ("solver", TrajectorySolverConfig)):
        sub = dict(merged[key]) if isinstance(merged[key], dict) else \
            asdict(merged[key])
        for name, value in sub.items():
            if isinstance(value, list):
                sub[name] = tuple(value)
        merged[key] = cls(**sub)
    return ProcessingParameters(**merged)


def parameters_from_json(text: str) -> ProcessingParameters:
    return parameters_from_dict(json.loads(text))


@dataclass(frozen=True)
class ServiceConfig:
    """Server-side configuration: archive location, calibration, sensor
    offsets, and the static token -> (user, role) map."""

    archive_root: str = "./pps-archive"
    calibration: CalibrationConstants = CalibrationConstants()
    offsets: SensorOffsets = SensorOffsets()
    tokens: dict[str, tuple[str, str, str]] = field(default_factory=lambda: {
        # token: (user id, display name, role)
        "tech-token": ("tech1", "Test Technician", "technician"),
        "analyst-token": ("ana1", "Test Analyst", "analyst"),
        "pm-token": ("pm1", "Test Program Manager", "program_manager"),
    })

    @staticmethod
    def load(path: str | Path) -> "ServiceConfig":
        raw = json.loads(Path(path).read_text())
        cal = CalibrationConstants(**raw.get("calibration", {}))
        off_raw = dict(raw.get("offsets", {}))
        offsets = SensorOffsets(**off_raw)
        tokens = {t: tuple(v) for t, v in raw.get("tokens", {}).items()} \
            or ServiceConfig().tokens
        return ServiceConfig(archive_root=raw.get("archive_root", "./pps-archive"),
                             calibration=cal, offsets=offsets, tokens=tokens)
