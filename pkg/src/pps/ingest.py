"""Run-bundle parsing, packing, batch identity, and validation.

A run bundle is a zip holding manifest.json, request.json, odometry.csv
(t,dx,sigma), spectra.csv (t,live_time,ch0..chN-1 with counts accumulated
over the run), qc_pre.csv / qc_post.csv (one spectrum row each with its
acquisition live time), lidar.csv (t,theta,r), images.csv (t,file) and
images/NNNN.png. All CSVs carry a header row, UTF-8, '.' decimal.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np


class IngestError(Exception):
    """Base class for structural bundle failures."""


class MissingStream(IngestError):
    def __init__(self, stream: str):
        self.stream = stream
        super().__init__(f"required stream missing from bundle: {stream}")


class MalformedRow(IngestError):
    def __init__(self, stream: str, line: int, column: int, detail: str):
        self.stream, self.line, self.column = stream, line, column
        super().__init__(f"{stream}: line {line}, column {column}: {detail}")


class NonMonotonicTime(IngestError):
    def __init__(self, stream: str, index: int):
        self.stream, self.index = stream, index
        super().__init__(f"{stream}: timestamp at row {index} not increasing")


class DecreasingAccumulation(IngestError):
    def __init__(self, row: int, channel: int):
        self.row, self.channel = row, channel
        super().__init__(
            f"accumulated counts decreased at row {row}, channel {channel}")


class EmptyRobotId(IngestError):
    pass


@dataclass(frozen=True)
class EnergyCal:
    """keV = a + b * channel."""
    a_kev: float
    b_kev_per_ch: float

    def channel_energy(self, channels) -> np.ndarray:
        return self.a_kev + self.b_kev_per_ch * np.asarray(channels, dtype=float)


@dataclass(frozen=True)
class Manifest:
    robot_id: str
    fov_length_in: float
    pipe_diameter_in: float
    start_time: datetime
    channel_count: int
    energy_cal: EnergyCal
    qc_live_time_s: float = 60.0
    robot_qc: dict | None = None


@dataclass(frozen=True)
class MeasurementRequest:
    job_id: str
    building: str
    unit: str
    cell: str
    pipe_item_id: str
    expected_length_ft: float
    operator_notes: str = ""
    nearest_column_id: str = ""


@dataclass
class SpectraStream:
    """Accumulated spectra polled over the run: counts are cumulative per
    channel, live_time is the cumulative detector live clock."""
    t: np.ndarray
    live_time: np.ndarray
    counts: np.ndarray  # (polls, channels) int64


@dataclass
class QcSpectrumRecord:
    t: float
    live_time: float
    counts: np.ndarray  # (channels,) int64


@dataclass
class RunBundle:
    manifest: Manifest
    request: MeasurementRequest
    odometry_t: np.ndarray
    odometry_dx: np.ndarray
    odometry_sigma: np.ndarray
    spectra: SpectraStream
    qc_pre: QcSpectrumRecord | None
    qc_post: QcSpectrumRecord | None
    lidar_t: np.ndarray
    lidar_theta: np.ndarray
    lidar_r: np.ndarray
    images: list[tuple[float, str]]
    image_data: dict[str, bytes] = field(default_factory=dict)

    def time_span(self) -> tuple[float, float]:
        t0 = min(self.odometry_t[0], self.spectra.t[0])
        t1 = max(self.odometry_t[-1], self.spectra.t[-1])
        return float(t0), float(t1)


@dataclass(frozen=True)
class BatchId:
    robot_id: str
    start_time: datetime

    def __str__(self) -> str:
        return f"{self.robot_id}-{self.start_time.astimezone(timezone.utc):%Y%m%dT%H%M%S}Z"


def make_batch_id(robot_id: str, start_time: datetime) -> BatchId:
    """Batch identity is a deterministic function of robot and start time,
    rendered ROBOTID-YYYYMMDDThhmmssZ (truncated to whole seconds)."""
    if not robot_id:
        raise EmptyRobotId("robot_id must be non-empty")
    if start_time.tzinfo is None:
        start_time = start_time.replace(tzinfo=timezone.utc)
    return BatchId(robot_id=robot_id, start_time=start_time)


@dataclass(frozen=True)
class IngestIssue:
    severity: str  # warning | fatal
    code: str
    message: str
    stream: str

    @property
    def fatal(self) -> bool:
        return self.severity == "fatal"


_REQUIRED = ("manifest.json", "request.json", "odometry.csv", "spectra.csv")


def _parse_float(stream: str, line: int, col: int, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise MalformedRow(stream, line, col, f"not a number: {raw!r}")


def _load_table(stream: str, text: str, n_cols: int) -> np.ndarray:
    """Parse a numeric CSV body (header already stripped off by caller is
    not required; the first line is always treated as the header)."""
    lines = text.splitlines()
    if not lines:
        raise MalformedRow(stream, 1, 1, "empty file")
    body = lines[1:]
    try:
        arr = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", ndmin=2)
    except ValueError:
        # slow path: locate the offending cell for the error message
        for i, row in enumerate(body, start=2):
            cells = row.split(",")
            if len(cells) != n_cols:
                raise MalformedRow(stream, i, len(cells),
                                   f"expected {n_cols} columns, got {len(cells)}")
            for j, cell in enumerate(cells, start=1):
                _parse_float(stream, i, j, cell)
        raise MalformedRow(stream, 1, 1, "unparseable numeric table")
    if arr.size == 0:
        raise MalformedRow(stream, 2, 1, "no data rows")
    if arr.shape[1] != n_cols:
        raise MalformedRow(stream, 2, arr.shape[1],
                           f"expected {n_cols} columns, got {arr.shape[1]}")
    return arr


def _check_strictly_increasing(stream: str, t: np.ndarray) -> None:
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise NonMonotonicTime(stream, int(bad[0]) + 1)


def _parse_spectra_table(stream: str, text: str, channels: int):
    arr = _load_table(stream, text, 2 + channels)
    t = arr[:, 0]
    live = arr[:, 1]
    counts = arr[:, 2:]
    if np.any(counts < 0) or np.any(counts != np.floor(counts)):
        i, j = np.argwhere((counts < 0) | (counts != np.floor(counts)))[0]
        raise MalformedRow(stream, int(i) + 2, int(j) + 3,
                           "counts must be non-negative integers")
    return t, live, counts.astype(np.int64)


def _parse_manifest(raw: dict) -> Manifest:
    cal = raw.get("energy_cal", {})
    start = datetime.fromisoformat(str(raw["start_time"]).replace("Z", "+00:00"))
    if start.tzinfo is None:
        start = start.replace(tzinfo=timezone.utc)
    return Manifest(
        robot_id=str(raw["robot_id"]),
        fov_length_in=float(raw["fov_length_in"]),
        pipe_diameter_in=float(raw["pipe_diameter_in"]),
        start_time=start,
        channel_count=int(raw.get("channel_count", 1024)),
        energy_cal=EnergyCal(a_kev=float(cal.get("a_kev", 0.0)),
                             b_kev_per_ch=float(cal.get("b_kev_per_ch", 0.3))),
        qc_live_time_s=float(raw.get("qc_live_time_s", 60.0)),
        robot_qc=raw.get("robot_qc"),
    )


def unpack_run_bundle(data: bytes) -> RunBundle:
    """Parse a bundle zip into validated in-memory records.

    Images are referenced (and their bytes carried opaque), never decoded.
    Missing optional streams (QC spectra, LiDAR, images) parse to None /
    empty; validate_bundle decides whether that blocks processing.
    """
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise MalformedRow("bundle", 0, 0, f"not a zip archive: {exc}")
    names = set(zf.namelist())
    for required in _REQUIRED:
        if required not in names:
            raise MissingStream(required)

    manifest = _parse_manifest(json.loads(zf.read("manifest.json")))
    request = MeasurementRequest(**json.loads(zf.read("request.json")))
    channels = manifest.channel_count

    odo = _load_table("odometry.csv", zf.read("odometry.csv").decode(), 3)
    _check_strictly_increasing("odometry.csv", odo[:, 0])

    t, live, counts = _parse_spectra_table(
        "spectra.csv", zf.read("spectra.csv").decode(), channels)
    _check_strictly_increasing("spectra.csv", t)
    if np.any(np.diff(live) < 0):
        idx = int(np.nonzero(np.diff(live) < 0)[0][0]) + 1
        raise MalformedRow("spectra.csv", idx + 2, 2,
                           "cumulative live time decreased")
    dec = np.argwhere(np.diff(counts, axis=0) < 0)
    if dec.size:
        raise DecreasingAccumulation(int(dec[0, 0]) + 1, int(dec[0, 1]))

    def qc_record(name: str) -> QcSpectrumRecord | None:
        if name not in names:
            return None
        qt, qlive, qcounts = _parse_spectra_table(name, zf.read(name).decode(),
                                                  channels)
        return QcSpectrumRecord(t=float(qt[0]), live_time=float(qlive[0]),
                                counts=qcounts[0])

    qc_pre = qc_record("qc_pre.csv")
    qc_post = qc_record("qc_post.csv")

    if "lidar.csv" in names:
        lid = _load_table("lidar.csv", zf.read("lidar.csv").decode(), 3)
        if np.any(np.diff(lid[:, 0]) < 0):
            raise NonMonotonicTime("lidar.csv",
                                   int(np.nonzero(np.diff(lid[:, 0]) < 0)[0][0]) + 1)
        lidar_t, lidar_theta, lidar_r = lid[:, 0], lid[:, 1], lid[:, 2]
    else:
        lidar_t = lidar_theta = lidar_r = np.empty(0)

    images: list[tuple[float, str]] = []
    image_data: dict[str, bytes] = {}
    if "images.csv" in names:
        lines = zf.read("images.csv").decode().splitlines()[1:]
        prev_t = None
        for i, row in enumerate(lines, start=2):
            cells = row.split(",")
            if len(cells) != 2:
                raise MalformedRow("images.csv", i, len(cells),
                                   "expected 2 columns")
            it = _parse_float("images.csv", i, 1, cells[0])
            if prev_t is not None and it <= prev_t:
                raise NonMonotonicTime("images.csv", i - 1)
            prev_t = it
            fname = cells[1].strip()
            images.append((it, fname))
            member = f"images/{fname}"
            if member in names:
                image_data[fname] = zf.read(member)

    return RunBundle(
        manifest=manifest, request=request,
        odometry_t=odo[:, 0], odometry_dx=odo[:, 1], odometry_sigma=odo[:, 2],
        spectra=SpectraStream(t=t, live_time=live, counts=counts),
        qc_pre=qc_pre, qc_post=qc_post,
        lidar_t=lidar_t, lidar_theta=lidar_theta, lidar_r=lidar_r,
        images=images, image_data=image_data,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def pack_run_bundle(bundle: RunBundle) -> bytes:
    """Write a bundle back to the documented zip layout.

    Output is canonical: fixed member order, fixed zip timestamps, floats
    rendered with shortest round-trip precision, so identical records
    always produce identical bytes.
    """
    buf = io.BytesIO()
    m = bundle.manifest
    manifest_json = {
        "robot_id": m.robot_id,
        "fov_length_in": m.fov_length_in,
        "pipe_diameter_in": m.pipe_diameter_in,
        "start_time": m.start_time.astimezone(timezone.utc)
                       .strftime("%Y-%m-%dT%H:%M:%SZ"),
        "channel_count": m.channel_count,
        "energy_cal": {"a_kev": m.energy_cal.a_kev,
                       "b_kev_per_ch": m.energy_cal.b_kev_per_ch},
        "qc_live_time_s": m.qc_live_time_s,
    }
    if m.robot_qc is not None:
        manifest_json["robot_qc"] = m.robot_qc

    def csv_spectra(t, live, counts) -> str:
        channels = counts.shape[1] if counts.ndim == 2 else counts.shape[0]
        header = "t,live_time," + ",".join(f"ch{i}" for i in range(channels))
        rows = [header]
        t2 = np.atleast_1d(t)
        live2 = np.atleast_1d(live)
        counts2 = np.atleast_2d(counts)
        for i in range(len(t2)):
            rows.append(_fmt(t2[i]) + "," + _fmt(live2[i]) + "," +
                        ",".join(str(int(c)) for c in counts2[i]))
        return "\n".join(rows) + "\n"

    members: list[tuple[str, bytes]] = []
    members.append(("manifest.json",
                    json.dumps(manifest_json, indent=1, sort_keys=True).encode()))
    members.append(("request.json",
                    json.dumps(bundle.request.__dict__, indent=1,
                               sort_keys=True).encode()))
    odo_rows = ["t,dx,sigma"] + [
        f"{_fmt(t)},{_fmt(dx)},{_fmt(s)}"
        for t, dx, s in zip(bundle.odometry_t, bundle.odometry_dx,
                            bundle.odometry_sigma)]
    members.append(("odometry.csv", ("\n".join(odo_rows) + "\n").encode()))
    members.append(("spectra.csv", csv_spectra(
        bundle.spectra.t, bundle.spectra.live_time, bundle.spectra.counts).encode()))
    for name, rec in (("qc_pre.csv", bundle.qc_pre),
                      ("qc_post.csv", bundle.qc_post)):
        if rec is not None:
            members.append((name, csv_spectra(
                np.array([rec.t]), np.array([rec.live_time]),
                rec.counts[None, :]).encode()))
    if len(bundle.lidar_t):
        rows = ["t,theta,r"] + [
            f"{_fmt(t)},{_fmt(th)},{_fmt(r)}"
            for t, th, r in zip(bundle.lidar_t, bundle.lidar_theta, bundle.lidar_r)]
        members.append(("lidar.csv", ("\n".join(rows) + "\n").encode()))
    if bundle.images:
        rows = ["t,file"] + [f"{_fmt(t)},{name}" for t, name in bundle.images]
        members.append(("images.csv", ("\n".join(rows) + "\n").encode()))
        for _, name in bundle.images:
            if name in bundle.image_data:
                members.append((f"images/{name}", bundle.image_data[name]))

    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, payload in members:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)
    return buf.getvalue()


def validate_bundle(bundle: RunBundle) -> list[IngestIssue]:
    """Cross-stream checks that do not block parsing. An empty result means
    the bundle is processable; any fatal issue must reject it upstream."""
    issues: list[IngestIssue] = []
    if bundle.qc_pre is None:
        issues.append(IngestIssue("fatal", "MISSING_PRE_QC",
                                  "pre-run QC spectrum absent", "qc_pre.csv"))
    if bundle.qc_post is None:
        issues.append(IngestIssue("fatal", "MISSING_POST_QC",
                                  "post-run QC spectrum absent", "qc_post.csv"))
    if int(round(bundle.manifest.pipe_diameter_in)) not in (30, 42):
        issues.append(IngestIssue(
            "fatal", "UNSUPPORTED_DIAMETER",
            f"pipe diameter {bundle.manifest.pipe_diameter_in} in is not 30 or 42",
            "manifest.json"))
    if not len(bundle.lidar_t):
        issues.append(IngestIssue("warning", "NO_LIDAR",
                                  "no LiDAR scans; surface models unavailable",
                                  "lidar.csv"))
    if not bundle.images:
        issues.append(IngestIssue("warning", "NO_IMAGES",
                                  "no images recorded", "images.csv"))
    t0, t1 = bundle.time_span()
    for it, name in bundle.images:
        if not (t0 <= it <= t1):
            issues.append(IngestIssue(
                "warning", "IMAGE_TIME_RANGE",
                f"image {name} timestamp {it} outside run span", "images.csv"))
    for it, name in bundle.images:
        if name not in bundle.image_data:
            issues.append(IngestIssue(
                "warning", "IMAGE_FILE_MISSING",
                f"image file {name} referenced but absent", "images.csv"))
    return issues
