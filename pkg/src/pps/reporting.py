"""Report document assembly and deterministic rendering.

Reports are built from stored revision results only (nothing is
recomputed) and render to byte-identical HTML for identical documents:
fixed section order, fixed float formats (three decimals for grams, one
for feet), and no wall-clock timestamps beyond the document data itself.
"""

from __future__ import annotations

import csv
import html
import io
from dataclasses import dataclass, field
from datetime import datetime, timezone


class ReportingError(Exception):
    pass


class NotProcessed(ReportingError):
    pass


class NotApproved(ReportingError):
    pass


REJECTED_TEXT = "REJECTED"


def fmt_g(x: float | None) -> str:
    return "" if x is None else f"{x:.3f}"


def fmt_ft(x: float | None) -> str:
    return "" if x is None else f"{x:.1f}"


def fmt_kev(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def fmt_pct(x: float | None) -> str:
    return "" if x is None else f"{x:.1f}"


def fmt_epoch(t: float | None) -> str:
    if t is None:
        return ""
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ")


@dataclass
class NdaRow:
    segment_number: int
    start_ft: float
    end_ft: float
    status: str
    u235_g: float | None
    tmu_g: float | None
    mda_g: float | None
    density_g_per_ft: float | None
    attenuation_factor: float | None
    lump_flagged: bool


@dataclass
class NcsRow:
    segment_number: int
    u235_g: float | None
    below_threshold: bool | None
    threshold_g: float
    status: str


@dataclass
class ReportDocument:
    batch_id: str
    draft: bool
    state: str
    cover: dict
    toc: list[str]
    operational: list[tuple[str, str]]
    batch_data: list[tuple[str, str]]
    technical_review: list[tuple[str, str]]
    nda_rows: list[NdaRow]
    segment_comments: list[dict]
    batch_comments: list[dict]
    replicate: dict
    qc_trend: list[dict]
    qc_pre_post: dict
    exhibits: list[dict]
    flags: list[dict] = field(default_factory=list)
    plan_notes: list[str] = field(default_factory=list)


_SECTIONS = [
    "Operational Parameters",
    "Batch Data Report",
    "Technical Review",
    "NDA Measurement Data Report",
    "Segment Comments",
    "Batch Comments",
    "Replicate Check",
    "QC Trend",
    "Pre/Post-Run QC",
    "Supplementary Exhibits",
]


def _segment_value(seg: dict) -> dict | None:
    """Pick the reported per-segment numbers: the forward/reverse average
    when the replicate check allowed one, else nothing."""
    data = seg.get("data", {})
    return data.get("averaged")


def build_nda_rows(view: dict) -> list[NdaRow]:
    rows = []
    for seg in view["segments"]:
        data = seg.get("data", {})
        avg = _segment_value(seg)
        rejected = seg["status"] == "rejected"
        if rejected or avg is None:
            rows.append(NdaRow(
                segment_number=seg["number"],
                start_ft=seg["start_in"] / 12.0, end_ft=seg["end_in"] / 12.0,
                status=REJECTED_TEXT if rejected else seg["status"],
                u235_g=None, tmu_g=None, mda_g=None, density_g_per_ft=None,
                attenuation_factor=None,
                lump_flagged=bool((data.get("forward") or {}).get(
                    "lump_flagged"))))
            continue
        rows.append(NdaRow(
            segment_number=seg["number"],
            start_ft=seg["start_in"] / 12.0, end_ft=seg["end_in"] / 12.0,
            status=seg["status"],
            u235_g=avg["mass_g"], tmu_g=avg["tmu_g"], mda_g=avg["mda_g"],
            density_g_per_ft=avg["density_g_per_ft"],
            attenuation_factor=avg["attenuation_factor"],
            lump_flagged=avg["lump_flagged"]))
    return rows


def build_report(view: dict, qc_trend: list[dict], draft: bool,
                 ) -> ReportDocument:
    """Assemble the report document from a stored batch view. Final (non
    draft) reports require the batch to be APPROVED."""
    if view["revision"] < 1:
        raise NotProcessed(f"batch {view['id']} has no analysis revision")
    if not draft and view["state"] != "APPROVED":
        raise NotApproved("final reports require an approved batch")
    results = view["results"]
    manifest = view["manifest"]
    request = view["request"]
    traj = results.get("trajectory", {})
    cal = results.get("calibration", {})

    cover = {
        "batch_id": view["id"],
        "pipe_item_id": request.get("pipe_item_id", ""),
        "job_id": request.get("job_id", ""),
        "building": request.get("building", ""),
        "unit": request.get("unit", ""),
        "cell": request.get("cell", ""),
        "robot_id": view["robot_id"],
        "measured_on": view["start_time"],
        "state": view["state"],
        "revision": view["revision"],
        "approved_by": view.get("approved_by_name") or view.get("approved_by"),
        "approved_at": fmt_epoch(view.get("approved_at")),
    }
    speed = traj.get("average_forward_speed_in_s")
    operational = [
        ("Distance measured (ft)", fmt_ft((traj.get("max_position_in") or 0)
                                          / 12.0)),
        ("Average driving speed (in/s)",
         "" if speed is None else f"{speed:.2f}"),
        ("Run duration (s)", f"{traj.get('duration_s', 0):.1f}"),
        ("Moving-window length (in)",
         fmt_ft(results.get("window_length_in"))),
        ("Detector FOV length (in)", fmt_ft(results.get("fov_length_in"))),
        ("Attenuation material", results.get("material", "")),
        ("Expected length (ft)", fmt_ft(request.get("expected_length_ft"))),
        ("Operator notes", request.get("operator_notes", "")),
        ("Nearest column", request.get("nearest_column_id", "")),
    ]
    batch_data = [
        ("Batch", view["id"]),
        ("Robot", view["robot_id"]),
        ("Measurement start", view["start_time"]),
        ("Calibration file", cal.get("id", "")),
        ("Calibration date", cal.get("date", "")),
        ("Channel count", str(manifest.get("channel_count", ""))),
        ("Energy calibration (keV)",
         f"{manifest.get('energy_cal', {}).get('a_kev', 0)} + "
         f"{manifest.get('energy_cal', {}).get('b_kev_per_ch', 0)} x channel"),
        ("Analysis revision", str(view["revision"])),
    ]

    qc_block = results.get("qc", {})
    rep = results.get("replicate", {})
    open_flags = [f for f in view["flags"] if f["status"] == "open"]
    cleared_flags = [f for f in view["flags"] if f["status"] == "cleared"]

    def yn(value) -> str:
        if value is None:
            return "n/a"
        return "yes" if value else "NO"

    technical_review = [
        ("Pre-run QC acceptable",
         yn(qc_block.get("pre", {}).get("overall_pass"))),
        ("Post-run QC acceptable",
         yn(qc_block.get("post", {}).get("overall_pass"))),
        ("Contamination check acceptable",
         yn(qc_block.get("contamination", {}).get("passed"))),
        ("Full-pipe spectrum acceptable",
         yn(qc_block.get("full_pipe", {}).get("overall_pass"))),
        ("Replicate check acceptable", yn(rep.get("passed"))),
        ("Calibration current", yn(cal.get("current"))),
        ("Flags thrown", f"{len(view['flags'])} "
                         f"({len(open_flags)} open, {len(cleared_flags)}"
                         " cleared)"),
        ("Batch state", view["state"]),
    ]
    if view["state"] == "APPROVED":
        technical_review.append(
            ("Approved by", f"{cover['approved_by']} at "
                            f"{cover['approved_at']}"))

    segment_comments = [c for c in view["comments"] if c["scope"] == "segment"]
    batch_comments = [c for c in view["comments"] if c["scope"] == "batch"]

    exhibits = []
    artifacts = view.get("artifacts", {})
    for seg in view["segments"]:
        images = seg.get("data", {}).get("images", [])
        exhibits.append({
            "segment_number": seg["number"],
            "heatmap": artifacts.get(f"heatmap_seg{seg['number']}.png"),
            "heatmap_dev": artifacts.get(f"heatmap_dev_seg{seg['number']}.png"),
            "mesh": artifacts.get(f"mesh_seg{seg['number']}.off"),
            "spectrum": artifacts.get(f"spectrum_seg{seg['number']}.csv"),
            "curve": artifacts.get("mass_curve_fwd.csv"),
            "images": [artifacts.get(f"images/{f}") for f in images
                       if artifacts.get(f"images/{f}")],
        })

    return ReportDocument(
        batch_id=view["id"], draft=draft, state=view["state"],
        cover=cover, toc=list(_SECTIONS), operational=operational,
        batch_data=batch_data, technical_review=technical_review,
        nda_rows=build_nda_rows(view),
        segment_comments=segment_comments, batch_comments=batch_comments,
        replicate=rep, qc_trend=qc_trend, qc_pre_post=qc_block,
        exhibits=exhibits, flags=view["flags"],
        plan_notes=results.get("plan_notes", []))


_CSS = """
body { font-family: Georgia, serif; margin: 2em; color: #111; }
h1 { font-size: 1.6em; border-bottom: 2px solid #333; }
h2 { font-size: 1.2em; margin-top: 1.6em; border-bottom: 1px solid #999; }
table { border-collapse: collapse; margin: 0.6em 0; }
th, td { border: 1px solid #666; padding: 0.25em 0.6em; text-align: right; }
th { background: #e8e8e8; }
td.t, th.t { text-align: left; }
.watermark { color: #b00; font-size: 2.4em; font-weight: bold;
  letter-spacing: 0.4em; text-align: center; margin: 0.4em; }
.fail { color: #b00; font-weight: bold; }
.page { page-break-after: always; }
"""


def _esc(x) -> str:
    return html.escape(str(x))


def _kv_table(rows: list[tuple[str, str]]) -> list[str]:
    out = ["<table>"]
    for k, v in rows:
        val = _esc(v)
        if v == "NO":
            val = f'<span class="fail">{val}</span>'
        out.append(f'<tr><th class="t">{_esc(k)}</th><td class="t">{val}</td></tr>')
    out.append("</table>")
    return out


def render_report(doc: ReportDocument) -> bytes:
    """Pure document -> HTML bytes; identical documents render to
    identical bytes."""
    w = ["<!DOCTYPE html>", "<html><head><meta charset=\"utf-8\">",
         f"<title>NDA Measurement Report {_esc(doc.batch_id)}</title>",
         f"<style>{_CSS}</style></head><body>"]
    if doc.draft:
        w.append('<div class="watermark">DRAFT</div>')
    w.append(f"<h1>NDA Measurement Report</h1>")
    w.append('<div class="page">')
    w.extend(_kv_table([
        ("Batch", doc.cover["batch_id"]),
        ("Pipe item", doc.cover["pipe_item_id"]),
        ("Job", doc.cover["job_id"]),
        ("Location", f"{doc.cover['building']} / {doc.cover['unit']} / "
                     f"{doc.cover['cell']}"),
        ("Robot", doc.cover["robot_id"]),
        ("Measured on", doc.cover["measured_on"]),
        ("Analysis revision", str(doc.cover["revision"])),
        ("Batch state", doc.cover["state"]),
    ] + ([("Approved by", doc.cover["approved_by"] or ""),
          ("Approved at", doc.cover["approved_at"])]
         if doc.state == "APPROVED" else [])))
    w.append("<h2>Table of Contents</h2><ol>")
    for s in doc.toc:
        w.append(f"<li>{_esc(s)}</li>")
    w.append("</ol></div>")

    w.append('<div class="page"><h2>Operational Parameters</h2>')
    w.extend(_kv_table(doc.operational))
    w.append("</div>")

    w.append('<div class="page"><h2>Batch Data Report</h2>')
    w.extend(_kv_table(doc.batch_data))
    w.append("</div>")

    w.append('<div class="page"><h2>Technical Review</h2>')
    w.extend(_kv_table(doc.technical_review))
    if doc.flags:
        w.append("<h3>Flags</h3><table><tr><th class='t'>Flag</th>"
                 "<th class='t'>Scope</th><th class='t'>Status</th>"
                 "<th class='t'>Justification</th></tr>")
        for f in doc.flags:
            scope = f["scope"] if f["scope"] == "batch" else \
                f"segment {f['segment']}"
            w.append(f"<tr><td class='t'>{_esc(f['code'])}</td>"
                     f"<td class='t'>{_esc(scope)}</td>"
                     f"<td class='t'>{_esc(f['status'])}</td>"
                     f"<td class='t'>{_esc(f.get('clear_comment') or '')}"
                     f"</td></tr>")
        w.append("</table>")
    if doc.plan_notes:
        w.append("<h3>Segmentation Notes</h3><ul>")
        for n in doc.plan_notes:
            w.append(f"<li>{_esc(n)}</li>")
        w.append("</ul>")
    w.append("</div>")

    w.append('<div class="page"><h2>NDA Measurement Data Report</h2>')
    w.append("<table><tr><th>Segment</th><th>Start (ft)</th><th>End (ft)</th>"
             "<th>U-235 (g)</th><th>TMU (g)</th><th>MDA (g)</th>"
             "<th>Density (g/ft)</th><th>Atten. factor</th>"
             "<th class='t'>Status</th></tr>")
    for r in doc.nda_rows:
        if r.status == REJECTED_TEXT:
            w.append(f"<tr><td>{r.segment_number}</td>"
                     f"<td>{fmt_ft(r.start_ft)}</td><td>{fmt_ft(r.end_ft)}</td>"
                     + f"<td class='fail'>{REJECTED_TEXT}</td>" * 5
                     + f"<td class='t fail'>{REJECTED_TEXT}</td></tr>")
            continue
        af = "" if r.attenuation_factor is None else \
            f"{r.attenuation_factor:.4f}"
        status = r.status + (" (lump)" if r.lump_flagged else "")
        w.append(f"<tr><td>{r.segment_number}</td>"
                 f"<td>{fmt_ft(r.start_ft)}</td><td>{fmt_ft(r.end_ft)}</td>"
                 f"<td>{fmt_g(r.u235_g)}</td><td>{fmt_g(r.tmu_g)}</td>"
                 f"<td>{fmt_g(r.mda_g)}</td><td>{fmt_g(r.density_g_per_ft)}</td>"
                 f"<td>{af}</td><td class='t'>{_esc(status)}</td></tr>")
    total = sum(r.u235_g for r in doc.nda_rows if r.u235_g is not None)
    w.append(f"<tr><th class='t' colspan='3'>Total (non-rejected)</th>"
             f"<th>{fmt_g(total)}</th><th colspan='5'></th></tr>")
    w.append("</table></div>")

    def comments_section(title: str, comments: list[dict],
                         with_segment: bool) -> None:
        w.append(f'<div class="page"><h2>{title}</h2>')
        if not comments:
            w.append("<p>none</p>")
        else:
            header = "<th>Segment</th>" if with_segment else ""
            w.append(f"<table><tr>{header}<th class='t'>Author</th>"
                     "<th class='t'>When</th><th class='t'>Comment</th></tr>")
            for c in comments:
                seg_cell = f"<td>{c['segment']}</td>" if with_segment else ""
                w.append(f"<tr>{seg_cell}"
                         f"<td class='t'>{_esc(c['author_name'])}</td>"
                         f"<td class='t'>{fmt_epoch(c['created_at'])}</td>"
                         f"<td class='t'>{_esc(c['text'])}</td></tr>")
            w.append("</table>")
        w.append("</div>")

    comments_section("Segment Comments", doc.segment_comments, True)
    comments_section("Batch Comments", doc.batch_comments, False)

    w.append('<div class="page"><h2>Replicate Check</h2>')
    rep = doc.replicate or {}
    w.append("<table><tr><th class='t'>Check</th><th>Forward (g)</th>"
             "<th>Reverse (g)</th><th>RPD (%)</th><th>2-sigma bound (g)</th>"
             "<th class='t'>Result</th></tr>")
    for kind in ("total", "max"):
        r = rep.get(kind)
        if r is None:
            w.append(f"<tr><td class='t'>{kind}</td><td colspan='4'></td>"
                     "<td class='t'>n/a</td></tr>")
            continue
        label = kind if kind == "total" else \
            f"max (segment {r.get('segment_number')})"
        verdict = "pass" if r["passed"] else "FAIL"
        cls = "" if r["passed"] else " class='fail'"
        w.append(f"<tr><td class='t'>{_esc(label)}</td>"
                 f"<td>{fmt_g(r['forward_g'])}</td>"
                 f"<td>{fmt_g(r['reverse_g'])}</td>"
                 f"<td>{fmt_pct(r['rpd_percent'])}</td>"
                 f"<td>{fmt_g(r['two_sigma_bound_g'])}</td>"
                 f"<td class='t'{cls}>{verdict}</td></tr>")
    w.append("</table></div>")

    w.append('<div class="page"><h2>QC Trend</h2>')
    if not doc.qc_trend:
        w.append("<p>no prior entries</p>")
    else:
        w.append("<table><tr><th class='t'>Batch</th><th class='t'>Context"
                 "</th><th>Efficiency (cps)</th><th class='t'>Pass</th></tr>")
        for e in doc.qc_trend:
            w.append(f"<tr><td class='t'>{_esc(e['batch_id'])}</td>"
                     f"<td class='t'>{_esc(e['context'])}</td>"
                     f"<td>{fmt_kev(e['efficiency'])}</td>"
                     f"<td class='t'>{'yes' if e['passed'] else 'NO'}</td></tr>")
        w.append("</table>")
    w.append("</div>")

    w.append('<div class="page"><h2>Pre/Post-Run QC</h2>')
    w.append("<table><tr><th class='t'>Check</th><th>Centroid (keV)</th>"
             "<th>FWHM (keV)</th><th>Gross rate (cps)</th>"
             "<th class='t'>Pass</th><th class='t'>Note</th></tr>")
    for key in ("pre", "post", "full_pipe"):
        r = doc.qc_pre_post.get(key)
        if not r:
            continue
        w.append(f"<tr><td class='t'>{key}</td>"
                 f"<td>{fmt_kev(r.get('centroid_kev'))}</td>"
                 f"<td>{fmt_kev(r.get('fwhm_kev'))}</td>"
                 f"<td>{fmt_kev(r.get('gross_rate_cps'))}</td>"
                 f"<td class='t'>{'yes' if r.get('overall_pass') else 'NO'}"
                 f"</td><td class='t'>{_esc(r.get('note', ''))}</td></tr>")
    cont = doc.qc_pre_post.get("contamination")
    if cont:
        w.append(f"<tr><td class='t'>contamination</td>"
                 f"<td colspan='2'>delta {cont['delta_cps']:.3f} cps</td>"
                 f"<td>threshold {cont['threshold_cps']:.3f}</td>"
                 f"<td class='t'>{'yes' if cont['passed'] else 'NO'}</td>"
                 f"<td class='t'></td></tr>")
    w.append("</table></div>")

    w.append('<div class="page"><h2>Supplementary Exhibits</h2>')
    w.append("<table><tr><th>Segment</th><th class='t'>Surface model</th>"
             "<th class='t'>Spectrum</th><th class='t'>Mass curve</th>"
             "<th class='t'>Images</th></tr>")
    for e in doc.exhibits:
        surface = e["heatmap"] or ""
        w.append(f"<tr><td>{e['segment_number']}</td>"
                 f"<td class='t'>{_esc(surface)}</td>"
                 f"<td class='t'>{_esc(e['spectrum'] or '')}</td>"
                 f"<td class='t'>{_esc(e.get('curve') or '')}</td>"
                 f"<td class='t'>{_esc(', '.join(e['images']))}</td></tr>")
    w.append("</table>")
    w.append("<p>Exhibit identifiers refer to archived artifacts retrievable "
             "through the artifact endpoint.</p></div>")
    w.append("</body></html>")
    return ("\n".join(w) + "\n").encode("utf-8")


def build_ncs_table(view: dict, threshold_g: float) -> list[NcsRow]:
    """Criticality screening rows: below_threshold compares mass + TMU
    against the threshold (conservative); rejected segments carry the
    REJECTED status and no boolean."""
    if view["revision"] < 1:
        raise NotProcessed(f"batch {view['id']} has no analysis revision")
    rows = []
    for seg in view["segments"]:
        avg = _segment_value(seg)
        if seg["status"] == "rejected" or avg is None:
            rows.append(NcsRow(segment_number=seg["number"], u235_g=None,
                               below_threshold=None, threshold_g=threshold_g,
                               status=REJECTED_TEXT
                               if seg["status"] == "rejected" else "n/a"))
            continue
        below = (avg["mass_g"] + avg["tmu_g"]) < threshold_g
        rows.append(NcsRow(segment_number=seg["number"], u235_g=avg["mass_g"],
                           below_threshold=below, threshold_g=threshold_g,
                           status="reported"))
    return rows


def render_ncs(batch_id: str, rows: list[NcsRow]) -> bytes:
    w = ["<!DOCTYPE html>", "<html><head><meta charset=\"utf-8\">",
         f"<title>NCS Table {_esc(batch_id)}</title>",
         f"<style>{_CSS}</style></head><body>",
         f"<h1>NCS Segment Table</h1>",
         f"<p>Batch {_esc(batch_id)}</p>",
         "<table><tr><th>Segment</th><th>U-235 (g)</th>"
         "<th>Threshold (g)</th><th class='t'>Below threshold</th></tr>"]
    for r in rows:
        if r.status == REJECTED_TEXT:
            w.append(f"<tr><td>{r.segment_number}</td>"
                     f"<td class='fail'>{REJECTED_TEXT}</td>"
                     f"<td>{fmt_g(r.threshold_g)}</td>"
                     f"<td class='t fail'>{REJECTED_TEXT}</td></tr>")
            continue
        below = "yes" if r.below_threshold else "NO"
        cls = "" if r.below_threshold else " class='t fail'"
        if r.below_threshold:
            cls = " class='t'"
        w.append(f"<tr><td>{r.segment_number}</td><td>{fmt_g(r.u235_g)}</td>"
                 f"<td>{fmt_g(r.threshold_g)}</td><td{cls}>{below}</td></tr>")
    w.append("</table></body></html>")
    return ("\n".join(w) + "\n").encode("utf-8")


CONDA_COLUMNS = ["batch_id", "job_id", "building", "unit", "cell",
                 "pipe_item_id", "segment_number", "start_ft", "end_ft",
                 "u235_g", "tmu_g", "mda_g", "status", "measured_on",
                 "approved_by", "approved_on"]


def build_conda_export(view: dict) -> bytes:
    """Interface file for the site database: one row per segment, RFC 4180
    quoting, only producible from approved batches."""
    if view["state"] != "APPROVED":
        raise NotApproved("interface export requires an approved batch")
    request = view["request"]
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(CONDA_COLUMNS)
    approved_on = fmt_epoch(view.get("approved_at"))
    approver = view.get("approved_by") or ""
    for seg in view["segments"]:
        avg = _segment_value(seg)
        rejected = seg["status"] == "rejected"
        if rejected or avg is None:
            mass = tmu = mda = ""
            status = REJECTED_TEXT
        else:
            mass, tmu, mda = (fmt_g(avg["mass_g"]), fmt_g(avg["tmu_g"]),
                              fmt_g(avg["mda_g"]))
            status = "REPORTED"
        writer.writerow([
            view["id"], request.get("job_id", ""), request.get("building", ""),
            request.get("unit", ""), request.get("cell", ""),
            request.get("pipe_item_id", ""), seg["number"],
            fmt_ft(seg["start_in"] / 12.0), fmt_ft(seg["end_in"] / 12.0),
            mass, tmu, mda, status, view["start_time"], approver, approved_on])
    return buf.getvalue().encode("utf-8")
