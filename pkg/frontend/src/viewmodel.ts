// Pure view logic: server state in, UI state out. Button enablement
// derives strictly from the server-reported batch state and the user's
// role, never from local assumptions, so these functions are the contract
// the fixture tests pin down.

import type {
  BatchState,
  BatchSummary,
  Flag,
  QcTrendEntry,
  Role,
  SegmentRow,
} from "./types";

export interface ActionAvailability {
  canProcess: boolean;
  canEditParameters: boolean;
  canLock: boolean;
  lockDisabledReason: string | null;
  canApprove: boolean;
  canReturn: boolean;
  canClearFlags: boolean;
  canRejectSegments: boolean;
  canComment: boolean;
  showApproveButton: boolean;
  showReturnButton: boolean;
}

const MUTABLE_STATES: BatchState[] = ["UPLOADED", "PROCESSED"];

export function openFlags(batch: BatchSummary): Flag[] {
  return batch.flags.filter((f) => f.status === "open");
}

export function lockBlockers(batch: BatchSummary): string[] {
  const blockers: string[] = [];
  for (const f of openFlags(batch)) {
    const where = f.scope === "batch" ? "batch" : `segment ${f.segment}`;
    blockers.push(`${f.code} (${where})`);
  }
  if (batch.replicate && batch.replicate.passed !== true) {
    blockers.push("replicate check not passing");
  }
  if (batch.segments.length > 0 &&
      batch.segments.every((s) => s.status === "rejected")) {
    blockers.push("all segments rejected");
  }
  return blockers;
}

export function actionAvailability(
  batch: BatchSummary,
  role: Role,
): ActionAvailability {
  const analyst = role === "analyst";
  const pm = role === "program_manager";
  const processable = MUTABLE_STATES.includes(batch.state);
  const blockers = lockBlockers(batch);
  const lockable =
    analyst && batch.state === "PROCESSED" && blockers.length === 0;
  return {
    canProcess: analyst && processable,
    canEditParameters: analyst && processable,
    canLock: lockable,
    lockDisabledReason:
      batch.state === "PROCESSED" && blockers.length > 0
        ? blockers.join("; ")
        : batch.state !== "PROCESSED"
          ? `batch is ${batch.state}`
          : null,
    canApprove: pm && batch.state === "LOCKED",
    canReturn: pm && batch.state === "LOCKED",
    canClearFlags: analyst && batch.state === "PROCESSED",
    canRejectSegments: analyst && batch.state === "PROCESSED",
    canComment:
      (analyst || pm) && batch.state !== "APPROVED" && batch.state !== "INVALID",
    showApproveButton: pm,
    showReturnButton: pm,
  };
}

// The flag-clear modal: submit stays disabled until a justification
// comment is present (mirror of the server-side EmptyComment guard).
export interface ClearFlagFormState {
  submitEnabled: boolean;
  reason: string | null;
}

export function clearFlagFormState(
  flag: Flag | null,
  comment: string,
): ClearFlagFormState {
  if (!flag) return { submitEnabled: false, reason: "no flag selected" };
  if (flag.severity === "invalidating") {
    return { submitEnabled: false, reason: "flag invalidates the batch" };
  }
  if (flag.status !== "open") {
    return { submitEnabled: false, reason: "flag already resolved" };
  }
  if (comment.trim().length === 0) {
    return { submitEnabled: false, reason: "justification comment required" };
  }
  return { submitEnabled: true, reason: null };
}

// --- detail screen -----------------------------------------------------

export interface SliderModel {
  minIn: number;
  maxIn: number;
  stops: { number: number; startIn: number; endIn: number }[];
}

export function sliderModel(batch: BatchSummary): SliderModel {
  const stops = batch.segments.map((s) => ({
    number: s.number,
    startIn: s.start_in,
    endIn: s.end_in,
  }));
  const last = stops[stops.length - 1];
  return {
    minIn: stops.length > 0 ? stops[0]!.startIn : 0,
    maxIn: last ? last.endIn : 0,
    stops,
  };
}

export function segmentAtPosition(
  batch: BatchSummary,
  positionIn: number,
): SegmentRow | null {
  const segments = batch.segments;
  for (const seg of segments) {
    if (positionIn >= seg.start_in && positionIn < seg.end_in) return seg;
  }
  const last = segments[segments.length - 1];
  if (last && positionIn === last.end_in) return last;
  return null;
}

// All four detail panels keyed to the one segment under the slider: the
// image carousel, the surface model, the spectrum behind the reported
// value, and the per-segment slice of the mass curve.
export interface DetailPanels {
  segmentNumber: number;
  imageArtifacts: string[];
  heatmapArtifact: string | null;
  spectrumArtifact: string | null;
  curveArtifact: string | null;
  curveWindowIn: [number, number];
}

export function detailPanels(
  batch: BatchSummary,
  positionIn: number,
): DetailPanels | null {
  const seg = segmentAtPosition(batch, positionIn);
  if (!seg) return null;
  const art = batch.segment_artifacts[String(seg.number)];
  return {
    segmentNumber: seg.number,
    imageArtifacts: art?.images ?? [],
    heatmapArtifact: art?.heatmap ?? null,
    spectrumArtifact: art?.spectrum ?? null,
    curveArtifact: batch.artifacts.mass_curve_fwd,
    curveWindowIn: [seg.start_in, seg.end_in],
  };
}

// Whole-pipe overview: the full-length curve plus every segment's surface
// strip in order.
export interface WholePipeModel {
  curveForward: string | null;
  curveReverse: string | null;
  heatmapStrip: { segmentNumber: number; artifact: string | null }[];
  totalReportedG: number;
}

export function wholePipeModel(batch: BatchSummary): WholePipeModel {
  let total = 0;
  for (const seg of batch.segments) {
    if (seg.status !== "rejected" && seg.reported) {
      total += Number(seg.reported.mass_g);
    }
  }
  return {
    curveForward: batch.artifacts.mass_curve_fwd,
    curveReverse: batch.artifacts.mass_curve_rev,
    heatmapStrip: batch.segments.map((s) => ({
      segmentNumber: s.number,
      artifact: batch.segment_artifacts[String(s.number)]?.heatmap ?? null,
    })),
    totalReportedG: total,
  };
}

// --- downloads -----------------------------------------------------------

export interface DownloadLinks {
  draftReport: string | null;
  finalReport: string | null;
  ncsTable: string | null;
  interfaceFile: string | null;
}

export function downloadLinks(
  batch: BatchSummary,
  urls: {
    reportUrl(id: string, draft: boolean): string;
    ncsUrl(id: string): string;
    condaUrl(id: string): string;
  },
): DownloadLinks {
  const processed = batch.revision > 0;
  const approved = batch.state === "APPROVED";
  return {
    draftReport:
      processed && !approved ? urls.reportUrl(batch.id, true) : null,
    finalReport: approved ? urls.reportUrl(batch.id, false) : null,
    ncsTable: processed ? urls.ncsUrl(batch.id) : null,
    interfaceFile: approved ? urls.condaUrl(batch.id) : null,
  };
}

// --- misc display helpers ---------------------------------------------------

export function segmentDisplayValue(seg: SegmentRow): string {
  if (seg.status === "rejected") return "REJECTED";
  if (seg.reported) return `${seg.reported.mass_g} g`;
  if (seg.forward) return `${seg.forward.mass_g} g (fwd only)`;
  return "-";
}

export function qcTrendPoints(entries: QcTrendEntry[]): {
  x: number;
  y: number;
  pass: boolean;
}[] {
  return entries.map((e, i) => ({
    x: i,
    y: e.efficiency,
    pass: e.passed !== 0,
  }));
}

export function errorBanner(status: number, body: { error?: string; detail?: string }): string {
  const label = body.error ?? `HTTP ${status}`;
  const detail = body.detail ?? "";
  return detail ? `${label}: ${detail}` : label;
}
