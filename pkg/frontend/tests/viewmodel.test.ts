// Contract tests against recorded API fixtures: the console's enablement
// logic must mirror the server's guards exactly.

import { describe, expect, it } from "vitest";

import type { BatchSummary, Flag, QcTrendEntry } from "../src/types";
import {
  actionAvailability,
  clearFlagFormState,
  detailPanels,
  downloadLinks,
  errorBanner,
  lockBlockers,
  openFlags,
  qcTrendPoints,
  segmentAtPosition,
  segmentDisplayValue,
  sliderModel,
  wholePipeModel,
} from "../src/viewmodel";

import processedClean from "../fixtures/batch_processed_clean.json";
import withOpenFlags from "../fixtures/batch_open_flags.json";
import locked from "../fixtures/batch_locked.json";
import approved from "../fixtures/batch_approved.json";
import invalid from "../fixtures/batch_invalid.json";
import errorLock from "../fixtures/error_lock_open_flags.json";
import errorApprove from "../fixtures/error_approve_wrong_role.json";
import qcTrend from "../fixtures/qc_trend.json";

const clean = processedClean as unknown as BatchSummary;
const flagged = withOpenFlags as unknown as BatchSummary;
const lockedBatch = locked as unknown as BatchSummary;
const approvedBatch = approved as unknown as BatchSummary;
const invalidBatch = invalid as unknown as BatchSummary;

const urls = {
  reportUrl: (id: string, draft: boolean) =>
    `/api/batches/${id}/report?draft=${draft}`,
  ncsUrl: (id: string) => `/api/batches/${id}/ncs`,
  condaUrl: (id: string) => `/api/batches/${id}/conda`,
};

describe("lock availability", () => {
  it("is enabled for the analyst on a clean processed batch", () => {
    const acts = actionAvailability(clean, "analyst");
    expect(acts.canLock).toBe(true);
    expect(acts.lockDisabledReason).toBeNull();
  });

  it("is disabled while flags are open, with the flags in the tooltip", () => {
    expect(flagged.state).toBe("PROCESSED");
    expect(openFlags(flagged).length).toBeGreaterThan(0);
    const acts = actionAvailability(flagged, "analyst");
    expect(acts.canLock).toBe(false);
    expect(acts.lockDisabledReason).toContain("SEG_LUMP_SELF_ATTENUATION");
    expect(lockBlockers(flagged)).toContain(
      "SEG_LUMP_SELF_ATTENUATION (segment 4)",
    );
  });

  it("mirrors the server: locking a flagged batch is a 409 OpenFlags", () => {
    expect(errorLock.status).toBe(409);
    expect(errorLock.body.error).toBe("OpenFlags");
    const message = errorBanner(errorLock.status, errorLock.body);
    expect(message).toContain("OpenFlags");
  });

  it("never enables lock on non-PROCESSED states or for other roles", () => {
    expect(actionAvailability(lockedBatch, "analyst").canLock).toBe(false);
    expect(actionAvailability(approvedBatch, "analyst").canLock).toBe(false);
    expect(actionAvailability(invalidBatch, "analyst").canLock).toBe(false);
    expect(actionAvailability(clean, "program_manager").canLock).toBe(false);
    expect(actionAvailability(clean, "technician").canLock).toBe(false);
  });
});

describe("flag-clear modal", () => {
  const flag = openFlags(flagged)[0] as Flag;

  it("blocks submit on an empty or whitespace comment", () => {
    expect(clearFlagFormState(flag, "").submitEnabled).toBe(false);
    expect(clearFlagFormState(flag, "   ").submitEnabled).toBe(false);
    expect(clearFlagFormState(flag, "\n\t").submitEnabled).toBe(false);
  });

  it("enables submit once a justification is typed", () => {
    const form = clearFlagFormState(flag, "known vial source in this run");
    expect(form.submitEnabled).toBe(true);
    expect(form.reason).toBeNull();
  });

  it("never enables submit for invalidating flags", () => {
    const contamination = invalidBatch.flags.find(
      (f) => f.code === "CONTAMINATION",
    )!;
    const form = clearFlagFormState(contamination, "please");
    expect(form.submitEnabled).toBe(false);
    expect(form.reason).toContain("invalidates");
  });
});

describe("detail slider synchronization", () => {
  it("keys all four panels to the segment under the slider", () => {
    for (const seg of clean.segments) {
      const mid = (seg.start_in + seg.end_in) / 2;
      const panels = detailPanels(clean, mid)!;
      expect(panels.segmentNumber).toBe(seg.number);
      const art = clean.segment_artifacts[String(seg.number)]!;
      expect(panels.heatmapArtifact).toBe(art.heatmap);
      expect(panels.spectrumArtifact).toBe(art.spectrum);
      expect(panels.imageArtifacts).toEqual(art.images);
      expect(panels.curveWindowIn).toEqual([seg.start_in, seg.end_in]);
    }
  });

  it("switches every panel together exactly at segment boundaries", () => {
    for (let i = 1; i < clean.segments.length; i++) {
      const prev = clean.segments[i - 1]!;
      const next = clean.segments[i]!;
      const boundary = next.start_in;
      const before = detailPanels(clean, boundary - 1e-6)!;
      const at = detailPanels(clean, boundary)!;
      expect(before.segmentNumber).toBe(prev.number);
      expect(at.segmentNumber).toBe(next.number);
      // no mixed panels: each side's artifacts all belong to its segment
      expect(at.spectrumArtifact).toBe(
        clean.segment_artifacts[String(next.number)]!.spectrum,
      );
      expect(before.spectrumArtifact).toBe(
        clean.segment_artifacts[String(prev.number)]!.spectrum,
      );
    }
  });

  it("covers the full pipe span and clamps the far edge", () => {
    const model = sliderModel(clean);
    expect(model.minIn).toBe(0);
    const last = clean.segments[clean.segments.length - 1]!;
    expect(model.maxIn).toBe(last.end_in);
    expect(segmentAtPosition(clean, model.maxIn)!.number).toBe(last.number);
    expect(segmentAtPosition(clean, model.maxIn + 5)).toBeNull();
  });
});

describe("role gating", () => {
  it("shows Approve only to the program manager", () => {
    expect(actionAvailability(lockedBatch, "analyst").showApproveButton)
      .toBe(false);
    expect(actionAvailability(lockedBatch, "technician").showApproveButton)
      .toBe(false);
    const pm = actionAvailability(lockedBatch, "program_manager");
    expect(pm.showApproveButton).toBe(true);
    expect(pm.canApprove).toBe(true);
    expect(pm.canReturn).toBe(true);
  });

  it("disables Approve outside the LOCKED state even for the PM", () => {
    expect(actionAvailability(clean, "program_manager").canApprove).toBe(false);
    expect(actionAvailability(approvedBatch, "program_manager").canApprove)
      .toBe(false);
  });

  it("mirrors the server's 403 for an analyst approval attempt", () => {
    expect(errorApprove.status).toBe(403);
    expect(errorBanner(errorApprove.status, errorApprove.body))
      .toContain("ForbiddenRole");
  });

  it("disables all mutating controls on an approved batch", () => {
    const acts = actionAvailability(approvedBatch, "analyst");
    expect(acts.canProcess).toBe(false);
    expect(acts.canLock).toBe(false);
    expect(acts.canClearFlags).toBe(false);
    expect(acts.canRejectSegments).toBe(false);
    expect(acts.canComment).toBe(false);
    expect(acts.canEditParameters).toBe(false);
  });
});

describe("download links", () => {
  it("offers the final report and the interface file after approval", () => {
    const links = downloadLinks(approvedBatch, urls);
    expect(links.finalReport).toBe(
      `/api/batches/${approvedBatch.id}/report?draft=false`,
    );
    expect(links.interfaceFile).toBe(
      `/api/batches/${approvedBatch.id}/conda`,
    );
    expect(links.draftReport).toBeNull();
  });

  it("offers only the draft report before approval", () => {
    const links = downloadLinks(clean, urls);
    expect(links.draftReport).toContain("draft=true");
    expect(links.finalReport).toBeNull();
    expect(links.interfaceFile).toBeNull();
  });
});

describe("displayed numbers round-trip from the API", () => {
  it("renders the server's decimal strings verbatim", () => {
    for (const seg of clean.segments) {
      if (seg.status === "rejected" || !seg.reported) continue;
      const shown = segmentDisplayValue(seg);
      expect(shown).toBe(`${seg.reported.mass_g} g`);
      expect(seg.reported.mass_g).toMatch(/^-?\d+\.\d{3}$/);
    }
  });

  it("whole-pipe total is the sum of the server's reported values", () => {
    const model = wholePipeModel(clean);
    let expected = 0;
    for (const seg of clean.segments) {
      if (seg.status !== "rejected" && seg.reported) {
        expected += Number(seg.reported.mass_g);
      }
    }
    expect(model.totalReportedG).toBeCloseTo(expected, 9);
    expect(model.curveForward).toBe(clean.artifacts.mass_curve_fwd);
    expect(model.heatmapStrip.length).toBe(clean.segments.length);
  });

  it("QC trend points preserve efficiency and pass/fail", () => {
    const entries = (qcTrend as { entries: QcTrendEntry[] }).entries;
    const points = qcTrendPoints(entries);
    expect(points.length).toBe(entries.length);
    points.forEach((p, i) => {
      expect(p.y).toBe(entries[i]!.efficiency);
      expect(p.pass).toBe(entries[i]!.passed !== 0);
    });
  });
});
