// DOM wiring for the review console. All decisions about what is allowed
// live in viewmodel.ts; this file only renders and forwards clicks.

import { ApiRequestError, ConsoleApi } from "./api";
import {
  curveSliceWindow,
  lineChartSvg,
  parseCurveCsv,
  parseSpectrumCsv,
  trendChartSvg,
} from "./charts";
import type { BatchSummary, Flag, Role } from "./types";
import {
  actionAvailability,
  clearFlagFormState,
  detailPanels,
  downloadLinks,
  errorBanner,
  openFlags,
  qcTrendPoints,
  segmentDisplayValue,
  sliderModel,
  wholePipeModel,
} from "./viewmodel";

type Screen = "main" | "detail" | "whole";

interface AppState {
  api: ConsoleApi | null;
  role: Role;
  batch: BatchSummary | null;
  screen: Screen;
  sliderIn: number;
  pollTimer: number | null;
}

const state: AppState = {
  api: null,
  role: "analyst",
  batch: null,
  screen: "main",
  sliderIn: 0,
  pollTimer: null,
};

const $ = (id: string): HTMLElement => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
};

function banner(text: string, kind: "error" | "ok" = "error"): void {
  const el = $("banner");
  el.textContent = text;
  el.className = `banner ${kind}`;
  el.hidden = !text;
}

async function guard<T>(work: Promise<T>): Promise<T | null> {
  try {
    const result = await work;
    banner("");
    return result;
  } catch (err) {
    if (err instanceof ApiRequestError) {
      banner(errorBanner(err.status, err.body));
    } else {
      banner(String(err));
    }
    return null;
  }
}

// --- batch list -------------------------------------------------------------

async function refreshList(): Promise<void> {
  if (!state.api) return;
  const listing = await guard(state.api.listBatches());
  if (!listing) return;
  const tbody = $("batch-rows");
  tbody.innerHTML = "";
  for (const b of listing.batches) {
    const tr = document.createElement("tr");
    tr.innerHTML =
      `<td><a href="#" data-batch="${b.id}">${b.id}</a></td>` +
      `<td>${b.state}</td><td>${b.robot_id}</td><td>rev ${b.current_rev}</td>`;
    tr.querySelector("a")!.addEventListener("click", (ev) => {
      ev.preventDefault();
      void openBatch(b.id);
    });
    tbody.appendChild(tr);
  }
}

async function openBatch(id: string): Promise<void> {
  if (!state.api) return;
  const batch = await guard(state.api.getBatch(id));
  if (!batch) return;
  state.batch = batch;
  state.sliderIn = batch.segments[0]?.start_in ?? 0;
  render();
}

// --- main screen --------------------------------------------------------------

function renderMain(batch: BatchSummary): void {
  const acts = actionAvailability(batch, state.role);
  $("batch-title").textContent =
    `${batch.id} - ${batch.state}` +
    (batch.returned_from_pm ? " (returned for review)" : "") +
    (batch.invalid_reason ? ` - ${batch.invalid_reason}` : "");

  const processBtn = $("btn-process") as HTMLButtonElement;
  processBtn.disabled = !acts.canProcess;
  const lockBtn = $("btn-lock") as HTMLButtonElement;
  lockBtn.disabled = !acts.canLock;
  lockBtn.title = acts.lockDisabledReason ?? "";
  const approveBtn = $("btn-approve") as HTMLButtonElement;
  approveBtn.hidden = !acts.showApproveButton;
  approveBtn.disabled = !acts.canApprove;
  const returnBtn = $("btn-return") as HTMLButtonElement;
  returnBtn.hidden = !acts.showReturnButton;
  returnBtn.disabled = !acts.canReturn;
  ($("params-box") as HTMLTextAreaElement).disabled = !acts.canEditParameters;
  ($("btn-comment") as HTMLButtonElement).disabled = !acts.canComment;

  const segRows = $("segment-rows");
  segRows.innerHTML = "";
  for (const seg of batch.segments) {
    const tr = document.createElement("tr");
    const rejected = seg.status === "rejected";
    tr.innerHTML =
      `<td>${seg.number}</td><td>${seg.start_ft}-${seg.end_ft} ft</td>` +
      `<td>${seg.kind}</td>` +
      `<td class="${rejected ? "rejected" : ""}">${segmentDisplayValue(seg)}</td>` +
      `<td>${seg.reported ? seg.reported.tmu_g : ""}</td>` +
      `<td>${seg.reported ? seg.reported.mda_g : ""}</td>` +
      `<td>${seg.open_flag_count || ""}</td>` +
      `<td><button data-view="${seg.number}">detail</button>` +
      (acts.canRejectSegments && !rejected
        ? ` <button data-reject="${seg.number}">reject</button>`
        : "") +
      `</td>`;
    tr.querySelector("[data-view]")!.addEventListener("click", () => {
      state.sliderIn = (seg.start_in + seg.end_in) / 2;
      state.screen = "detail";
      render();
    });
    const rejBtn = tr.querySelector("[data-reject]");
    if (rejBtn) {
      rejBtn.addEventListener("click", () => void rejectSegment(seg.number));
    }
    segRows.appendChild(tr);
  }

  const flagList = $("flag-list");
  flagList.innerHTML = "";
  for (const flag of batch.flags) {
    const li = document.createElement("li");
    const where = flag.scope === "batch" ? "batch" : `segment ${flag.segment}`;
    li.textContent = `${flag.code} [${where}] ${flag.status} - ${flag.message}`;
    if (flag.status === "cleared" && flag.clear_comment) {
      li.textContent += ` (cleared: ${flag.clear_comment})`;
    }
    if (flag.status === "open" && acts.canClearFlags &&
        flag.severity === "clearable") {
      const btn = document.createElement("button");
      btn.textContent = "clear";
      btn.addEventListener("click", () => openClearModal(flag));
      li.appendChild(btn);
    }
    flagList.appendChild(li);
  }

  const links = downloadLinks(batch, state.api!);
  const linkBox = $("download-links");
  linkBox.innerHTML = "";
  const addLink = (href: string | null, label: string) => {
    if (!href) return;
    const a = document.createElement("a");
    a.href = href;
    a.textContent = label;
    a.target = "_blank";
    linkBox.appendChild(a);
  };
  addLink(links.draftReport, "draft report");
  addLink(links.finalReport, "final report");
  addLink(links.ncsTable, "NCS table");
  addLink(links.interfaceFile, "interface file");

  const commentBox = $("comment-list");
  commentBox.innerHTML = "";
  for (const c of batch.comments) {
    const li = document.createElement("li");
    const where = c.scope === "batch" ? "batch" : `segment ${c.segment}`;
    li.textContent = `[${where}] ${c.author_name}: ${c.text}`;
    commentBox.appendChild(li);
  }
}

// --- clear-flag modal -----------------------------------------------------------

let modalFlag: Flag | null = null;

function openClearModal(flag: Flag): void {
  modalFlag = flag;
  ($("modal") as HTMLDialogElement).hidden = false;
  $("modal-flag-name").textContent = `${flag.code}: ${flag.message}`;
  ($("modal-comment") as HTMLTextAreaElement).value = "";
  syncModal();
}

function syncModal(): void {
  const comment = ($("modal-comment") as HTMLTextAreaElement).value;
  const form = clearFlagFormState(modalFlag, comment);
  ($("modal-submit") as HTMLButtonElement).disabled = !form.submitEnabled;
  $("modal-reason").textContent = form.reason ?? "";
}

async function submitClear(): Promise<void> {
  if (!state.api || !state.batch || !modalFlag) return;
  const comment = ($("modal-comment") as HTMLTextAreaElement).value;
  const updated = await guard(
    state.api.clearFlag(state.batch.id, modalFlag.id, comment),
  );
  ($("modal") as HTMLDialogElement).hidden = true;
  if (updated) {
    state.batch = updated;
    render();
  }
}

async function rejectSegment(n: number): Promise<void> {
  if (!state.api || !state.batch) return;
  const reason = window.prompt(`Reason for rejecting segment ${n}:`) ?? "";
  if (!reason.trim()) return;
  const updated = await guard(
    state.api.rejectSegment(state.batch.id, n, reason),
  );
  if (updated) {
    state.batch = updated;
    render();
  }
}

// --- detail screen -----------------------------------------------------------------

const artifactCache = new Map<string, string>();

async function artifactText(id: string): Promise<string> {
  const cached = artifactCache.get(id);
  if (cached !== undefined) return cached;
  const text = await state.api!.artifactText(id);
  artifactCache.set(id, text);
  return text;
}

async function renderDetail(batch: BatchSummary): Promise<void> {
  const slider = $("slider") as HTMLInputElement;
  const model = sliderModel(batch);
  slider.min = String(model.minIn);
  slider.max = String(model.maxIn);
  slider.step = "0.5";
  slider.value = String(state.sliderIn);

  const panels = detailPanels(batch, state.sliderIn);
  if (!panels) return;
  $("detail-title").textContent =
    `Segment ${panels.segmentNumber} at ${state.sliderIn.toFixed(1)} in`;

  const imgBox = $("panel-images");
  imgBox.innerHTML = "";
  for (const art of panels.imageArtifacts) {
    const img = document.createElement("img");
    img.src = state.api!.artifactUrl(art);
    imgBox.appendChild(img);
  }
  if (panels.imageArtifacts.length === 0) {
    imgBox.textContent = "no images in this segment";
  }

  const surface = $("panel-surface");
  if (panels.heatmapArtifact) {
    surface.innerHTML =
      `<img src="${state.api!.artifactUrl(panels.heatmapArtifact)}" alt="surface">`;
  } else {
    surface.textContent = `surface model unavailable` +
      (panels.heatmapArtifact === null ? "" : ` (${panels.heatmapArtifact})`);
  }

  if (panels.spectrumArtifact) {
    const text = await artifactText(panels.spectrumArtifact);
    $("panel-spectrum").innerHTML = lineChartSvg(
      [{ points: parseSpectrumCsv(text), stroke: "#36c" }],
      { xLabel: "energy (keV)", yLabel: "counts" },
    );
  } else {
    $("panel-spectrum").textContent = "spectrum unavailable";
  }

  if (panels.curveArtifact) {
    const text = await artifactText(panels.curveArtifact);
    const points = parseCurveCsv(text);
    $("panel-curve").innerHTML = lineChartSvg(
      [{ points: curveSliceWindow(points, panels.curveWindowIn), stroke: "#183" }],
      { xLabel: "position (in)", yLabel: "g/ft" },
    );
  } else {
    $("panel-curve").textContent = "mass curve unavailable";
  }
}

// --- whole pipe -----------------------------------------------------------------------

async function renderWhole(batch: BatchSummary): Promise<void> {
  const model = wholePipeModel(batch);
  $("whole-total").textContent =
    `total reported: ${model.totalReportedG.toFixed(3)} g`;
  const series = [];
  if (model.curveForward) {
    series.push({
      points: parseCurveCsv(await artifactText(model.curveForward)),
      stroke: "#183",
    });
  }
  if (model.curveReverse) {
    series.push({
      points: parseCurveCsv(await artifactText(model.curveReverse)),
      stroke: "#39c",
    });
  }
  $("whole-curve").innerHTML = lineChartSvg(series, {
    width: 900,
    xLabel: "position (in)",
    yLabel: "g/ft",
  });
  const strip = $("whole-strip");
  strip.innerHTML = "";
  for (const item of model.heatmapStrip) {
    const cell = document.createElement("div");
    cell.className = "strip-cell";
    cell.innerHTML = item.artifact
      ? `<img src="${state.api!.artifactUrl(item.artifact)}" alt="seg ${item.segmentNumber}">`
      : `<span>seg ${item.segmentNumber}</span>`;
    strip.appendChild(cell);
  }
  const trend = await guard(state.api!.qcTrend(batch.robot_id));
  if (trend) {
    $("whole-trend").innerHTML = trendChartSvg(qcTrendPoints(trend.entries));
  }
}

// --- actions -------------------------------------------------------------------------------

async function processBatch(): Promise<void> {
  if (!state.api || !state.batch) return;
  let params: Record<string, unknown> | undefined;
  const text = ($("params-box") as HTMLTextAreaElement).value.trim();
  if (text) {
    try {
      params = JSON.parse(text);
    } catch {
      banner("parameter overrides must be JSON, e.g. {\"material\": \"tacky_mat\"}");
      return;
    }
  }
  const job = await guard(state.api.process(state.batch.id, params));
  if (!job) return;
  banner("processing...", "ok");
  pollStatus();
}

function pollStatus(): void {
  if (state.pollTimer !== null) window.clearInterval(state.pollTimer);
  state.pollTimer = window.setInterval(async () => {
    if (!state.api || !state.batch) return;
    const job = await state.api.status(state.batch.id);
    if (job.phase === "done" || job.phase === "failed") {
      window.clearInterval(state.pollTimer!);
      state.pollTimer = null;
      banner(job.phase === "done" ? "processing complete" : `failed: ${job.error}`,
             job.phase === "done" ? "ok" : "error");
      await openBatch(state.batch.id);
    }
  }, 1000);
}

async function simpleAction(
  fn: (id: string) => Promise<BatchSummary>,
  success: string,
): Promise<void> {
  if (!state.api || !state.batch) return;
  const updated = await guard(fn.call(state.api, state.batch.id));
  if (updated) {
    state.batch = updated;
    banner(success, "ok");
    render();
  }
}

// --- top-level render -------------------------------------------------------------------

function render(): void {
  const batch = state.batch;
  $("screen-main").hidden = state.screen !== "main" || !batch;
  $("screen-detail").hidden = state.screen !== "detail" || !batch;
  $("screen-whole").hidden = state.screen !== "whole" || !batch;
  if (!batch) return;
  renderMain(batch);
  if (state.screen === "detail") void renderDetail(batch);
  if (state.screen === "whole") void renderWhole(batch);
}

export function start(): void {
  $("btn-connect").addEventListener("click", async () => {
    const token = ($("token-box") as HTMLInputElement).value.trim();
    const role = ($("role-box") as HTMLSelectElement).value as Role;
    state.api = new ConsoleApi(token);
    state.role = role;
    await refreshList();
  });
  $("btn-process").addEventListener("click", () => void processBatch());
  $("btn-lock").addEventListener("click", () =>
    void simpleAction(ConsoleApi.prototype.lock, "batch locked"));
  $("btn-approve").addEventListener("click", () =>
    void simpleAction(ConsoleApi.prototype.approve, "batch approved"));
  $("btn-return").addEventListener("click", () =>
    void simpleAction(ConsoleApi.prototype.returnToAnalyst,
                      "returned to analyst"));
  $("btn-comment").addEventListener("click", async () => {
    if (!state.api || !state.batch) return;
    const text = window.prompt("Comment on this batch:") ?? "";
    if (!text.trim()) return;
    const updated = await guard(
      state.api.addComment(state.batch.id, "batch", null, text));
    if (updated) {
      state.batch = updated;
      render();
    }
  });
  $("modal-comment").addEventListener("input", syncModal);
  $("modal-submit").addEventListener("click", () => void submitClear());
  $("modal-cancel").addEventListener("click", () => {
    ($("modal") as HTMLDialogElement).hidden = true;
  });
  ($("slider") as HTMLInputElement).addEventListener("input", (ev) => {
    state.sliderIn = Number((ev.target as HTMLInputElement).value);
    if (state.batch) void renderDetail(state.batch);
  });
  for (const [btn, screen] of [
    ["tab-main", "main"],
    ["tab-detail", "detail"],
    ["tab-whole", "whole"],
  ] as [string, Screen][]) {
    $(btn).addEventListener("click", () => {
      state.screen = screen;
      render();
    });
  }
}

if (typeof document !== "undefined" && document.getElementById("btn-connect")) {
  start();
}
