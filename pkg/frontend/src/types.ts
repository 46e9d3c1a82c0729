// API payload shapes, mirrored from the server's batch summary responses.
// The console never recomputes results; these are display records.

export type Role = "technician" | "analyst" | "program_manager";

export type BatchState =
  | "UPLOADED"
  | "PROCESSED"
  | "LOCKED"
  | "APPROVED"
  | "INVALID";

export interface SegmentValue {
  mass_g: string;
  tmu_g: string;
  mda_g: string;
  density_g_per_ft: string;
  sigma_g: string;
  lump_flagged: boolean;
  max_position_in: number;
}

export interface SegmentRow {
  number: number;
  start_ft: string;
  end_ft: string;
  start_in: number;
  end_in: number;
  kind: "standard" | "stretch" | "fov";
  status: "reported" | "rejected";
  rejection_reason: string | null;
  open_flag_count: number;
  reported: SegmentValue | null;
  forward: SegmentValue | null;
  reverse: SegmentValue | null;
  images: string[];
  qc: Record<string, unknown>;
  geometry: { available?: boolean; flagged?: boolean } | null;
}

export interface Flag {
  id: string;
  scope: "batch" | "segment";
  segment: number | null;
  code: string;
  severity: "clearable" | "invalidating";
  status: "open" | "cleared";
  message: string;
  cleared_by: string | null;
  cleared_at: number | null;
  clear_comment: string | null;
}

export interface Comment {
  seq: number;
  scope: "batch" | "segment";
  segment: number | null;
  text: string;
  author: string;
  author_name: string;
  created_at: number;
}

export interface ReplicateSide {
  forward_g: number;
  forward_sigma_g: number;
  reverse_g: number;
  reverse_sigma_g: number;
  rpd_percent: number | null;
  two_sigma_bound_g: number;
  passed: boolean;
  segment_number: number | null;
}

export interface ReplicateBlock {
  passed: boolean | null;
  total: ReplicateSide | null;
  max: ReplicateSide | null;
}

export interface SegmentArtifacts {
  heatmap: string | null;
  heatmap_dev: string | null;
  mesh: string | null;
  spectrum: string | null;
  images: string[];
}

export interface BatchSummary {
  id: string;
  state: BatchState;
  revision: number;
  returned_from_pm: boolean;
  robot_id: string;
  start_time: string;
  request: Record<string, string | number>;
  invalid_reason: string | null;
  approved_by: string | null;
  approved_by_name: string | null;
  approved_at: number | null;
  parameters: Record<string, unknown> | null;
  ingest_issues: { severity: string; code: string; message: string }[];
  segments: SegmentRow[];
  flags: Flag[];
  comments: Comment[];
  replicate: ReplicateBlock | null;
  qc: Record<string, { overall_pass?: boolean; passed?: boolean } | null> | null;
  trajectory: { max_position_in: number } | null;
  calibration: { id: string; date: string; current: boolean } | null;
  plan_notes: string[];
  artifacts: {
    trajectory_csv: string | null;
    mass_curve_fwd: string | null;
    mass_curve_rev: string | null;
  };
  segment_artifacts: Record<string, SegmentArtifacts>;
}

export interface BatchListEntry {
  id: string;
  state: BatchState;
  robot_id: string;
  start_time: string;
  current_rev: number;
  returned_from_pm: number;
}

export interface JobStatus {
  batch_id: string;
  phase: "none" | "queued" | "running" | "done" | "failed";
  progress: number;
  error: string | null;
}

export interface QcTrendEntry {
  batch_id: string;
  context: string;
  efficiency: number;
  passed: number;
  t: number;
}

export interface ApiError {
  status: number;
  body: { error?: string; detail?: string };
}
