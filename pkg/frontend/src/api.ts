// Thin typed client over the service HTTP API. Every displayed number
// comes back from these endpoints; nothing is computed client-side.

import type {
  BatchListEntry,
  BatchSummary,
  JobStatus,
  QcTrendEntry,
  SegmentRow,
  SegmentArtifacts,
} from "./types";

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public body: { error?: string; detail?: string },
  ) {
    super(`${status}: ${body.detail ?? body.error ?? "request failed"}`);
  }
}

export class ConsoleApi {
  constructor(
    private token: string,
    private base: string = "",
  ) {}

  private headers(): Record<string, string> {
    return { Authorization: `Bearer ${this.token}` };
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const res = await fetch(this.base + path, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await res.text();
    const parsed = text ? JSON.parse(text) : {};
    if (!res.ok) {
      throw new ApiRequestError(res.status, parsed);
    }
    return parsed as T;
  }

  listBatches(): Promise<{ batches: BatchListEntry[] }> {
    return this.request("GET", "/api/batches");
  }

  getBatch(id: string): Promise<BatchSummary> {
    return this.request("GET", `/api/batches/${id}`);
  }

  upload(bundle: Blob): Promise<{ batch_id: string }> {
    return fetch(this.base + "/api/batches", {
      method: "POST",
      headers: this.headers(),
      body: bundle,
    }).then(async (res) => {
      const parsed = await res.json();
      if (!res.ok) throw new ApiRequestError(res.status, parsed);
      return parsed;
    });
  }

  process(id: string, params?: Record<string, unknown>): Promise<JobStatus> {
    return this.request("POST", `/api/batches/${id}/process`,
      params ? { params } : undefined);
  }

  status(id: string): Promise<JobStatus> {
    return this.request("GET", `/api/batches/${id}/status`);
  }

  segmentDetail(
    id: string,
    n: number,
  ): Promise<SegmentRow & { artifacts: SegmentArtifacts }> {
    return this.request("GET", `/api/batches/${id}/segments/${n}`);
  }

  clearFlag(id: string, flagId: string, comment: string): Promise<BatchSummary> {
    return this.request("POST", `/api/batches/${id}/flags/${flagId}/clear`, {
      comment,
    });
  }

  rejectSegment(id: string, n: number, reason: string): Promise<BatchSummary> {
    return this.request("POST", `/api/batches/${id}/segments/${n}/reject`, {
      reason,
    });
  }

  addComment(
    id: string,
    scope: "batch" | "segment",
    segment: number | null,
    text: string,
  ): Promise<BatchSummary> {
    return this.request("POST", `/api/batches/${id}/comments`, {
      scope,
      segment,
      text,
    });
  }

  lock(id: string): Promise<BatchSummary> {
    return this.request("POST", `/api/batches/${id}/lock`);
  }

  approve(id: string): Promise<BatchSummary> {
    return this.request("POST", `/api/batches/${id}/approve`);
  }

  returnToAnalyst(id: string): Promise<BatchSummary> {
    return this.request("POST", `/api/batches/${id}/return`);
  }

  qcTrend(robot: string): Promise<{ entries: QcTrendEntry[] }> {
    return this.request("GET", `/api/qc/trend?robot=${encodeURIComponent(robot)}`);
  }

  async artifactText(artifactId: string): Promise<string> {
    const res = await fetch(this.base + `/api/artifacts/${artifactId}`, {
      headers: this.headers(),
    });
    if (!res.ok) throw new ApiRequestError(res.status, {});
    return res.text();
  }

  artifactUrl(artifactId: string): string {
    return `${this.base}/api/artifacts/${artifactId}`;
  }

  reportUrl(id: string, draft: boolean): string {
    return `${this.base}/api/batches/${id}/report?draft=${draft}`;
  }

  ncsUrl(id: string): string {
    return `${this.base}/api/batches/${id}/ncs`;
  }

  condaUrl(id: string): string {
    return `${this.base}/api/batches/${id}/conda`;
  }
}
