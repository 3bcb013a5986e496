/** Typed client for the segmentation service HTTP API.
 *
 * Session lifecycle: upload an image, replace scribbles, launch a solve
 * (at most one job in flight per session; the server cancels the previous
 * one), poll the job, then fetch either the 16-bit probability map or a
 * server-thresholded label map.
 */

import type { Stroke } from "./strokes.js";
import { serializeStrokes } from "./strokes.js";

export const POLL_INTERVAL_MS = 250;

export interface SessionInfo {
  session_id: string;
  width: number;
  height: number;
  labels: number[];
  current_job: string | null;
}

export type JobStatus = "queued" | "running" | "done" | "cancelled" | "failed";

export interface JobInfo {
  job_id: string;
  session_id: string;
  status: JobStatus;
  progress: number;
  iteration: number;
  max_iter: number;
  error?: string;
}

export interface ResultMeta {
  energy: number;
  iterations: number;
  converged: boolean;
  near_binarity: number;
  threshold: number;
  phases: number;
  [key: string]: unknown;
}

export interface SolveConfig {
  variant?: "l1" | "mk_exact" | "sinkhorn_prox" | "sinkhorn_grad";
  rho?: number;
  lambda?: number;
  threshold?: number;
  bins?: number;
  features?: "rgb" | "gradnorm";
  cost_kind?: "euclidean_p" | "euclidean" | "exp_concave";
  cost_p?: number;
  gamma?: number;
  tol?: number;
  max_iter?: number;
  allow_maxiter?: boolean;
  precond_r?: number;
  precond_delta?: number;
  seed?: number;
}

/** What the page needs from the service; OtsegClient is the real one. */
export interface SegmentationApi {
  createSession(image: Uint8Array | Blob, contentType?: string): Promise<string>;
  getSession(sid: string): Promise<SessionInfo>;
  putStrokes(sid: string, strokes: readonly Stroke[]): Promise<void>;
  solve(sid: string, config?: SolveConfig): Promise<string>;
  getJob(jid: string): Promise<JobInfo>;
  cancelJob(jid: string): Promise<void>;
  waitForJob(
    jid: string,
    opts?: { intervalMs?: number; onProgress?: (job: JobInfo) => void },
  ): Promise<JobInfo>;
  getProb16(sid: string): Promise<Uint8Array>;
  getLabels(sid: string, threshold: number): Promise<Uint8Array>;
  getResultMeta(sid: string): Promise<ResultMeta>;
}

/** An HTTP-level failure; `reason` carries the server's error message. */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly reason: string,
  ) {
    super(`service returned ${status}: ${reason}`);
    this.name = "ServiceError";
  }
}

async function raiseForStatus(res: Response, expected: number): Promise<void> {
  if (res.status === expected) return;
  let reason = res.statusText;
  try {
    const doc: unknown = await res.json();
    if (typeof doc === "object" && doc !== null && "error" in doc) {
      reason = String((doc as { error: unknown }).error);
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ServiceError(res.status, reason);
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class OtsegClient implements SegmentationApi {
  constructor(readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async createSession(image: Uint8Array | Blob, contentType = "image/png"): Promise<string> {
    const body = image instanceof Blob ? image : new Blob([image as BlobPart]);
    const res = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": contentType },
      body,
    });
    await raiseForStatus(res, 201);
    return ((await res.json()) as { session_id: string }).session_id;
  }

  async getSession(sid: string): Promise<SessionInfo> {
    const res = await fetch(this.url(`/sessions/${sid}`));
    await raiseForStatus(res, 200);
    return (await res.json()) as SessionInfo;
  }

  /** Replace the whole scribble state with this stroke list. */
  async putStrokes(sid: string, strokes: readonly Stroke[]): Promise<void> {
    const res = await fetch(this.url(`/sessions/${sid}/scribbles`), {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: serializeStrokes(strokes),
    });
    await raiseForStatus(res, 204);
  }

  async solve(sid: string, config: SolveConfig = {}): Promise<string> {
    const res = await fetch(this.url(`/sessions/${sid}/solve`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(config),
    });
    await raiseForStatus(res, 202);
    return ((await res.json()) as { job_id: string }).job_id;
  }

  async getJob(jid: string): Promise<JobInfo> {
    const res = await fetch(this.url(`/jobs/${jid}`));
    await raiseForStatus(res, 200);
    return (await res.json()) as JobInfo;
  }

  async cancelJob(jid: string): Promise<void> {
    const res = await fetch(this.url(`/jobs/${jid}`), { method: "DELETE" });
    await raiseForStatus(res, 202);
  }

  /** Poll until the job reaches a terminal state; reports progress along
   * the way. Never throws on a failed job: the caller inspects status. */
  async waitForJob(
    jid: string,
    opts: { intervalMs?: number; onProgress?: (job: JobInfo) => void } = {},
  ): Promise<JobInfo> {
    const interval = opts.intervalMs ?? POLL_INTERVAL_MS;
    for (;;) {
      const job = await this.getJob(jid);
      opts.onProgress?.(job);
      if (job.status === "done" || job.status === "failed" || job.status === "cancelled") {
        return job;
      }
      await sleep(interval);
    }
  }

  /** Raw 16-bit probability PNG bytes (phases stacked vertically if > 2). */
  async getProb16(sid: string): Promise<Uint8Array> {
    const res = await fetch(this.url(`/sessions/${sid}/result?format=prob16`));
    await raiseForStatus(res, 200);
    return new Uint8Array(await res.arrayBuffer());
  }

  /** Server-thresholded label PNG bytes. */
  async getLabels(sid: string, threshold: number): Promise<Uint8Array> {
    const res = await fetch(
      this.url(`/sessions/${sid}/result?format=labels&threshold=${threshold}`));
    await raiseForStatus(res, 200);
    return new Uint8Array(await res.arrayBuffer());
  }

  async getResultMeta(sid: string): Promise<ResultMeta> {
    const res = await fetch(this.url(`/sessions/${sid}/result/meta`));
    await raiseForStatus(res, 200);
    return (await res.json()) as ResultMeta;
  }

  async health(): Promise<{ sessions: number; jobs: number }> {
    const res = await fetch(this.url("/healthz"));
    await raiseForStatus(res, 200);
    return (await res.json()) as { sessions: number; jobs: number };
  }
}
