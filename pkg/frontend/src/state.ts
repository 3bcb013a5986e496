/** Page state machine behind the canvas: strokes in, overlay out.
 *
 * All service traffic funnels through runSolve; everything else (stroke
 * edits, undo, rethresholding the cached map) is local, so the threshold
 * slider never costs a round trip. A failed or unreachable solve leaves
 * strokes and the previous overlay untouched and surfaces the server's
 * reason for the toast.
 */

import type { JobInfo, ResultMeta, SegmentationApi, SolveConfig } from "./api.js";
import { ServiceError } from "./api.js";
import { decodeProb16 } from "./png16.js";
import type { Stroke } from "./strokes.js";
import { labelsPresent, rasterizeStrokes, validateStroke } from "./strokes.js";
import { argmaxLabels, thresholdMask } from "./threshold.js";

export type RunState =
  | { kind: "idle" }
  | { kind: "running"; jobId: string; iteration: number; progress: number }
  | { kind: "error"; reason: string };

export interface Overlay {
  /** image-sized width/height; values hold phases * width * height samples */
  width: number;
  height: number;
  phases: number;
  values: Uint16Array;
  meta: ResultMeta;
  jobId: string;
}

export class AppSession {
  strokes: Stroke[] = [];
  activeLabel: number | null = null;
  threshold = 0.5;
  overlay: Overlay | null = null;
  run: RunState = { kind: "idle" };
  private runSeq = 0;

  private constructor(
    readonly client: SegmentationApi,
    readonly sessionId: string,
    readonly width: number,
    readonly height: number,
  ) {}

  static async create(
    client: SegmentationApi, image: Uint8Array | Blob, contentType = "image/png",
  ): Promise<AppSession> {
    const sid = await client.createSession(image, contentType);
    const info = await client.getSession(sid);
    return new AppSession(client, sid, info.width, info.height);
  }

  setActiveLabel(label: number): void {
    if (!Number.isInteger(label) || label < 1 || label > 255) {
      throw new RangeError(`label must be an integer in 1..255, got ${label}`);
    }
    this.activeLabel = label;
  }

  setThreshold(t: number): void {
    if (!(t > 0 && t < 1)) {
      throw new RangeError(`threshold must lie in (0, 1), got ${t}`);
    }
    this.threshold = t;
  }

  /** Finish a stroke drawn with the active label. No-op without one
   * (nothing is selected, so there is nothing to draw with). */
  addStroke(points: Array<[number, number]>, radius: number): Stroke | null {
    if (this.activeLabel === null) return null;
    const stroke: Stroke = { label: this.activeLabel, radius, points };
    validateStroke(stroke, this.width, this.height);
    this.strokes.push(stroke);
    return stroke;
  }

  undo(): Stroke | null {
    return this.strokes.pop() ?? null;
  }

  labels(): number[] {
    return labelsPresent(this.strokes);
  }

  /** The solve button's enabled state; mirrors the server's 409 rule. */
  canRun(): boolean {
    return this.labels().length >= 2;
  }

  /** Cosmetic preview of what the server will rasterize from the strokes. */
  previewMask(): Uint8Array {
    return rasterizeStrokes(this.strokes, this.width, this.height);
  }

  /** Current label map from the cached overlay at the current threshold:
   * two phases threshold the foreground map, more phases take the argmax.
   * Pure client-side work. */
  currentLabels(): Uint8Array | null {
    if (this.overlay === null) return null;
    const { values, width, height, phases } = this.overlay;
    if (phases === 2) return thresholdMask(values, this.threshold);
    return argmaxLabels(values, width, height, phases);
  }

  /** Push strokes, solve, poll to a terminal state, then pull and decode
   * the 16-bit result. Starting a new run supersedes the previous one
   * (the server cancels its job; the stale poller here just stops). */
  async runSolve(
    config: SolveConfig = {},
    opts: { intervalMs?: number; onProgress?: (job: JobInfo) => void } = {},
  ): Promise<void> {
    if (!this.canRun()) {
      throw new Error("need scribbles for at least two labels before solving");
    }
    const seq = ++this.runSeq;
    try {
      await this.client.putStrokes(this.sessionId, this.strokes);
      const jobId = await this.client.solve(this.sessionId, config);
      if (seq !== this.runSeq) return;
      this.run = { kind: "running", jobId, iteration: 0, progress: 0 };
      const job = await this.client.waitForJob(jobId, {
        intervalMs: opts.intervalMs,
        onProgress: (j) => {
          if (seq === this.runSeq) {
            this.run = {
              kind: "running", jobId, iteration: j.iteration, progress: j.progress,
            };
          }
          opts.onProgress?.(j);
        },
      });
      if (seq !== this.runSeq) return;
      if (job.status === "failed") {
        this.run = { kind: "error", reason: job.error ?? "solve failed" };
        return;
      }
      if (job.status === "cancelled") {
        this.run = { kind: "idle" };
        return;
      }
      const meta = await this.client.getResultMeta(this.sessionId);
      const png = await this.client.getProb16(this.sessionId);
      const decoded = await decodeProb16(png);
      if (seq !== this.runSeq) return;
      const phases = meta.phases;
      const expectHeight = phases === 2 ? this.height : this.height * phases;
      if (decoded.width !== this.width || decoded.height !== expectHeight) {
        throw new Error(
          `result is ${decoded.width}x${decoded.height}, session is ` +
          `${this.width}x${this.height} with ${phases} phases`);
      }
      this.overlay = {
        width: this.width,
        height: this.height,
        phases,
        values: decoded.values,
        meta,
        jobId,
      };
      this.run = { kind: "idle" };
    } catch (err) {
      if (seq !== this.runSeq) return;
      const reason = err instanceof ServiceError
        ? err.reason
        : err instanceof Error ? err.message : String(err);
      this.run = { kind: "error", reason };
    }
  }
}
