/** Browser wiring: canvas painting, controls, and the solve loop.
 *
 * Everything stateful lives in AppSession; this file only translates DOM
 * events into state calls and repaints. The overlay redraw after a slider
 * move is pure client work on the cached 16-bit map.
 */

import { OtsegClient, POLL_INTERVAL_MS } from "./api.js";
import { labelColor, labelColorCss } from "./palette.js";
import { AppSession } from "./state.js";
import type { SolveConfig } from "./api.js";
import { maskContour } from "./threshold.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
};

const canvas = $<HTMLCanvasElement>("canvas");
const ctx = canvas.getContext("2d")!;
const toast = $<HTMLDivElement>("toast");
const runButton = $<HTMLButtonElement>("run");
const undoButton = $<HTMLButtonElement>("undo");
const progress = $<HTMLProgressElement>("progress");
const thresholdSlider = $<HTMLInputElement>("threshold");
const thresholdValue = $<HTMLSpanElement>("threshold-value");
const labelBar = $<HTMLDivElement>("labels");
const statusLine = $<HTMLSpanElement>("status");

let session: AppSession | null = null;
let baseImage: ImageBitmap | null = null;
let drawing: Array<[number, number]> | null = null;

function showToast(message: string): void {
  toast.textContent = message;
  toast.classList.add("visible");
  setTimeout(() => toast.classList.remove("visible"), 6000);
}

function syncControls(): void {
  const running = session?.run.kind === "running";
  runButton.disabled = session === null || !session.canRun() || running;
  undoButton.disabled = session === null || session.strokes.length === 0;
  if (session?.run.kind === "running") {
    progress.value = session.run.progress;
    statusLine.textContent =
      `solving, iteration ${session.run.iteration}`;
  } else if (session?.run.kind === "error") {
    statusLine.textContent = "failed";
  } else {
    statusLine.textContent = session?.overlay ? "done" : "";
  }
}

function repaint(): void {
  if (session === null || baseImage === null) return;
  const { width, height } = session;
  ctx.clearRect(0, 0, width, height);
  ctx.drawImage(baseImage, 0, 0);

  const image = ctx.getImageData(0, 0, width, height);
  const px = image.data;

  // scribble preview, server-identical rasterization at 60% opacity
  const preview = session.previewMask();
  for (let i = 0; i < preview.length; i++) {
    const label = preview[i];
    if (label === 0) continue;
    const [r, g, b] = labelColor(label);
    px[4 * i] = Math.round(0.4 * px[4 * i] + 0.6 * r);
    px[4 * i + 1] = Math.round(0.4 * px[4 * i + 1] + 0.6 * g);
    px[4 * i + 2] = Math.round(0.4 * px[4 * i + 2] + 0.6 * b);
  }

  // overlay contour at the current threshold
  const labels = session.currentLabels();
  if (labels !== null) {
    if (session.overlay!.phases === 2) {
      const contour = maskContour(labels, width, height);
      for (let i = 0; i < contour.length; i++) {
        if (!contour[i]) continue;
        px[4 * i] = 255;
        px[4 * i + 1] = 255;
        px[4 * i + 2] = 255;
      }
    } else {
      for (let i = 0; i < labels.length; i++) {
        const x = i % width;
        const rightDiff = x + 1 < width && labels[i + 1] !== labels[i];
        const downDiff = i + width < labels.length && labels[i + width] !== labels[i];
        if (rightDiff || downDiff) {
          px[4 * i] = 255;
          px[4 * i + 1] = 255;
          px[4 * i + 2] = 255;
        }
      }
    }
  }
  ctx.putImageData(image, 0, 0);
  syncControls();
}

function canvasPoint(ev: PointerEvent): [number, number] | null {
  if (session === null) return null;
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - rect.left) / rect.width) * session.width);
  const y = Math.floor(((ev.clientY - rect.top) / rect.height) * session.height);
  if (x < 0 || x >= session.width || y < 0 || y >= session.height) return null;
  return [x, y];
}

function buildLabelBar(): void {
  labelBar.replaceChildren();
  for (let label = 1; label <= 8; label++) {
    const btn = document.createElement("button");
    btn.textContent = String(label);
    btn.style.background = labelColorCss(label);
    btn.addEventListener("click", () => {
      session?.setActiveLabel(label);
      for (const other of labelBar.children) other.classList.remove("active");
      btn.classList.add("active");
    });
    labelBar.appendChild(btn);
  }
}

function solveConfigFromControls(): SolveConfig {
  const config: SolveConfig = {
    variant: $<HTMLSelectElement>("variant").value as SolveConfig["variant"],
    rho: Number($<HTMLInputElement>("rho").value),
    lambda: Number($<HTMLInputElement>("lambda").value),
  };
  const bins = $<HTMLInputElement>("bins").value;
  if (bins !== "") config.bins = Number(bins);
  return config;
}

$<HTMLInputElement>("image-input").addEventListener("change", async (ev) => {
  const input = ev.currentTarget as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  try {
    const client = new OtsegClient($<HTMLInputElement>("service-url").value);
    session = await AppSession.create(client, file, file.type || "image/png");
    baseImage = await createImageBitmap(file);
    canvas.width = session.width;
    canvas.height = session.height;
    repaint();
  } catch (err) {
    showToast(err instanceof Error ? err.message : String(err));
  }
});

canvas.addEventListener("pointerdown", (ev) => {
  if (session === null || session.activeLabel === null) return;
  const pt = canvasPoint(ev);
  if (pt === null) return;
  drawing = [pt];
  canvas.setPointerCapture(ev.pointerId);
});

canvas.addEventListener("pointermove", (ev) => {
  if (drawing === null) return;
  const pt = canvasPoint(ev);
  if (pt === null) return;
  const last = drawing[drawing.length - 1];
  if (pt[0] !== last[0] || pt[1] !== last[1]) drawing.push(pt);
});

canvas.addEventListener("pointerup", () => {
  if (session === null || drawing === null) return;
  const radius = Number($<HTMLInputElement>("radius").value);
  try {
    session.addStroke(drawing, radius);
  } catch (err) {
    showToast(err instanceof Error ? err.message : String(err));
  }
  drawing = null;
  repaint();
});

undoButton.addEventListener("click", () => {
  session?.undo();
  repaint();
});

runButton.addEventListener("click", async () => {
  if (session === null) return;
  progress.value = 0;
  await session.runSolve(solveConfigFromControls(), {
    intervalMs: POLL_INTERVAL_MS,
    onProgress: () => syncControls(),
  });
  if (session.run.kind === "error") showToast(session.run.reason);
  repaint();
});

thresholdSlider.addEventListener("input", () => {
  const t = Number(thresholdSlider.value);
  thresholdValue.textContent = t.toFixed(2);
  if (session !== null && t > 0 && t < 1) {
    session.setThreshold(t);
    repaint();
  }
});

buildLabelBar();
syncControls();
