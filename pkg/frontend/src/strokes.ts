/** Stroke model shared by the canvas, the preview raster, and the wire.
 *
 * A stroke is a polyline of integer (x, y) = (column, row) points painted
 * with a round brush of integer radius. The server is the rasterization
 * authority; the preview here reproduces its brush exactly (same segment
 * sampling, same half-even rounding, same disc test) so what the user sees
 * is what the solver gets, but only the stroke list ever leaves the page.
 */

export interface Stroke {
  label: number;
  radius: number;
  points: Array<[number, number]>;
}

export function validateStroke(stroke: Stroke, width: number, height: number): void {
  if (!Number.isInteger(stroke.label) || stroke.label < 1 || stroke.label > 255) {
    throw new RangeError(`stroke label must be an integer in 1..255, got ${stroke.label}`);
  }
  if (!Number.isInteger(stroke.radius) || stroke.radius < 0) {
    throw new RangeError(`stroke radius must be a non-negative integer, got ${stroke.radius}`);
  }
  if (stroke.points.length < 1) {
    throw new RangeError("stroke needs at least one point");
  }
  for (const [x, y] of stroke.points) {
    if (!Number.isInteger(x) || !Number.isInteger(y)) {
      throw new RangeError(`stroke points must be integers, got (${x}, ${y})`);
    }
    if (x < 0 || x >= width || y < 0 || y >= height) {
      throw new RangeError(`stroke point (${x}, ${y}) lies outside ${width}x${height}`);
    }
  }
}

/** Canonical wire form of the PUT /sessions/{id}/scribbles strokes body.
 *
 * Key order and number formatting are fixed, so serialize(parse(s)) === s
 * for any string this function produced.
 */
export function serializeStrokes(strokes: readonly Stroke[]): string {
  return JSON.stringify({
    strokes: strokes.map((s) => ({
      label: s.label,
      radius: s.radius,
      points: s.points.map(([x, y]) => [x, y]),
    })),
  });
}

export function parseStrokes(text: string): Stroke[] {
  const doc: unknown = JSON.parse(text);
  if (typeof doc !== "object" || doc === null || !("strokes" in doc)) {
    throw new TypeError("expected an object with a strokes array");
  }
  const raw = (doc as { strokes: unknown }).strokes;
  if (!Array.isArray(raw)) throw new TypeError("strokes must be an array");
  return raw.map((item: unknown, i: number): Stroke => {
    if (typeof item !== "object" || item === null) {
      throw new TypeError(`stroke ${i} is not an object`);
    }
    const s = item as Record<string, unknown>;
    const keys = Object.keys(s).sort();
    if (keys.join(",") !== "label,points,radius") {
      throw new TypeError(`stroke ${i} must have exactly label/radius/points`);
    }
    const { label, radius, points } = s;
    if (typeof label !== "number" || typeof radius !== "number" || !Array.isArray(points)) {
      throw new TypeError(`stroke ${i} has wrong field types`);
    }
    const pts = points.map((p: unknown): [number, number] => {
      if (!Array.isArray(p) || p.length !== 2 ||
          typeof p[0] !== "number" || typeof p[1] !== "number") {
        throw new TypeError(`stroke ${i} has a malformed point`);
      }
      return [p[0], p[1]];
    });
    return { label, radius, points: pts };
  });
}

/** Python-style round-half-to-even, needed for parity with the server's
 * segment sampling (Math.round would pull 0.5 cases the other way). */
export function roundHalfEven(v: number): number {
  const floor = Math.floor(v);
  const diff = v - floor;
  if (diff > 0.5) return floor + 1;
  if (diff < 0.5) return floor;
  return floor % 2 === 0 ? floor : floor + 1;
}

/** Rasterize strokes into a label mask exactly as the server does:
 * dense segment sampling with steps = max(|dx|, |dy|, 1), half-even
 * rounded centers, disc stamp ox^2 + oy^2 <= r^2, later strokes win,
 * discs clipped at the borders. */
export function rasterizeStrokes(
  strokes: readonly Stroke[], width: number, height: number,
): Uint8Array {
  const mask = new Uint8Array(width * height);
  for (const stroke of strokes) {
    const { label, radius, points } = stroke;
    const disc: Array<[number, number]> = [];
    for (let oy = -radius; oy <= radius; oy++) {
      for (let ox = -radius; ox <= radius; ox++) {
        if (ox * ox + oy * oy <= radius * radius) disc.push([ox, oy]);
      }
    }
    const centers = new Set<number>();
    const n = points.length;
    for (let k = 0; k < Math.max(n - 1, 1); k++) {
      const [x0, y0] = points[k];
      const [x1, y1] = points[Math.min(k + 1, n - 1)];
      const steps = Math.max(Math.abs(x1 - x0), Math.abs(y1 - y0), 1);
      for (let s = 0; s <= steps; s++) {
        const cx = roundHalfEven(x0 + ((x1 - x0) * s) / steps);
        const cy = roundHalfEven(y0 + ((y1 - y0) * s) / steps);
        centers.add(cy * width + cx);
      }
    }
    for (const packed of centers) {
      const cx = packed % width;
      const cy = (packed - cx) / width;
      for (const [ox, oy] of disc) {
        const px = cx + ox;
        const py = cy + oy;
        if (px >= 0 && px < width && py >= 0 && py < height) {
          mask[py * width + px] = label;
        }
      }
    }
  }
  return mask;
}

export function labelsPresent(strokes: readonly Stroke[]): number[] {
  return [...new Set(strokes.map((s) => s.label))].sort((a, b) => a - b);
}
