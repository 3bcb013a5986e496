/** Client-side rethresholding of cached 16-bit probability maps.
 *
 * The comparison is value / 65535 > t on IEEE doubles, which is the same
 * arithmetic the server applies to its quantized maps, so a client mask at
 * threshold t is pixel-identical to GET result?format=labels&threshold=t.
 */

export function thresholdMask(values: Uint16Array, t: number): Uint8Array {
  if (!(t > 0 && t < 1)) {
    throw new RangeError(`threshold must lie in (0, 1), got ${t}`);
  }
  const mask = new Uint8Array(values.length);
  // literally v / 65535 > t: hoisting to v > t * 65535 rounds differently
  // and could disagree with the server on boundary thresholds
  for (let i = 0; i < values.length; i++) {
    if (values[i] / 65535 > t) mask[i] = 1;
  }
  return mask;
}

/** Multi-phase labels from a vertically stacked map: argmax over phases,
 * ties to the lowest phase index (matching the server). */
export function argmaxLabels(
  stacked: Uint16Array, width: number, height: number, phases: number,
): Uint8Array {
  if (stacked.length !== width * height * phases) {
    throw new RangeError(
      `stacked map has ${stacked.length} values, expected ${width * height * phases}`);
  }
  const n = width * height;
  const out = new Uint8Array(n);
  for (let i = 0; i < n; i++) {
    let best = stacked[i];
    let arg = 0;
    for (let k = 1; k < phases; k++) {
      const v = stacked[k * n + i];
      if (v > best) {
        best = v;
        arg = k;
      }
    }
    out[i] = arg;
  }
  return out;
}

/** Boundary pixels of a binary mask: set pixels with a 4-neighbor outside
 * the mask (image border counts as outside). This is what the overlay
 * draws, so it must stay fast enough for interactive slider drags. */
export function maskContour(mask: Uint8Array, width: number, height: number): Uint8Array {
  const contour = new Uint8Array(mask.length);
  for (let y = 0; y < height; y++) {
    const row = y * width;
    for (let x = 0; x < width; x++) {
      const i = row + x;
      if (!mask[i]) continue;
      if (x === 0 || y === 0 || x === width - 1 || y === height - 1 ||
          !mask[i - 1] || !mask[i + 1] || !mask[i - width] || !mask[i + width]) {
        contour[i] = 1;
      }
    }
  }
  return contour;
}
