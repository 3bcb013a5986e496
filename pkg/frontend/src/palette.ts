/** Label colors, mirroring the palette the service embeds in label PNGs.
 *
 * Index 0 is the unlabeled background; 1..20 are fixed saturated colors;
 * higher indices follow the same deterministic ramp as the server so a
 * stroke drawn here matches the color the label carries in downloads.
 */

export type Rgb = readonly [number, number, number];

const BASE_COLORS: readonly Rgb[] = [
  [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
  [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
  [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
  [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
  [128, 128, 0], [255, 215, 180], [0, 0, 128], [128, 128, 128],
];

export function labelColor(label: number): Rgb {
  if (!Number.isInteger(label) || label < 0 || label > 255) {
    throw new RangeError(`label out of range: ${label}`);
  }
  if (label === 0) return [0, 0, 0];
  if (label <= BASE_COLORS.length) return BASE_COLORS[label - 1];
  return [label, (label * 37) % 256, (label * 73) % 256];
}

export function labelColorCss(label: number): string {
  const [r, g, b] = labelColor(label);
  return `rgb(${r}, ${g}, ${b})`;
}
