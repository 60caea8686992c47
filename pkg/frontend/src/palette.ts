/** The gateway's fixed thermal palette, mirrored so the UI can draw a
 * legend and recover temperatures from rendered pixels. Anchors must stay
 * in lockstep with the server. */

export type Rgb = [number, number, number];

export const IRON_ANCHORS: [number, Rgb][] = [
  [0.0, [0, 0, 0]],
  [0.06, [20, 11, 52]],
  [0.25, [132, 10, 104]],
  [0.5, [229, 80, 0]],
  [0.75, [255, 166, 0]],
  [1.0, [255, 255, 255]],
];

function lerpChannel(positions: number[], values: number[], x: number): number {
  if (x <= positions[0]!) return values[0]!;
  const last = positions.length - 1;
  if (x >= positions[last]!) return values[last]!;
  let i = 0;
  while (positions[i + 1]! < x) i++;
  const x0 = positions[i]!;
  const x1 = positions[i + 1]!;
  const f = (x - x0) / (x1 - x0);
  return values[i]! + f * (values[i + 1]! - values[i]!);
}

function buildLut(): Rgb[] {
  const positions = IRON_ANCHORS.map(([p]) => p);
  const lut: Rgb[] = [];
  for (let i = 0; i < 256; i++) {
    const x = i / 255;
    lut.push([
      Math.round(lerpChannel(positions, IRON_ANCHORS.map(([, c]) => c[0]), x)),
      Math.round(lerpChannel(positions, IRON_ANCHORS.map(([, c]) => c[1]), x)),
      Math.round(lerpChannel(positions, IRON_ANCHORS.map(([, c]) => c[2]), x)),
    ]);
  }
  return lut;
}

export const IRON_LUT: Rgb[] = buildLut();

/** Nearest palette index for an on-screen pixel. Unscaled canvas draws
 * keep PNG bytes intact, so this is exact for rendered frames. */
export function nearestIndex(r: number, g: number, b: number): number {
  let best = 0;
  let bestDist = Infinity;
  for (let i = 0; i < 256; i++) {
    const [lr, lg, lb] = IRON_LUT[i]!;
    const d = (lr - r) ** 2 + (lg - g) ** 2 + (lb - b) ** 2;
    if (d < bestDist) {
      bestDist = d;
      best = i;
    }
  }
  return best;
}

/** Temperature represented by a rendered pixel, given the frame's window
 * (from the X-Temperature-Min/Max headers). Clipped values read as the
 * window edge, matching what the render encodes. */
export function pixelTemperature(r: number, g: number, b: number, min: number, max: number): number {
  return min + (nearestIndex(r, g, b) / 255) * (max - min);
}

/** CSS gradient for the legend bar. */
export function legendGradient(): string {
  const stops = IRON_ANCHORS.map(
    ([p, [r, g, b]]) => `rgb(${r},${g},${b}) ${(p * 100).toFixed(0)}%`,
  );
  return `linear-gradient(to right, ${stops.join(', ')})`;
}
