/** Attention heatmap overlay: the probe's grid_h x grid_w score row is
 * max-normalized and upsampled nearest-neighbor to the image size, so the
 * overlay dimensions always match the server's grid exactly. */

import type { ProbeResponse } from "./types.js";

export interface OverlayOptions {
  /** 0..1 multiplier on the per-cell alpha. */
  opacity?: number;
  /** Overlay color as [r, g, b] 0..255. */
  color?: [number, number, number];
}

export function gridDims(probe: ProbeResponse): { gridH: number; gridW: number } {
  return { gridH: probe.grid_h, gridW: probe.grid_w };
}

/** Scores normalized to [0, 1] by the row maximum; an all-zero row stays
 * all zeros instead of dividing by zero. */
export function normalizedGrid(probe: ProbeResponse): Float32Array {
  const n = probe.grid_h * probe.grid_w;
  if (probe.scores.length !== n) {
    throw new Error(
      `probe has ${probe.scores.length} scores, expected ${probe.grid_h}x${probe.grid_w}`,
    );
  }
  const out = new Float32Array(n);
  let max = 0;
  for (const s of probe.scores) {
    if (s > max) {
      max = s;
    }
  }
  if (max > 0) {
    for (let i = 0; i < n; i++) {
      out[i] = probe.scores[i] / max;
    }
  }
  return out;
}

/** RGBA buffer at image resolution, suitable for ImageData; each image
 * pixel takes its alpha from the grid cell it falls in. */
export function renderOverlayRgba(
  probe: ProbeResponse,
  imageWidth: number,
  imageHeight: number,
  options: OverlayOptions = {},
): Uint8ClampedArray<ArrayBuffer> {
  if (imageWidth < 1 || imageHeight < 1) {
    throw new Error(`image dims must be positive, got ${imageWidth}x${imageHeight}`);
  }
  const opacity = options.opacity ?? 0.6;
  const [r, g, b] = options.color ?? [255, 64, 32];
  const grid = normalizedGrid(probe);
  const rgba = new Uint8ClampedArray(new ArrayBuffer(imageWidth * imageHeight * 4));
  for (let y = 0; y < imageHeight; y++) {
    const row = Math.min(probe.grid_h - 1, Math.floor((y * probe.grid_h) / imageHeight));
    for (let x = 0; x < imageWidth; x++) {
      const col = Math.min(probe.grid_w - 1, Math.floor((x * probe.grid_w) / imageWidth));
      const alpha = grid[row * probe.grid_w + col] * opacity * 255;
      const o = (y * imageWidth + x) * 4;
      rgba[o] = r;
      rgba[o + 1] = g;
      rgba[o + 2] = b;
      rgba[o + 3] = alpha;
    }
  }
  return rgba;
}
