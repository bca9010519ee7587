/** Run-length mask codec matching the server's encoding exactly.
 *
 * Masks are row-major Uint8Array grids with 1 = visible, 0 = missing.
 * The encoding is a list of alternating run lengths that always starts
 * with the missing-pixel run, so a grid whose first pixel is visible gets
 * a leading zero run.
 */

import type { RlePayload } from "./types.js";

export class RleError extends Error {}

export function encodeRle(grid: Uint8Array, h: number, w: number): RlePayload {
  if (h < 1 || w < 1) {
    throw new RleError(`mask dims must be positive, got ${h}x${w}`);
  }
  if (grid.length !== h * w) {
    throw new RleError(`grid has ${grid.length} pixels, expected ${h * w}`);
  }
  const runs: number[] = [];
  let value = grid[0];
  if (value !== 0 && value !== 1) {
    throw new RleError(`mask values must be 0 or 1, got ${value}`);
  }
  if (value !== 0) {
    runs.push(0);
  }
  let runLength = 0;
  for (let i = 0; i < grid.length; i++) {
    const v = grid[i];
    if (v !== 0 && v !== 1) {
      throw new RleError(`mask values must be 0 or 1, got ${v} at ${i}`);
    }
    if (v === value) {
      runLength++;
    } else {
      runs.push(runLength);
      value = v;
      runLength = 1;
    }
  }
  runs.push(runLength);
  return { h, w, rle: runs };
}

export function decodeRle(payload: RlePayload): Uint8Array {
  const { h, w, rle } = payload;
  if (!Number.isInteger(h) || !Number.isInteger(w) || h < 1 || w < 1) {
    throw new RleError(`RLE dims must be positive integers, got ${h}x${w}`);
  }
  let total = 0;
  for (const run of rle) {
    if (!Number.isInteger(run) || run < 0) {
      throw new RleError(`RLE runs must be non-negative integers, got ${run}`);
    }
    total += run;
  }
  if (total !== h * w) {
    throw new RleError(`RLE runs sum to ${total}, expected ${h * w}`);
  }
  const grid = new Uint8Array(h * w);
  let value = 0;
  let pos = 0;
  for (const run of rle) {
    grid.fill(value, pos, pos + run);
    pos += run;
    value ^= 1;
  }
  return grid;
}
