/** Raster mask layer backing the editor canvas.
 *
 * The layer stores exactly what the server receives: a binary grid with
 * 1 = visible, 0 = missing.  Brushes stamp hard-edged discs so the mask
 * stays binary, and every editing gesture snapshots the layer for
 * bit-exact undo.
 */

import { encodeRle } from "./rle.js";
import type { RlePayload } from "./types.js";

export const UNDO_CAPACITY = 32;

export interface Point {
  x: number;
  y: number;
}

export class MaskLayer {
  readonly width: number;
  readonly height: number;
  /** Row-major, 1 = visible, 0 = missing. */
  data: Uint8Array;
  private undoStack: Uint8Array[] = [];
  private strokeOpen = false;

  constructor(width: number, height: number) {
    if (width < 1 || height < 1) {
      throw new Error(`mask layer dims must be positive, got ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height).fill(1);
  }

  /** Number of gestures that can currently be undone. */
  undoDepth(): number {
    return this.undoStack.length;
  }

  /** Snapshot the layer before a gesture; drops the oldest entry beyond
   * capacity so at least UNDO_CAPACITY steps stay restorable. */
  beginGesture(): void {
    if (this.strokeOpen) {
      return;
    }
    this.strokeOpen = true;
    this.undoStack.push(this.data.slice());
    if (this.undoStack.length > UNDO_CAPACITY) {
      this.undoStack.shift();
    }
  }

  endGesture(): void {
    this.strokeOpen = false;
  }

  /** Restore the layer to the snapshot before the last gesture. */
  undo(): boolean {
    const snapshot = this.undoStack.pop();
    if (snapshot === undefined) {
      return false;
    }
    this.data = snapshot;
    this.strokeOpen = false;
    return true;
  }

  clear(): void {
    this.beginGesture();
    this.data.fill(1);
    this.endGesture();
  }

  private stampDisc(cx: number, cy: number, radius: number, value: 0 | 1): void {
    const r = Math.max(0, Math.floor(radius));
    const x0 = Math.max(0, Math.ceil(cx - r));
    const x1 = Math.min(this.width - 1, Math.floor(cx + r));
    const y0 = Math.max(0, Math.ceil(cy - r));
    const y1 = Math.min(this.height - 1, Math.floor(cy + r));
    const r2 = r * r;
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Rasterize a free-form stroke: hard-edged discs stamped at unit steps
   * along the polyline.  An empty point list leaves the layer unchanged. */
  applyStroke(points: Point[], brushSize: number, value: 0 | 1 = 0): void {
    if (points.length === 0) {
      return;
    }
    this.beginGesture();
    const radius = Math.max(0.5, brushSize / 2);
    let prev = points[0];
    this.stampDisc(prev.x, prev.y, radius, value);
    for (let i = 1; i < points.length; i++) {
      const next = points[i];
      const dist = Math.hypot(next.x - prev.x, next.y - prev.y);
      const steps = Math.max(1, Math.ceil(dist));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stampDisc(
          prev.x + (next.x - prev.x) * t,
          prev.y + (next.y - prev.y) * t,
          radius,
          value,
        );
      }
      prev = next;
    }
  }

  /** Axis-aligned rectangle gesture between two drag corners, inclusive,
   * clamped to the layer bounds. */
  applyRectangle(a: Point, b: Point, value: 0 | 1 = 0): void {
    this.beginGesture();
    const x0 = Math.max(0, Math.floor(Math.min(a.x, b.x)));
    const x1 = Math.min(this.width - 1, Math.floor(Math.max(a.x, b.x)));
    const y0 = Math.max(0, Math.floor(Math.min(a.y, b.y)));
    const y1 = Math.min(this.height - 1, Math.floor(Math.max(a.y, b.y)));
    for (let y = y0; y <= y1; y++) {
      this.data.fill(value, y * this.width + x0, y * this.width + x1 + 1);
    }
    this.endGesture();
  }

  missingCount(): number {
    let n = 0;
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] === 0) {
        n++;
      }
    }
    return n;
  }

  toRle(): RlePayload {
    return encodeRle(this.data, this.height, this.width);
  }
}
