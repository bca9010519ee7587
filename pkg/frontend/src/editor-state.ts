/** Editor session state and the fill/probe orchestration.
 *
 * Invariants owned here: the mask layer always matches the loaded image's
 * dimensions, the gallery keeps the server's score ordering untouched,
 * selection survives refills, and at most one completion request is in
 * flight (newer fills abort older ones).
 */

import { ApiClient } from "./api.js";
import { MaskLayer, Point } from "./mask-layer.js";
import type { CompletionRequest, ProbeResponse } from "./types.js";

export type MaskMode = "free-form" | "rectangle";

export interface GalleryEntry {
  /** Image ref as sent by the server, e.g. "/v1/images/<id>". */
  ref: string;
  score: number;
}

export interface EditorOptions {
  model?: string;
  k?: number;
  /** Seed source, injectable for deterministic tests. */
  randomSeed?: () => number;
}

const SEED_LIMIT = 2 ** 31;

export class EditorState {
  readonly api: ApiClient;
  model: string;
  k: number;

  imageId: string | null = null;
  imageWidth = 0;
  imageHeight = 0;
  mask: MaskLayer | null = null;

  brushSize = 16;
  maskMode: MaskMode = "free-form";

  lastSeed: number | null = null;
  gallery: GalleryEntry[] = [];
  selected: number | null = null;
  /** Retriable error message; null when the last request succeeded. */
  banner: string | null = null;
  warnings: string[] = [];

  private inflight: AbortController | null = null;
  private readonly randomSeed: () => number;

  constructor(api: ApiClient, options: EditorOptions = {}) {
    this.api = api;
    this.model = options.model ?? "picnet";
    this.k = options.k ?? 6;
    this.randomSeed =
      options.randomSeed ?? (() => Math.floor(Math.random() * SEED_LIMIT));
  }

  /** Upload an image and point the editor at it with a cleared mask. */
  async loadImage(bytes: Uint8Array | Blob): Promise<void> {
    const uploaded = await this.api.uploadImage(bytes);
    this.setImage(uploaded.image_id, uploaded.width, uploaded.height);
  }

  /** Attach an already-uploaded image; resets per-image state. */
  setImage(imageId: string, width: number, height: number): void {
    this.imageId = imageId;
    this.imageWidth = width;
    this.imageHeight = height;
    this.mask = new MaskLayer(width, height);
    this.gallery = [];
    this.selected = null;
    this.lastSeed = null;
    this.banner = null;
    this.warnings = [];
  }

  private requireMask(): MaskLayer {
    if (this.imageId === null || this.mask === null) {
      throw new Error("no image loaded");
    }
    return this.mask;
  }

  drawStroke(points: Point[]): void {
    this.requireMask().applyStroke(points, this.brushSize, 0);
  }

  eraseStroke(points: Point[]): void {
    this.requireMask().applyStroke(points, this.brushSize, 1);
  }

  drawRectangle(a: Point, b: Point): void {
    this.requireMask().applyRectangle(a, b, 0);
  }

  undo(): boolean {
    return this.requireMask().undo();
  }

  /** A seed the server has not just used, so re-clicking Fill always
   * produces a different draw. */
  private freshSeed(): number {
    let seed = this.randomSeed();
    while (seed === this.lastSeed) {
      seed = this.randomSeed();
    }
    return seed;
  }

  /** POST the current mask for completion and replace the gallery with the
   * server's ranked samples.  A newer fill aborts the in-flight one; a
   * network failure raises the banner and leaves all state untouched. */
  async fill(): Promise<void> {
    const mask = this.requireMask();
    const request: CompletionRequest = {
      image_id: this.imageId as string,
      mask: { rle: mask.toRle() },
      k: this.k,
      model: this.model,
      seed: this.freshSeed(),
    };
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    try {
      const response = await this.api.complete(request, controller.signal);
      if (controller.signal.aborted) {
        return; // superseded by a newer fill
      }
      this.gallery = response.samples.map((ref, i) => ({
        ref,
        score: response.scores[i],
      }));
      this.lastSeed = response.seed;
      this.warnings = response.warnings;
      this.banner = null;
      if (this.selected !== null && this.selected >= this.gallery.length) {
        this.selected = null;
      }
    } catch (err) {
      if (controller.signal.aborted) {
        return; // abort of a stale request is not an error
      }
      const message = err instanceof Error ? err.message : String(err);
      this.banner = `Fill failed: ${message}. Retry when ready.`;
    } finally {
      if (this.inflight === controller) {
        this.inflight = null;
      }
    }
  }

  selectSample(index: number): void {
    if (index < 0 || index >= this.gallery.length) {
      throw new Error(`no gallery sample at ${index}`);
    }
    this.selected = index;
  }

  /** Attention row for a click at image pixel (y, x); clicks outside the
   * image are rejected before any request is made. */
  async probeAttention(y: number, x: number): Promise<ProbeResponse> {
    const mask = this.requireMask();
    if (y < 0 || y >= this.imageHeight || x < 0 || x >= this.imageWidth) {
      throw new Error(`probe (${y}, ${x}) outside image`);
    }
    return this.api.attentionProbe({
      image_id: this.imageId as string,
      mask: { rle: mask.toRle() },
      query: [Math.floor(y), Math.floor(x)],
      model: this.model,
    });
  }
}
