import { describe, expect, it } from "vitest";

import { ApiClient, FetchLike } from "../src/api.js";
import { EditorState } from "../src/editor-state.js";
import type { CompletionResponse } from "../src/types.js";

interface PendingCall {
  url: string;
  body: Record<string, unknown> | undefined;
  signal: AbortSignal | undefined;
  respond: (status: number, payload: unknown) => void;
  fail: (err: unknown) => void;
}

/** fetch stand-in whose responses the test resolves by hand, with real
 * AbortSignal semantics. */
function scriptedFetch(): { calls: PendingCall[]; fetchFn: FetchLike } {
  const calls: PendingCall[] = [];
  const fetchFn: FetchLike = (url, init) =>
    new Promise<Response>((resolve, reject) => {
      init?.signal?.addEventListener("abort", () =>
        reject(new DOMException("The operation was aborted.", "AbortError")),
      );
      calls.push({
        url,
        body:
          typeof init?.body === "string" ? JSON.parse(init.body) : undefined,
        signal: init?.signal ?? undefined,
        respond: (status, payload) =>
          resolve(
            new Response(JSON.stringify(payload), {
              status,
              headers: { "content-type": "application/json" },
            }),
          ),
        fail: reject,
      });
    });
  return { calls, fetchFn };
}

function completion(k: number, seed: number): CompletionResponse {
  return {
    samples: Array.from({ length: k }, (_, i) => `/v1/images/seed${seed}-${i}`),
    scores: Array.from({ length: k }, (_, i) => 1 - 0.1 * i),
    seed,
    model: "picnet",
    warnings: [],
  };
}

function seededEditor(seeds: number[]): {
  editor: EditorState;
  calls: PendingCall[];
} {
  const { calls, fetchFn } = scriptedFetch();
  let i = 0;
  const editor = new EditorState(new ApiClient("", fetchFn), {
    k: 6,
    randomSeed: () => seeds[i++ % seeds.length],
  });
  editor.setImage("img0", 16, 12);
  return { editor, calls };
}

describe("EditorState", () => {
  it("keeps the mask layer at the image's dimensions", () => {
    const { editor } = seededEditor([1]);
    expect(editor.mask?.width).toBe(16);
    expect(editor.mask?.height).toBe(12);
    editor.setImage("img1", 8, 8);
    expect(editor.mask?.width).toBe(8);
    expect(editor.mask?.height).toBe(8);
    expect(editor.gallery).toEqual([]);
    expect(editor.selected).toBeNull();
  });

  it("refuses to fill before an image is loaded", async () => {
    const { fetchFn } = scriptedFetch();
    const editor = new EditorState(new ApiClient("", fetchFn));
    await expect(editor.fill()).rejects.toThrow(/no image/);
  });

  it("renders the server's samples in server order", async () => {
    const { editor, calls } = seededEditor([11]);
    const done = editor.fill();
    // deliberately non-sorted scores: the client must not reorder
    calls[0].respond(200, {
      samples: ["/v1/images/a", "/v1/images/b", "/v1/images/c"],
      scores: [0.5, 0.9, 0.1],
      seed: 11,
      model: "picnet",
      warnings: [],
    });
    await done;
    expect(editor.gallery.map((g) => g.ref)).toEqual([
      "/v1/images/a",
      "/v1/images/b",
      "/v1/images/c",
    ]);
    expect(editor.gallery.map((g) => g.score)).toEqual([0.5, 0.9, 0.1]);
    expect(editor.lastSeed).toBe(11);
  });

  it("sends the canvas mask as RLE", async () => {
    const { editor, calls } = seededEditor([3]);
    editor.drawRectangle({ x: 0, y: 0 }, { x: 15, y: 11 });
    const done = editor.fill();
    const body = calls[0].body as { mask: { rle: { h: number; w: number; rle: number[] } } };
    expect(calls[0].url).toBe("/v1/complete");
    expect(body.mask.rle.h).toBe(12);
    expect(body.mask.rle.w).toBe(16);
    expect(body.mask.rle.rle).toEqual([192]);
    calls[0].respond(200, completion(6, 3));
    await done;
  });

  it("uses a fresh seed on every click", async () => {
    const { editor, calls } = seededEditor([7, 7, 9]);
    const first = editor.fill();
    calls[0].respond(200, completion(6, 7));
    await first;
    expect(editor.lastSeed).toBe(7);

    const second = editor.fill();
    calls[1].respond(200, completion(6, 9));
    await second;
    // the repeated 7 was skipped because the server just used it
    expect(calls[1].body?.seed).toBe(9);
  });

  it("aborts the in-flight fill when a newer one starts", async () => {
    const { editor, calls } = seededEditor([1, 2]);
    const first = editor.fill();
    const second = editor.fill();
    expect(calls[0].signal?.aborted).toBe(true);
    expect(calls[1].signal?.aborted).toBe(false);
    calls[1].respond(200, completion(6, 2));
    await Promise.all([first, second]);
    expect(editor.gallery[0].ref).toContain("seed2");
    expect(editor.banner).toBeNull();
    expect(editor.lastSeed).toBe(2);
  });

  it("raises a retriable banner on network failure and keeps state", async () => {
    const { editor, calls } = seededEditor([4, 5]);
    editor.drawRectangle({ x: 2, y: 2 }, { x: 5, y: 5 });
    const maskBefore = editor.mask!.data.slice();

    const first = editor.fill();
    calls[0].respond(200, completion(6, 4));
    await first;
    const galleryBefore = editor.gallery.map((g) => g.ref);

    const failed = editor.fill();
    calls[1].fail(new TypeError("fetch failed"));
    await failed;
    expect(editor.banner).toMatch(/Fill failed/);
    expect(editor.gallery.map((g) => g.ref)).toEqual(galleryBefore);
    expect(editor.mask!.data).toEqual(maskBefore);
    expect(editor.lastSeed).toBe(4);

    const retried = editor.fill();
    calls[2].respond(200, completion(6, 5));
    await retried;
    expect(editor.banner).toBeNull();
    expect(editor.gallery[0].ref).toContain("seed5");
  });

  it("keeps the selection across refills", async () => {
    const { editor, calls } = seededEditor([6, 8]);
    const first = editor.fill();
    calls[0].respond(200, completion(6, 6));
    await first;
    editor.selectSample(2);

    const second = editor.fill();
    calls[1].respond(200, completion(6, 8));
    await second;
    expect(editor.selected).toBe(2);
  });

  it("drops the selection only when the new gallery is smaller", async () => {
    const { editor, calls } = seededEditor([6, 8]);
    const first = editor.fill();
    calls[0].respond(200, completion(6, 6));
    await first;
    editor.selectSample(5);

    const second = editor.fill();
    calls[1].respond(200, completion(2, 8));
    await second;
    expect(editor.selected).toBeNull();
  });

  it("rejects attention probes outside the image without a request", async () => {
    const { editor, calls } = seededEditor([1]);
    await expect(editor.probeAttention(12, 0)).rejects.toThrow(/outside/);
    await expect(editor.probeAttention(0, -1)).rejects.toThrow(/outside/);
    expect(calls.length).toBe(0);
  });

  it("probes with floor'd integer pixel coordinates", async () => {
    const { editor, calls } = seededEditor([1]);
    const probe = editor.probeAttention(3.7, 9.2);
    calls[0].respond(200, {
      grid_h: 4,
      grid_w: 4,
      query: [0, 2],
      scores: new Array(16).fill(1),
      total: 16,
      model: "picnet",
    });
    await probe;
    expect(calls[0].url).toBe("/v1/attention_probe");
    expect(calls[0].body?.query).toEqual([3, 9]);
  });
});
