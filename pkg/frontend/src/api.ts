/** Thin typed client for the /v1 HTTP API; the only backend the editor
 * talks to.  `fetchFn` is injectable so tests can run without a server. */

import type {
  CompletionRequest,
  CompletionResponse,
  EchoResponse,
  MaskPayload,
  ModelEntry,
  ProbeRequest,
  ProbeResponse,
  UploadResponse,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseOrThrow<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      if (body && typeof body.detail === "string") {
        detail = body.detail;
      } else if (body !== undefined) {
        detail = JSON.stringify(body);
      }
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class ApiClient {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl = "", fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  /** Absolute URL for a sample ref like "/v1/images/<id>". */
  imageUrl(ref: string): string {
    return ref.startsWith("/") ? this.base + ref : ref;
  }

  async uploadImage(bytes: Uint8Array | Blob): Promise<UploadResponse> {
    const body = bytes instanceof Blob ? bytes : new Blob([bytes as BlobPart]);
    const response = await this.fetchFn(`${this.base}/v1/images`, {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body,
    });
    return parseOrThrow<UploadResponse>(response);
  }

  async listModels(): Promise<ModelEntry[]> {
    const response = await this.fetchFn(`${this.base}/v1/models`);
    return parseOrThrow<ModelEntry[]>(response);
  }

  async echoMask(mask: MaskPayload): Promise<EchoResponse> {
    const response = await this.fetchFn(`${this.base}/v1/masks/echo`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(mask),
    });
    return parseOrThrow<EchoResponse>(response);
  }

  async complete(
    request: CompletionRequest,
    signal?: AbortSignal,
  ): Promise<CompletionResponse> {
    const response = await this.fetchFn(`${this.base}/v1/complete`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
      signal,
    });
    return parseOrThrow<CompletionResponse>(response);
  }

  async attentionProbe(request: ProbeRequest): Promise<ProbeResponse> {
    const response = await this.fetchFn(`${this.base}/v1/attention_probe`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    return parseOrThrow<ProbeResponse>(response);
  }
}
