/** JSON shapes of the /v1 API, mirrored field-for-field from the server. */

export interface RlePayload {
  h: number;
  w: number;
  /** Alternating run lengths, starting with a (possibly zero) missing run. */
  rle: number[];
}

export type MaskPayload = { rle: RlePayload } | { png_id: string };

export interface UploadResponse {
  image_id: string;
  width: number;
  height: number;
}

export interface ModelEntry {
  name: string;
  kind: string;
  input_size: number;
  steps: number;
}

export interface EchoResponse {
  rle: RlePayload;
  width: number;
  height: number;
  ratio: number;
  bucket: string | null;
}

export interface CompletionRequest {
  image_id: string;
  mask: MaskPayload;
  k: number;
  model: string;
  seed?: number;
}

export interface CompletionResponse {
  /** Image refs like "/v1/images/<id>", sorted by score, highest first. */
  samples: string[];
  scores: number[];
  seed: number;
  model: string;
  warnings: string[];
}

export interface ProbeRequest {
  image_id: string;
  mask: MaskPayload;
  /** [row, col] in image pixels. */
  query: [number, number];
  model: string;
}

export interface ProbeResponse {
  grid_h: number;
  grid_w: number;
  query: [number, number];
  /** Unnormalized fused-attention row, length grid_h * grid_w. */
  scores: number[];
  total: number;
  model: string;
}
