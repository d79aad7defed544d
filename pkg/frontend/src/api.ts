/** Thin client over the scene query endpoints.
 *
 * Responses are returned exactly as the server sent them; the viewer never
 * re-scores or re-orders anything. Raw JSON text is kept alongside the
 * parsed form so displayed rankings can be compared byte-for-byte.
 */

import {
  ApiError,
  ClusterResponse,
  PointsResponse,
  QueryResponse,
  UploadResponse,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<{ body: T; raw: string }> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const raw = await response.text();
    if (!response.ok) {
      let message = `HTTP ${response.status}`;
      try {
        const parsed = JSON.parse(raw);
        if (parsed && typeof parsed.error === "string") message = parsed.error;
      } catch {
        /* non-JSON error body; keep the status message */
      }
      throw new ApiError(response.status, message);
    }
    return { body: JSON.parse(raw) as T, raw };
  }

  async health(): Promise<boolean> {
    try {
      await this.request<{ status: string }>("/healthz");
      return true;
    } catch {
      return false;
    }
  }

  async uploadScene(payload: ArrayBuffer | Uint8Array): Promise<UploadResponse> {
    const bytes = payload instanceof Uint8Array ? payload : new Uint8Array(payload);
    const body = bytes.slice().buffer as ArrayBuffer;
    const { body: parsed } = await this.request<UploadResponse>("/scenes", {
      method: "POST",
      body,
    });
    return parsed;
  }

  async cluster(
    sceneId: string,
    k: number,
    seed: number,
    stripFloor: boolean,
  ): Promise<ClusterResponse> {
    const { body } = await this.request<ClusterResponse>(`/scenes/${sceneId}/cluster`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ k, seed, strip_floor: stripFloor }),
    });
    return body;
  }

  /** Returns both the parsed response and the exact JSON text received. */
  async query(sceneId: string, text: string): Promise<{ body: QueryResponse; raw: string }> {
    return this.request<QueryResponse>(`/scenes/${sceneId}/query`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ text }),
    });
  }

  async points(sceneId: string, cluster: number): Promise<number[]> {
    const { body } = await this.request<PointsResponse>(
      `/scenes/${sceneId}/points?cluster=${cluster}`,
    );
    return body.indices ?? [];
  }
}
