/**
 * Typed client for the annotation service HTTP API. The fetch function is
 * injectable so session logic can be tested without a server.
 */

import { RleMask } from "./rle.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface VolumeMeta {
  volume_id: string;
  eye_id: string;
  shape: [number, number, number];
  spacing_um: [number, number, number];
  modalities: string[];
  graders: string[];
}

export interface LabelRead {
  shape: [number, number];
  runs: [number, number][];
  version: number;
}

export interface MergeResult {
  unresolved: [number, number, number][];
  count: number;
}

export class ConflictError extends Error {
  constructor(detail: string) {
    super(detail);
    this.name = "ConflictError";
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (response.status === 409) {
      const body = await response.json().catch(() => ({ detail: "conflict" }));
      throw new ConflictError(body.detail ?? body.error ?? "conflict");
    }
    if (!response.ok) {
      const body = await response.json().catch(() => ({}));
      throw new Error(body.detail ?? body.error ?? `HTTP ${response.status}`);
    }
    return response;
  }

  async listVolumes(): Promise<string[]> {
    const response = await this.request("/api/volumes");
    return (await response.json()).volumes;
  }

  async volumeMeta(volumeId: string): Promise<VolumeMeta> {
    const response = await this.request(`/api/volumes/${volumeId}/meta`);
    return response.json();
  }

  bscanUrl(volumeId: string, index: number, modality: string, beta?: number): string {
    const params = new URLSearchParams({ modality });
    if (beta !== undefined) params.set("beta", String(beta));
    return `${this.baseUrl}/api/volumes/${volumeId}/bscans/${index}?${params}`;
  }

  async getLabels(volumeId: string, graderId: string, index: number): Promise<LabelRead | null> {
    const response = await this.fetchFn(
      `${this.baseUrl}/api/volumes/${volumeId}/labels/${graderId}/${index}`,
    );
    if (response.status === 404) return null;
    if (!response.ok) throw new Error(`HTTP ${response.status}`);
    return response.json();
  }

  async putLabels(
    volumeId: string,
    graderId: string,
    index: number,
    mask: RleMask,
    expectedVersion: number,
  ): Promise<number> {
    const response = await this.request(
      `/api/volumes/${volumeId}/labels/${graderId}/${index}`,
      {
        method: "PUT",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ ...mask, expected_version: expectedVersion }),
      },
    );
    return (await response.json()).version;
  }

  async merge(volumeId: string): Promise<MergeResult> {
    const response = await this.request(`/api/volumes/${volumeId}/merge`, { method: "POST" });
    return response.json();
  }

  async unresolved(volumeId: string): Promise<MergeResult> {
    const response = await this.request(`/api/volumes/${volumeId}/unresolved`);
    return response.json();
  }

  async postResolutions(
    volumeId: string,
    resolutions: [number, number, number, number][],
  ): Promise<number> {
    const response = await this.request(`/api/volumes/${volumeId}/resolutions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(resolutions),
    });
    return (await response.json()).remaining;
  }

  async getPrediction(volumeId: string, index: number): Promise<RleMask | null> {
    const response = await this.fetchFn(
      `${this.baseUrl}/api/volumes/${volumeId}/predictions/${index}`,
    );
    if (response.status === 404) return null;
    if (!response.ok) throw new Error(`HTTP ${response.status}`);
    return response.json();
  }
}
