/**
 * Typed client for the review-service HTTP API.
 *
 * Every mutation the UI performs goes through POST /corrections or
 * POST /clusters/{id}/name; the client holds no state of its own.
 */

import {
  Ack,
  ApiError,
  ClusterSummary,
  CorrectionRequest,
  ItemsPage,
  SortOrder,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ReviewApi {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && typeof body.error === "string") detail = body.error;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  listClusters(): Promise<ClusterSummary[]> {
    return this.request<ClusterSummary[]>("/clusters");
  }

  getClusterItems(
    clusterId: number,
    page = 0,
    pageSize = 50,
    sort: SortOrder = "confidence_asc",
  ): Promise<ItemsPage> {
    const params = new URLSearchParams({
      page: String(page),
      page_size: String(pageSize),
      sort,
    });
    return this.request<ItemsPage>(`/clusters/${clusterId}/items?${params}`);
  }

  submitCorrection(correction: CorrectionRequest): Promise<Ack> {
    return this.request<Ack>("/corrections", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(correction),
    });
  }

  nameCluster(clusterId: number, name: string): Promise<Ack> {
    return this.request<Ack>(`/clusters/${clusterId}/name`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ name }),
    });
  }

  async exportSummary(): Promise<{ corrections: number }> {
    return this.request<{ corrections: number }>("/export/summary");
  }

  /** Returns the corrected manifest as JSONL text. */
  async exportManifest(): Promise<string> {
    const response = await this.fetchImpl(`${this.baseUrl}/export`);
    if (!response.ok) {
      throw new ApiError(response.status, response.statusText);
    }
    return response.text();
  }

  thumbnailUrl(imageId: string): string {
    return `${this.baseUrl}/thumbnails/${imageId}`;
  }
}
