/**
 * Thin typed client for the search service.
 *
 * All scoring happens server-side; this client never reorders or rounds
 * what the service returns. Each request kind keeps at most one request
 * in flight: issuing a new search aborts the superseded one.
 */

import type { HealthResponse, HeatmapResponse, SearchRequestBody, SearchResult } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private inflight = new Map<string, AbortController>();

  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  /** Abort the in-flight request of the given kind, if any. */
  cancel(kind: string): void {
    this.inflight.get(kind)?.abort();
    this.inflight.delete(kind);
  }

  private async request<T>(kind: string, path: string, init?: RequestInit): Promise<T> {
    this.cancel(kind);
    const controller = new AbortController();
    this.inflight.set(kind, controller);
    try {
      const resp = await this.fetchImpl(this.baseUrl + path, {
        ...init,
        signal: controller.signal,
      });
      if (!resp.ok) {
        let detail = resp.statusText;
        try {
          const body = (await resp.json()) as { detail?: string };
          if (body.detail) detail = body.detail;
        } catch {
          /* non-JSON error body */
        }
        throw new ApiError(resp.status, detail);
      }
      return (await resp.json()) as T;
    } finally {
      if (this.inflight.get(kind) === controller) this.inflight.delete(kind);
    }
  }

  async health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("health", "/api/health");
  }

  async factors(): Promise<string[]> {
    const body = await this.request<{ factors: string[] }>("factors", "/api/factors");
    return body.factors;
  }

  /** Ranked results exactly as the service ordered them. */
  async search(body: SearchRequestBody): Promise<SearchResult[]> {
    const resp = await this.request<{ results: SearchResult[] }>("search", "/api/search", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return resp.results;
  }

  async heatmap(imageId: string, factor: string): Promise<HeatmapResponse> {
    const path = `/api/heatmap/${encodeURIComponent(imageId)}/${encodeURIComponent(factor)}`;
    return this.request<HeatmapResponse>(`heatmap:${imageId}`, path);
  }
}

/** True for errors raised by aborting a superseded request. */
export function isAbort(err: unknown): boolean {
  return err instanceof DOMException
    ? err.name === "AbortError"
    : err instanceof Error && err.name === "AbortError";
}
