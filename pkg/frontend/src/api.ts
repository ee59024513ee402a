/** Thin typed client over the coordinator control API.
 *
 * The operator token lives only in this object (memory), never in storage.
 * Every call resolves to an ApiResult; callers decide how failures surface.
 */

import type {
  ApiResult,
  MatrixRow,
  NodeRow,
  OperatorAction,
  RoundMetrics,
  StatusSnapshot,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    public baseUrl: string,
    private token: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(method: "GET" | "POST", path: string): Promise<ApiResult<T>> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, {
        method,
        headers: { Authorization: `Bearer ${this.token}` },
      });
    } catch (err) {
      return { ok: false, error: { kind: "network", message: String(err) } };
    }
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      body = null;
    }
    if (response.status === 401) {
      return { ok: false, error: { kind: "unauthorized", message: errText(body, "operator token rejected") } };
    }
    if (response.status === 409) {
      return { ok: false, error: { kind: "conflict", message: errText(body, "conflict") } };
    }
    if (!response.ok) {
      return {
        ok: false,
        error: { kind: "http", status: response.status, message: errText(body, `HTTP ${response.status}`) },
      };
    }
    return { ok: true, value: body as T };
  }

  status(): Promise<ApiResult<StatusSnapshot>> {
    return this.request("GET", "/status");
  }

  async nodes(): Promise<ApiResult<NodeRow[]>> {
    const result = await this.request<{ nodes: NodeRow[] }>("GET", "/nodes");
    return result.ok ? { ok: true, value: result.value.nodes } : result;
  }

  async metricsSeries(): Promise<ApiResult<RoundMetrics[]>> {
    const result = await this.request<{ series: RoundMetrics[] }>("GET", "/metrics-series");
    return result.ok ? { ok: true, value: result.value.series } : result;
  }

  async evalMatrix(): Promise<ApiResult<MatrixRow[]>> {
    const result = await this.request<{ matrix: MatrixRow[] }>("GET", "/eval-matrix");
    return result.ok ? { ok: true, value: result.value.matrix } : result;
  }

  /** POST an operator command; aside from this method the client never mutates. */
  act(action: OperatorAction, nodeId?: string): Promise<ApiResult<StatusSnapshot>> {
    const path =
      action === "approve" || action === "evict"
        ? `/nodes/${encodeURIComponent(nodeId ?? "")}/${action}`
        : `/federation/${action}`;
    return this.request("POST", path);
  }
}

function errText(body: unknown, fallback: string): string {
  if (body && typeof body === "object" && "error" in body) {
    return String((body as { error: unknown }).error);
  }
  return fallback;
}
