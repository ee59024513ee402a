import { describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api.js";

function client(responder: (url: string) => Response) {
  const fetchImpl = vi.fn(async (url: string) => responder(url));
  return { api: new ApiClient("http://c:9/", "tok", fetchImpl), fetchImpl };
}

const json = (body: unknown, status = 200) =>
  new Response(JSON.stringify(body), { status, headers: { "Content-Type": "application/json" } });

describe("ApiClient", () => {
  it("normalizes the base URL and unwraps list envelopes", async () => {
    const { api, fetchImpl } = client((url) => {
      if (url.endsWith("/nodes")) return json({ nodes: [{ node_id: "a" }] });
      if (url.endsWith("/metrics-series")) return json({ series: [{ round: 1 }] });
      if (url.endsWith("/eval-matrix")) return json({ matrix: [] });
      return json({ status: "InRound" });
    });
    const nodes = await api.nodes();
    expect(nodes.ok && nodes.value[0].node_id).toBe("a");
    const series = await api.metricsSeries();
    expect(series.ok && series.value[0].round).toBe(1);
    expect((fetchImpl.mock.calls[0][0] as string).startsWith("http://c:9/nodes")).toBe(true);
  });

  it("classifies 401 and 409 distinctly and catches network errors", async () => {
    const unauthorized = new ApiClient("http://c:9", "tok", async () => json({ error: "nope" }, 401));
    const conflictful = new ApiClient("http://c:9", "tok", async () => json({ error: "busy" }, 409));
    const flaky = new ApiClient("http://c:9", "tok", async () => {
      throw new TypeError("connection refused");
    });
    const a = await unauthorized.status();
    const b = await conflictful.status();
    const c = await flaky.status();
    expect(!a.ok && a.error.kind).toBe("unauthorized");
    expect(!b.ok && b.error.kind === "conflict" && b.error.message).toBe("busy");
    expect(!c.ok && c.error.kind).toBe("network");
  });

  it("never sends the token anywhere but the Authorization header", async () => {
    const { api, fetchImpl } = client(() => json({}));
    await api.status();
    const [url, init] = fetchImpl.mock.calls[0] as [string, RequestInit];
    expect(url).not.toContain("tok");
    expect((init.headers as Record<string, string>).Authorization).toBe("Bearer tok");
  });
});
