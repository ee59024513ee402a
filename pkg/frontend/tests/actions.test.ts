import { describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api.js";
import { actionEnabled, needsConfirmation, runAction } from "../src/actions.js";
import type { FederationStatus, NodeRow } from "../src/types.js";

function node(overrides: Partial<NodeRow> = {}): NodeRow {
  return {
    node_id: "x",
    approval: "Pending",
    liveness: "Connected",
    last_seen: 0,
    contributed_rounds: [],
    ...overrides,
  };
}

function apiReturning(status: number, body: unknown): ApiClient {
  const fetchImpl = vi.fn(async () =>
    new Response(JSON.stringify(body), { status, headers: { "Content-Type": "application/json" } }),
  );
  const api = new ApiClient("http://c:1", "tok", fetchImpl);
  return Object.assign(api, { fetchImpl }) as ApiClient & { fetchImpl: typeof fetchImpl };
}

describe("gating mirrors coordinator states exactly", () => {
  const table: Array<[FederationStatus, string[]]> = [
    ["WaitingForNodes", ["start"]],
    ["InRound", ["pause", "abort"]],
    ["Aggregating", []],
    ["Paused", ["resume", "abort"]],
    ["Finished", []],
    ["Aborted", []],
  ];
  for (const [status, allowed] of table) {
    it(`${status} allows exactly ${allowed.join(", ") || "nothing"}`, () => {
      for (const action of ["start", "pause", "resume", "abort"] as const) {
        expect(actionEnabled(action, status)).toBe(allowed.includes(action));
      }
    });
  }

  it("approve only for pending nodes, evict for anything not yet evicted", () => {
    expect(actionEnabled("approve", "InRound", node())).toBe(true);
    expect(actionEnabled("approve", "InRound", node({ approval: "Approved" }))).toBe(false);
    expect(actionEnabled("evict", "InRound", node({ approval: "Approved" }))).toBe(true);
    expect(actionEnabled("evict", "InRound", node({ approval: "Evicted" }))).toBe(false);
  });
});

describe("confirmation and optimistic updates", () => {
  it("destructive actions require confirmation; declining sends nothing", async () => {
    expect(needsConfirmation("abort")).toBe(true);
    expect(needsConfirmation("evict")).toBe(true);
    expect(needsConfirmation("start")).toBe(false);

    const api = apiReturning(200, {}) as ApiClient & { fetchImpl: ReturnType<typeof vi.fn> };
    const outcome = await runAction(api, "abort", { confirm: () => false });
    expect(outcome).toBeNull();
    expect(api.fetchImpl).not.toHaveBeenCalled();
  });

  it("updates state only after a 2xx response", async () => {
    const snapshot = { round: 2, total_rounds: 20, status: "Paused" };
    const api = apiReturning(200, snapshot);
    const outcome = await runAction(api, "pause", { confirm: () => true });
    expect(outcome?.ok).toBe(true);
    expect(outcome?.snapshot?.status).toBe("Paused");
  });

  it("surfaces Conflict verbatim", async () => {
    const api = apiReturning(409, { error: "federation is InRound" });
    const outcome = await runAction(api, "start", { confirm: () => true });
    expect(outcome?.ok).toBe(false);
    expect(outcome?.toast).toContain("federation is InRound");
  });

  it("flags unauthorized so the UI can re-prompt for the token", async () => {
    const api = apiReturning(401, { error: "operator token required" });
    const outcome = await runAction(api, "approve", { nodeId: "n1", confirm: () => true });
    expect(outcome?.ok).toBe(false);
    expect(outcome?.unauthorized).toBe(true);
  });

  it("routes node actions to /nodes/{id}/{action}", async () => {
    const api = apiReturning(200, {}) as ApiClient & { fetchImpl: ReturnType<typeof vi.fn> };
    await runAction(api, "approve", { nodeId: "site b", confirm: () => true });
    const url = api.fetchImpl.mock.calls[0][0] as string;
    expect(url).toBe("http://c:1/nodes/site%20b/approve");
    const init = api.fetchImpl.mock.calls[0][1] as RequestInit;
    expect(init.method).toBe("POST");
    expect((init.headers as Record<string, string>).Authorization).toBe("Bearer tok");
  });
});
