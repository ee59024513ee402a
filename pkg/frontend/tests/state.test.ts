import { describe, expect, it } from "vitest";

import {
  initialState,
  loggedIn,
  nodeIsStale,
  pollFailed,
  pollSucceeded,
  progressPercent,
  STALE_AFTER_MISSES,
} from "../src/state.js";
import type { PollPayload, StatusSnapshot } from "../src/types.js";

function snapshot(overrides: Partial<StatusSnapshot> = {}): StatusSnapshot {
  return {
    round: 5,
    total_rounds: 20,
    status: "InRound",
    received: 3,
    expected: 8,
    expected_nodes: [],
    received_nodes: [],
    aggregations: 4,
    ...overrides,
  };
}

function payload(overrides: Partial<StatusSnapshot> = {}): PollPayload {
  return { status: snapshot(overrides), nodes: [], series: [], matrix: [] };
}

describe("poll state machine", () => {
  it("renders only from the last successful snapshot", () => {
    let state = loggedIn(initialState());
    state = pollSucceeded(state, payload(), 1000);
    const good = state.snapshot;
    state = pollFailed(state, { kind: "network", message: "boom" });
    expect(state.snapshot).toBe(good); // stale data kept, not replaced
    expect(state.lastError).toBe("boom");
  });

  it("flags stale after three consecutive missed polls, then recovers", () => {
    let state = pollSucceeded(loggedIn(initialState()), payload(), 0);
    for (let miss = 1; miss <= STALE_AFTER_MISSES; miss++) {
      state = pollFailed(state, { kind: "network", message: `miss ${miss}` });
      expect(state.stale).toBe(miss >= 3);
      expect(state.missedPolls).toBe(miss);
    }
    state = pollSucceeded(state, payload(), 99);
    expect(state.stale).toBe(false);
    expect(state.missedPolls).toBe(0);
  });

  it("returns to login on unauthorized without crashing the view", () => {
    let state = pollSucceeded(loggedIn(initialState()), payload(), 0);
    state = pollFailed(state, { kind: "unauthorized", message: "token revoked" });
    expect(state.phase).toBe("login");
    expect(state.unauthorized).toBe(true);
    expect(state.snapshot).not.toBeNull(); // last view preserved behind the prompt
  });
});

describe("progress", () => {
  it("renders round 5 of 20 as 25%", () => {
    expect(progressPercent(snapshot({ round: 5, total_rounds: 20 }))).toBe(25);
  });

  it("caps at 100 and treats Finished as complete", () => {
    expect(progressPercent(snapshot({ round: 20, total_rounds: 20, status: "Finished" }))).toBe(100);
    expect(progressPercent(snapshot({ round: 0, total_rounds: 20, status: "WaitingForNodes" }))).toBe(0);
  });
});

describe("node staleness", () => {
  const base = {
    node_id: "a",
    approval: "Approved" as const,
    contributed_rounds: [1, 2],
  };

  it("flags rows the coordinator marked Stale", () => {
    expect(nodeIsStale({ ...base, liveness: "Stale", last_seen: 0 }, 100)).toBe(true);
  });

  it("flags connected rows that went silent", () => {
    expect(nodeIsStale({ ...base, liveness: "Connected", last_seen: 50 }, 100, 15)).toBe(true);
    expect(nodeIsStale({ ...base, liveness: "Connected", last_seen: 95 }, 100, 15)).toBe(false);
  });

  it("does not flag disconnected rows as stale", () => {
    expect(nodeIsStale({ ...base, liveness: "Disconnected", last_seen: 1 }, 100)).toBe(false);
  });
});
