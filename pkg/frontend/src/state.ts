/** Dashboard view-model: everything rendered derives from this state.
 *
 * The poll reducer is pure so the staleness rules are directly testable:
 * rendered data always comes from the last successful fetch, and the view is
 * flagged stale after three consecutive missed polls.
 */

import type {
  ApiFailure,
  MatrixRow,
  NodeRow,
  RoundMetrics,
  StatusSnapshot,
} from "./types.js";

export const STALE_AFTER_MISSES = 3;

export interface PollPayload {
  status: StatusSnapshot;
  nodes: NodeRow[];
  series: RoundMetrics[];
  matrix: MatrixRow[];
}

export interface DashboardState {
  phase: "login" | "active";
  snapshot: PollPayload | null;
  lastSuccessAt: number | null;
  missedPolls: number;
  stale: boolean;
  unauthorized: boolean;
  lastError: string | null;
}

export function initialState(): DashboardState {
  return {
    phase: "login",
    snapshot: null,
    lastSuccessAt: null,
    missedPolls: 0,
    stale: false,
    unauthorized: false,
    lastError: null,
  };
}

export function loggedIn(state: DashboardState): DashboardState {
  return { ...state, phase: "active", unauthorized: false, lastError: null };
}

export function pollSucceeded(
  state: DashboardState,
  payload: PollPayload,
  now: number,
): DashboardState {
  return {
    ...state,
    phase: "active",
    snapshot: payload,
    lastSuccessAt: now,
    missedPolls: 0,
    stale: false,
    unauthorized: false,
    lastError: null,
  };
}

export function pollFailed(state: DashboardState, error: ApiFailure): DashboardState {
  if (error.kind === "unauthorized") {
    // token revoked mid-session: back to the login prompt, keep the last view
    return { ...state, phase: "login", unauthorized: true, lastError: error.message };
  }
  const missed = state.missedPolls + 1;
  return {
    ...state,
    missedPolls: missed,
    stale: missed >= STALE_AFTER_MISSES,
    lastError: error.message,
  };
}

/** Percent complete for the progress bar; InRound 5/20 renders as 25%. */
export function progressPercent(status: StatusSnapshot): number {
  if (status.total_rounds <= 0) {
    return 0;
  }
  const base = status.status === "Finished" ? status.total_rounds : status.round;
  return Math.max(0, Math.min(100, Math.round((base / status.total_rounds) * 100)));
}

/** Rows flagged Stale either by the coordinator or by silence on our clock. */
export function nodeIsStale(row: NodeRow, nowSeconds: number, silenceAfter = 15): boolean {
  if (row.liveness === "Stale") {
    return true;
  }
  return (
    row.liveness === "Connected" &&
    row.last_seen > 0 &&
    nowSeconds - row.last_seen > silenceAfter
  );
}
