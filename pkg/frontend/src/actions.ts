/** Operator action gating: what is allowed in which state, and what needs
 * confirming. No mutating request is ever issued except through runAction,
 * and runAction is only called from explicit button handlers.
 */

import type { ApiClient } from "./api.js";
import type {
  ApiResult,
  FederationStatus,
  NodeRow,
  OperatorAction,
  StatusSnapshot,
} from "./types.js";

export const DESTRUCTIVE: ReadonlySet<OperatorAction> = new Set(["evict", "abort"]);

const FEDERATION_ACTIONS: Record<string, FederationStatus[]> = {
  start: ["WaitingForNodes"],
  pause: ["InRound"],
  resume: ["Paused"],
  abort: ["InRound", "Paused"],
};

export function actionEnabled(
  action: OperatorAction,
  status: FederationStatus,
  node?: NodeRow,
): boolean {
  if (action === "approve") {
    return node !== undefined && node.approval === "Pending";
  }
  if (action === "evict") {
    return node !== undefined && node.approval !== "Evicted";
  }
  return (FEDERATION_ACTIONS[action] ?? []).includes(status);
}

export function needsConfirmation(action: OperatorAction): boolean {
  return DESTRUCTIVE.has(action);
}

export interface ActionOutcome {
  ok: boolean;
  toast: string;
  unauthorized: boolean;
  snapshot?: StatusSnapshot;
}

/** Run one operator action; `confirm` is consulted only for destructive ones.
 * The UI is updated optimistically only after a 2xx response.
 */
export async function runAction(
  api: ApiClient,
  action: OperatorAction,
  options: { nodeId?: string; confirm: (prompt: string) => boolean },
): Promise<ActionOutcome | null> {
  if (needsConfirmation(action)) {
    const target = options.nodeId ? ` ${options.nodeId}` : "";
    if (!options.confirm(`Really ${action}${target}? This cannot be undone.`)) {
      return null; // declined; no request is sent
    }
  }
  const result: ApiResult<StatusSnapshot> = await api.act(action, options.nodeId);
  if (result.ok) {
    const target = options.nodeId ? ` ${options.nodeId}` : "";
    return {
      ok: true,
      toast: `${action}${target}: ok`,
      unauthorized: false,
      snapshot: result.value,
    };
  }
  return {
    ok: false,
    toast: `${action} failed: ${result.error.message}`,
    unauthorized: result.error.kind === "unauthorized",
  };
}
