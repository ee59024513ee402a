/** Payload shapes of the coordinator control API (see PROTOCOL.md). */

export type FederationStatus =
  | "WaitingForNodes"
  | "InRound"
  | "Aggregating"
  | "Paused"
  | "Finished"
  | "Aborted";

export interface StatusSnapshot {
  round: number;
  total_rounds: number;
  status: FederationStatus;
  received: number;
  expected: number;
  expected_nodes: string[];
  received_nodes: string[];
  aggregations: number;
}

export interface NodeRow {
  node_id: string;
  approval: "Pending" | "Approved" | "Evicted";
  liveness: "Connected" | "Disconnected" | "Stale";
  last_seen: number;
  contributed_rounds: number[];
}

export interface RoundMetrics {
  round: number;
  contributors?: string[];
  aggregate?: Record<string, number>;
  reports?: Record<string, Record<string, number>>;
}

export interface MatrixRow {
  model_site: string;
  test_site: string;
  tp: number;
  fp: number;
  tn: number;
  fn: number;
  sensitivity: number | null;
  specificity: number | null;
  balanced_accuracy: number | null;
  accuracy: number | null;
  roc_auc: number | null;
}

export type OperatorAction = "approve" | "evict" | "start" | "pause" | "resume" | "abort";

export type ApiFailure =
  | { kind: "unauthorized"; message: string }
  | { kind: "conflict"; message: string }
  | { kind: "network"; message: string }
  | { kind: "http"; message: string; status: number };

export type ApiResult<T> = { ok: true; value: T } | { ok: false; error: ApiFailure };
