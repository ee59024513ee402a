"""Federation coordinator: round state machine, aggregation, checkpoints.

The core is transport-agnostic and single-writer: every mutation flows through
one CoordinatorCore instance, with `now` supplied by the caller so the same
code runs under the real TCP server (wall clock, one lock) and the
deterministic simulator (virtual clock, single thread). Checkpoints are
written after every state change that affects the eventual global model, so a
coordinator restarted from its checkpoint file continues the same round with
the same received set and produces a bit-identical final model.
"""

from __future__ import annotations

import json
import math
import os
import secrets
import struct
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import (
    AlreadyRunning,
    BadProof,
    Conflict,
    CorruptCheckpoint,
    InsufficientNodes,
    NonceExpired,
    NonceReused,
    NotExpected,
    StructureMismatch,
    WrongRound,
)
from . import protocol
from .protocol import (
    ChallengeStore,
    Frame,
    ResumeDecision,
    resume_decision,
)
from .tensors import TensorMap, WeightedUpdate, aggregate, deserialize, serialize

CHECKPOINT_MAGIC = b"FCK1"
CHECKPOINT_FILENAME = "federation.ckpt"


class RoundStatus(Enum):
    WAITING_FOR_NODES = "WaitingForNodes"
    IN_ROUND = "InRound"
    AGGREGATING = "Aggregating"
    PAUSED = "Paused"
    FINISHED = "Finished"
    ABORTED = "Aborted"


# legal transitions; anything else is a defect, not an operator error
_TRANSITIONS = {
    RoundStatus.WAITING_FOR_NODES: {RoundStatus.IN_ROUND},
    RoundStatus.IN_ROUND: {RoundStatus.AGGREGATING, RoundStatus.PAUSED, RoundStatus.ABORTED},
    RoundStatus.AGGREGATING: {RoundStatus.IN_ROUND, RoundStatus.FINISHED},
    RoundStatus.PAUSED: {RoundStatus.IN_ROUND, RoundStatus.ABORTED},
    RoundStatus.FINISHED: set(),
    RoundStatus.ABORTED: set(),
}


class Approval(Enum):
    PENDING = "Pending"
    APPROVED = "Approved"
    EVICTED = "Evicted"


class Liveness(Enum):
    CONNECTED = "Connected"
    DISCONNECTED = "Disconnected"
    STALE = "Stale"


@dataclass(frozen=True)
class FederationConfig:
    total_rounds: int = 20
    epochs_per_round: int = 10
    quorum_fraction: float = 1.0
    round_timeout: Optional[float] = None
    min_nodes: int = 1
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.total_rounds < 1 or self.epochs_per_round < 1 or self.min_nodes < 1:
            raise ValueError("total_rounds, epochs_per_round, min_nodes must be >= 1")
        if not 0.0 < self.quorum_fraction <= 1.0:
            raise ValueError("quorum_fraction must be in (0, 1]")


@dataclass
class NodeRecord:
    node_id: str
    approval: Approval = Approval.PENDING
    liveness: Liveness = Liveness.DISCONNECTED
    last_seen: float = 0.0
    contributed_rounds: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class RoundState:
    round_index: int  # 1-based; 0 before the federation starts
    global_model: TensorMap
    expected_nodes: frozenset[str]
    received: dict[str, WeightedUpdate]
    status: RoundStatus
    deadline: Optional[float] = None


@dataclass
class _Conn:
    """Per-connection protocol state; authentication is per connection."""

    hello_node: Optional[str] = None
    nonce: Optional[bytes] = None
    resume_intent: bool = False
    session_id: Optional[bytes] = None
    node_id: Optional[str] = None

    @property
    def authenticated(self) -> bool:
        return self.session_id is not None


def quorum_threshold(quorum_fraction: float, expected: int) -> int:
    """ceil(quorum_fraction * expected), robust to float fuzz."""
    return math.ceil(round(quorum_fraction * expected, 9))


class CoordinatorCore:
    """Single-writer federation state machine with a framed-protocol front end."""

    def __init__(
        self,
        config: FederationConfig,
        initial_model: TensorMap,
        node_tokens: dict[str, bytes],
        *,
        auto_approve: Iterable[str] = (),
        nonce_source: Optional[Callable[[], bytes]] = None,
        session_source: Optional[Callable[[], bytes]] = None,
    ):
        self.config = config
        self.initial_model = initial_model
        self.node_tokens = dict(node_tokens)
        self.state = RoundState(
            round_index=0,
            global_model=initial_model,
            expected_nodes=frozenset(),
            received={},
            status=RoundStatus.WAITING_FOR_NODES,
        )
        self.nodes: dict[str, NodeRecord] = {
            node_id: NodeRecord(node_id) for node_id in self.node_tokens
        }
        for node_id in auto_approve:
            self.nodes[node_id].approval = Approval.APPROVED
        self.challenges = ChallengeStore()
        self._nonce_source = nonce_source or (lambda: secrets.token_bytes(protocol.NONCE_LEN))
        self._session_source = session_source or (lambda: secrets.token_bytes(protocol.SESSION_ID_LEN))
        self._conns: dict[object, _Conn] = {}
        self._sessions: dict[bytes, str] = {}
        self._node_conns: dict[str, object] = {}
        self.event_log: list[dict] = []
        self.metrics_history: dict[int, dict] = {}
        self._eval_matrix: list[dict] = []
        self._checkpoint_path: Optional[Path] = (
            Path(config.checkpoint_dir) / CHECKPOINT_FILENAME if config.checkpoint_dir else None
        )

    # --- event log -------------------------------------------------------------

    def _log(self, event: str, **fields) -> None:
        entry = {"seq": len(self.event_log), "event": event}
        entry.update(fields)
        self.event_log.append(entry)

    def aggregation_count(self) -> int:
        return sum(1 for e in self.event_log if e["event"] == "aggregated")

    # --- status handling ----------------------------------------------------------

    def _set_status(self, new: RoundStatus) -> None:
        if new is self.state.status:
            return
        if new not in _TRANSITIONS[self.state.status]:
            raise AssertionError(f"illegal transition {self.state.status} -> {new}")
        self.state = replace(self.state, status=new)

    def _approved_nodes(self) -> frozenset[str]:
        return frozenset(
            n for n, rec in self.nodes.items() if rec.approval is Approval.APPROVED
        )

    # --- operator commands ----------------------------------------------------------

    def register_node(self, node_id: str, token: bytes, approved: bool = False) -> None:
        self.node_tokens[node_id] = token
        self.nodes.setdefault(node_id, NodeRecord(node_id))
        if approved:
            self.nodes[node_id].approval = Approval.APPROVED

    def approve_node(self, node_id: str, now: float = 0.0) -> None:
        if node_id not in self.nodes:
            raise Conflict(f"unknown node {node_id!r}")
        self.nodes[node_id].approval = Approval.APPROVED
        self._log("node_approved", node=node_id)
        self._save_checkpoint()

    def evict_node(self, node_id: str, now: float = 0.0) -> None:
        if node_id not in self.nodes:
            raise Conflict(f"unknown node {node_id!r}")
        self.nodes[node_id].approval = Approval.EVICTED
        self._log("node_evicted", node=node_id)
        self._save_checkpoint()

    def start_federation(self, now: float) -> list[tuple[object, Frame]]:
        if self.state.status is not RoundStatus.WAITING_FOR_NODES:
            raise AlreadyRunning(f"federation is {self.state.status.value}")
        approved = self._approved_nodes()
        if len(approved) < self.config.min_nodes:
            raise InsufficientNodes(
                f"{len(approved)} approved nodes, need {self.config.min_nodes}"
            )
        self.state = RoundState(
            round_index=1,
            global_model=self.initial_model,
            expected_nodes=approved,
            received={},
            status=RoundStatus.WAITING_FOR_NODES,
            deadline=(now + self.config.round_timeout) if self.config.round_timeout else None,
        )
        self._set_status(RoundStatus.IN_ROUND)
        self._log("federation_started", expected=sorted(approved))
        self._log("round_started", round=1, expected=sorted(approved),
                  epochs=self.config.epochs_per_round)
        self._save_checkpoint()
        return self._broadcast_round_start()

    def pause(self, reason: str = "operator") -> None:
        if self.state.status is not RoundStatus.IN_ROUND:
            raise Conflict(f"cannot pause while {self.state.status.value}")
        self._set_status(RoundStatus.PAUSED)
        self._log("paused", reason=reason)
        self._save_checkpoint()

    def resume(self, now: float) -> list[tuple[object, Frame]]:
        if self.state.status is not RoundStatus.PAUSED:
            raise Conflict(f"cannot resume while {self.state.status.value}")
        deadline = (now + self.config.round_timeout) if self.config.round_timeout else None
        self.state = replace(self.state, deadline=deadline)
        self._set_status(RoundStatus.IN_ROUND)
        self._log("resumed", round=self.state.round_index)
        self._save_checkpoint()
        round_before = self.state.round_index
        out = self.try_advance(now)
        if self.state.round_index == round_before and self.state.status is RoundStatus.IN_ROUND:
            out.extend(self._broadcast_round_start(only_missing=True))
        return out

    def abort(self, reason: str = "operator") -> list[tuple[object, Frame]]:
        if self.state.status not in (RoundStatus.IN_ROUND, RoundStatus.PAUSED):
            raise Conflict(f"cannot abort while {self.state.status.value}")
        self._set_status(RoundStatus.ABORTED)
        self._log("aborted", reason=reason)
        self._save_checkpoint()
        payload = protocol.encode_payload({"reason": "aborted"})
        return [
            (conn_id, Frame(protocol.SHUTDOWN, payload))
            for conn_id, conn in self._conns.items()
            if conn.authenticated
        ]

    # --- round progression -----------------------------------------------------------

    def submit_update(
        self,
        node_id: str,
        round_index: int,
        update: WeightedUpdate,
        now: float,
        report: Optional[dict] = None,
    ) -> bool:
        """Store one node's update. Returns True if stored, False if duplicate."""
        state = self.state
        if state.status not in (RoundStatus.IN_ROUND, RoundStatus.PAUSED):
            raise WrongRound(f"no open round (status {state.status.value})")
        if round_index != state.round_index:
            raise WrongRound(f"update for round {round_index}, current round is {state.round_index}")
        if node_id not in state.expected_nodes:
            raise NotExpected(f"node {node_id!r} is not expected this round")
        if update.weights.structure() != state.global_model.structure():
            raise StructureMismatch(f"update from {node_id!r} does not match the global model")
        if node_id in state.received:
            self._log("duplicate_update", node=node_id, round=round_index)
            return False
        received = dict(state.received)
        received[node_id] = update
        self.state = replace(state, received=received)
        self.nodes[node_id].contributed_rounds.add(round_index)
        self._log("update_stored", node=node_id, round=round_index, sample_count=update.sample_count)
        if report:
            self.metrics_history.setdefault(round_index, {"round": round_index, "reports": {}})
            self.metrics_history[round_index]["reports"][node_id] = report
        self._save_checkpoint()
        return True

    def try_advance(self, now: float) -> list[tuple[object, Frame]]:
        """Aggregate when complete (or quorum past deadline); no-op otherwise."""
        state = self.state
        if state.status is not RoundStatus.IN_ROUND:
            return []
        complete = len(state.received) == len(state.expected_nodes) and state.expected_nodes
        past_deadline = state.deadline is not None and now >= state.deadline
        if complete:
            return self._aggregate_and_advance(now)
        if past_deadline:
            threshold = quorum_threshold(self.config.quorum_fraction, len(state.expected_nodes))
            if len(state.received) >= threshold and state.received:
                for node_id in state.expected_nodes - set(state.received):
                    self.nodes[node_id].liveness = Liveness.STALE
                    self._log("node_stale", node=node_id, round=state.round_index)
                return self._aggregate_and_advance(now)
            self._set_status(RoundStatus.PAUSED)
            self._log(
                "paused",
                reason="quorum_failure",
                round=state.round_index,
                received=len(state.received),
                expected=len(state.expected_nodes),
            )
            self._save_checkpoint()
        return []

    def _aggregate_and_advance(self, now: float) -> list[tuple[object, Frame]]:
        state = self.state
        self._set_status(RoundStatus.AGGREGATING)
        contributors = sorted(state.received)
        new_global = aggregate(state.received.values())
        self._summarize_round(state.round_index, state.received)
        self._log("aggregated", round=state.round_index, contributors=contributors)
        if state.round_index >= self.config.total_rounds:
            self.state = replace(
                self.state, global_model=new_global, received={}, deadline=None
            )
            self._set_status(RoundStatus.FINISHED)
            self._log("finished", rounds=state.round_index)
            self._save_checkpoint()
            payload = protocol.encode_payload({"reason": "finished"})
            return [
                (conn_id, Frame(protocol.SHUTDOWN, payload))
                for conn_id, conn in self._conns.items()
                if conn.authenticated
            ]
        next_round = state.round_index + 1
        self.state = RoundState(
            round_index=next_round,
            global_model=new_global,
            expected_nodes=self._approved_nodes(),
            received={},
            status=RoundStatus.AGGREGATING,
            deadline=(now + self.config.round_timeout) if self.config.round_timeout else None,
        )
        self._set_status(RoundStatus.IN_ROUND)
        self._log("round_started", round=next_round, expected=sorted(self.state.expected_nodes),
                  epochs=self.config.epochs_per_round)
        self._save_checkpoint()
        return self._broadcast_round_start()

    def _summarize_round(self, round_index: int, received: dict[str, WeightedUpdate]) -> None:
        entry = self.metrics_history.setdefault(round_index, {"round": round_index, "reports": {}})
        reports = entry["reports"]
        total = sum(u.sample_count for u in received.values())
        means: dict[str, float] = {}
        weights_acc: dict[str, float] = {}
        for node_id, update in received.items():
            node_report = reports.get(node_id) or {}
            for key, value in node_report.items():
                if isinstance(value, (int, float)) and value is not None:
                    means[key] = means.get(key, 0.0) + update.sample_count * float(value)
                    weights_acc[key] = weights_acc.get(key, 0.0) + update.sample_count
        entry["aggregate"] = {
            key: means[key] / weights_acc[key] for key in means if weights_acc.get(key)
        }
        entry["contributors"] = sorted(received)
        entry["total_samples"] = total

    # --- protocol front end -------------------------------------------------------------

    def connection_opened(self, conn_id: object) -> None:
        self._conns[conn_id] = _Conn()

    def connection_closed(self, conn_id: object) -> None:
        conn = self._conns.pop(conn_id, None)
        if conn and conn.node_id:
            if self._node_conns.get(conn.node_id) == conn_id:
                del self._node_conns[conn.node_id]
                record = self.nodes.get(conn.node_id)
                if record and record.liveness is Liveness.CONNECTED:
                    record.liveness = Liveness.DISCONNECTED

    def handle_frame(self, conn_id: object, frame: Frame, now: float) -> list[tuple[object, Frame]]:
        conn = self._conns.get(conn_id)
        if conn is None:
            self.connection_opened(conn_id)
            conn = self._conns[conn_id]
        handler = {
            protocol.HELLO: self._on_hello,
            protocol.AUTH_PROOF: self._on_auth_proof,
            protocol.ROUND_RESULT: self._on_round_result,
            protocol.RESUME_REQ: self._on_resume_req,
            protocol.HEARTBEAT: self._on_heartbeat,
            protocol.SHUTDOWN: self._on_node_shutdown,
        }.get(frame.msg_type)
        if handler is None:
            return [(conn_id, _error("unexpected_type", f"unexpected {frame.type_name}"))]
        if frame.msg_type not in (protocol.HELLO, protocol.AUTH_PROOF) and not conn.authenticated:
            return [(conn_id, _error("unauthenticated", "authenticate first"))]
        return handler(conn_id, conn, frame, now)

    def _on_hello(self, conn_id, conn: _Conn, frame: Frame, now: float):
        fields = protocol.decode_payload(frame.payload)
        node_id = str(fields.get("node_id", ""))
        if node_id not in self.node_tokens:
            return [(conn_id, _error("unknown_node", f"node {node_id!r} is not registered"))]
        conn.hello_node = node_id
        conn.resume_intent = bool(fields.get("resume", False))
        challenge = self.challenges.issue(now, nonce=self._nonce_source())
        conn.nonce = challenge.nonce
        payload = protocol.encode_payload(
            {"nonce": challenge.nonce.hex(), "ttl_seconds": self.challenges.ttl}
        )
        return [(conn_id, Frame(protocol.CHALLENGE, payload))]

    def _on_auth_proof(self, conn_id, conn: _Conn, frame: Frame, now: float):
        fields = protocol.decode_payload(frame.payload)
        node_id = str(fields.get("node_id", ""))
        if conn.hello_node != node_id or conn.nonce is None:
            return [(conn_id, _error("auth_failed", "no pending challenge for this node"))]
        try:
            proof = bytes.fromhex(str(fields.get("proof", "")))
        except ValueError:
            return [(conn_id, _error("auth_failed", "proof is not valid hex"))]
        try:
            self.challenges.verify(self.node_tokens[node_id], conn.nonce, node_id, proof, now)
        except (BadProof, NonceExpired, NonceReused) as exc:
            self._log("auth_rejected", node=node_id, reason=type(exc).__name__)
            return [(conn_id, _error("auth_failed", str(exc)))]
        finally:
            conn.nonce = None
        session_id = self._session_source()
        conn.session_id = session_id
        conn.node_id = node_id
        self._sessions[session_id] = node_id
        self._node_conns[node_id] = conn_id
        record = self.nodes[node_id]
        record.liveness = Liveness.CONNECTED
        record.last_seen = now
        out = [(
            conn_id,
            Frame(protocol.JOIN_ACK, protocol.encode_payload({
                "session_id": session_id.hex(),
                "node_id": node_id,
                "approval": record.approval.value,
                "total_rounds": self.config.total_rounds,
            })),
        )]
        # fresh joins get the open round immediately; resuming nodes ask first
        if not conn.resume_intent and self._should_deliver_round(node_id):
            out.append((conn_id, self._round_start_frame()))
        if self.state.status in (RoundStatus.FINISHED, RoundStatus.ABORTED):
            reason = "finished" if self.state.status is RoundStatus.FINISHED else "aborted"
            out.append((conn_id, Frame(protocol.SHUTDOWN, protocol.encode_payload({"reason": reason}))))
        return out

    def _should_deliver_round(self, node_id: str) -> bool:
        return (
            self.state.status is RoundStatus.IN_ROUND
            and node_id in self.state.expected_nodes
            and node_id not in self.state.received
        )

    def _round_start_frame(self) -> Frame:
        header = {
            "round": self.state.round_index,
            "total_rounds": self.config.total_rounds,
            "epochs": self.config.epochs_per_round,
        }
        payload = protocol.encode_tensor_payload(header, self.state.global_model)
        return Frame(protocol.ROUND_START, payload)

    def _broadcast_round_start(self, only_missing: bool = False) -> list[tuple[object, Frame]]:
        frame = self._round_start_frame()
        out = []
        for node_id in sorted(self.state.expected_nodes):
            if only_missing and node_id in self.state.received:
                continue
            conn_id = self._node_conns.get(node_id)
            if conn_id is not None:
                out.append((conn_id, frame))
        return out

    def _on_round_result(self, conn_id, conn: _Conn, frame: Frame, now: float):
        header, weights = protocol.decode_tensor_payload(frame.payload)
        node_id = str(header.get("node_id", conn.node_id))
        if node_id != conn.node_id:
            return [(conn_id, _error("unauthenticated", "result node does not match session"))]
        round_index = int(header.get("round", -1))
        sample_count = int(header.get("sample_count", 0))
        if sample_count < 1:
            return [(conn_id, _error("structure_mismatch", f"bad sample_count {sample_count}"))]
        update = WeightedUpdate(weights, sample_count, node_id)
        self.nodes[node_id].last_seen = now
        try:
            stored = self.submit_update(
                node_id, round_index, update, now, report=header.get("metrics") or None
            )
        except WrongRound as exc:
            return [(conn_id, _error("wrong_round", str(exc)))]
        except NotExpected as exc:
            return [(conn_id, _error("not_expected", str(exc)))]
        except StructureMismatch as exc:
            return [(conn_id, _error("structure_mismatch", str(exc)))]
        ack = Frame(protocol.ROUND_ACK, protocol.encode_payload(
            {"round": round_index, "stored": True, "duplicate": not stored}
        ))
        return [(conn_id, ack)] + self.try_advance(now)

    def _on_resume_req(self, conn_id, conn: _Conn, frame: Frame, now: float):
        fields = protocol.decode_payload(frame.payload)
        try:
            session_id = bytes.fromhex(str(fields.get("session_id", "")))
        except ValueError:
            session_id = b""
        node_id = str(fields.get("node_id", ""))
        known = self._sessions.get(session_id) == node_id and node_id == conn.node_id
        decision = resume_decision(
            session_known=known,
            finished=self.state.status in (RoundStatus.FINISHED, RoundStatus.ABORTED),
            in_round=(
                self.state.status is RoundStatus.IN_ROUND
                and node_id in self.state.expected_nodes
            ),
            node_contributed=node_id in self.state.received,
        )
        out = [(conn_id, Frame(protocol.RESUME_STATE, protocol.encode_payload(
            {"decision": decision.value, "round": self.state.round_index}
        )))]
        if decision is ResumeDecision.RESUME and node_id in self.state.expected_nodes:
            out.append((conn_id, self._round_start_frame()))
        return out

    def _on_heartbeat(self, conn_id, conn: _Conn, frame: Frame, now: float):
        if conn.node_id:
            self.nodes[conn.node_id].last_seen = now
        return []

    def _on_node_shutdown(self, conn_id, conn: _Conn, frame: Frame, now: float):
        self.connection_closed(conn_id)
        return []

    def tick(self, now: float) -> list[tuple[object, Frame]]:
        """Deadline/quorum sweep; call periodically from the hosting runtime."""
        self.challenges.sweep(now)
        return self.try_advance(now)

    # --- snapshots -------------------------------------------------------------------

    def status_snapshot(self) -> dict:
        state = self.state
        return {
            "round": state.round_index,
            "total_rounds": self.config.total_rounds,
            "status": state.status.value,
            "received": len(state.received),
            "expected": len(state.expected_nodes),
            "expected_nodes": sorted(state.expected_nodes),
            "received_nodes": sorted(state.received),
            "aggregations": self.aggregation_count(),
        }

    def nodes_snapshot(self) -> list[dict]:
        return [
            {
                "node_id": rec.node_id,
                "approval": rec.approval.value,
                "liveness": rec.liveness.value,
                "last_seen": rec.last_seen,
                "contributed_rounds": sorted(rec.contributed_rounds),
            }
            for rec in sorted(self.nodes.values(), key=lambda r: r.node_id)
        ]

    def round_metrics(self, round_index: int) -> dict:
        if round_index not in self.metrics_history:
            raise Conflict(f"no metrics recorded for round {round_index}")
        return self.metrics_history[round_index]

    def metrics_series(self) -> list[dict]:
        return [self.metrics_history[r] for r in sorted(self.metrics_history)]

    def set_eval_matrix(self, rows: list[dict]) -> None:
        self._eval_matrix = list(rows)
        self._save_checkpoint()

    def eval_matrix(self) -> list[dict]:
        return list(self._eval_matrix)

    # --- checkpointing ------------------------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        manifest = {
            "version": 1,
            "round_index": self.state.round_index,
            "status": self.state.status.value,
            "total_rounds": self.config.total_rounds,
            "epochs_per_round": self.config.epochs_per_round,
            "quorum_fraction": self.config.quorum_fraction,
            "round_timeout": self.config.round_timeout,
            "min_nodes": self.config.min_nodes,
            "expected": sorted(self.state.expected_nodes),
            "received": [
                {"node_id": n, "sample_count": self.state.received[n].sample_count}
                for n in sorted(self.state.received)
            ],
            "nodes": [
                {
                    "node_id": rec.node_id,
                    "approval": rec.approval.value,
                    "contributed_rounds": sorted(rec.contributed_rounds),
                }
                for rec in sorted(self.nodes.values(), key=lambda r: r.node_id)
            ],
            "sessions": [
                {"session_id": sid.hex(), "node_id": node_id}
                for sid, node_id in sorted(self._sessions.items())
            ],
            "metrics_history": {str(k): v for k, v in self.metrics_history.items()},
            "event_log": self.event_log,
            "eval_matrix": self._eval_matrix,
        }
        manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        model_bytes = serialize(self.state.global_model)
        body = bytearray(CHECKPOINT_MAGIC)
        body += struct.pack(">I", len(manifest_bytes))
        body += manifest_bytes
        body += struct.pack(">I", len(model_bytes))
        body += model_bytes
        for node_id in sorted(self.state.received):
            blob = serialize(self.state.received[node_id].weights)
            body += struct.pack(">I", len(blob))
            body += blob
        body += struct.pack(">I", zlib.crc32(bytes(body)))
        return bytes(body)

    def _save_checkpoint(self) -> None:
        if self._checkpoint_path is None:
            return
        self._checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self._checkpoint_path.with_suffix(".tmp")
        tmp.write_bytes(self.checkpoint_bytes())
        os.replace(tmp, self._checkpoint_path)

    def save_checkpoint(self, path) -> None:
        Path(path).write_bytes(self.checkpoint_bytes())

    @classmethod
    def restore(
        cls,
        path,
        node_tokens: dict[str, bytes],
        *,
        now: float = 0.0,
        checkpoint_dir: Optional[str] = None,
        nonce_source: Optional[Callable[[], bytes]] = None,
        session_source: Optional[Callable[[], bytes]] = None,
    ) -> "CoordinatorCore":
        """Rebuild a coordinator from a checkpoint file; resumes the same round."""
        path = Path(path)
        raw = path.read_bytes()
        manifest, model, received_blobs = _parse_checkpoint(raw)
        config = FederationConfig(
            total_rounds=manifest["total_rounds"],
            epochs_per_round=manifest["epochs_per_round"],
            quorum_fraction=manifest["quorum_fraction"],
            round_timeout=manifest["round_timeout"],
            min_nodes=manifest["min_nodes"],
            checkpoint_dir=checkpoint_dir if checkpoint_dir is not None else str(path.parent),
        )
        core = cls(
            config,
            model,
            node_tokens,
            nonce_source=nonce_source,
            session_source=session_source,
        )
        received = {}
        for meta, blob in zip(manifest["received"], received_blobs):
            received[meta["node_id"]] = WeightedUpdate(
                deserialize(blob), meta["sample_count"], meta["node_id"]
            )
        status = RoundStatus(manifest["status"])
        deadline = (now + config.round_timeout) if (
            config.round_timeout and status is RoundStatus.IN_ROUND
        ) else None
        core.state = RoundState(
            round_index=manifest["round_index"],
            global_model=model,
            expected_nodes=frozenset(manifest["expected"]),
            received=received,
            status=status,
            deadline=deadline,
        )
        for entry in manifest["nodes"]:
            record = core.nodes.setdefault(entry["node_id"], NodeRecord(entry["node_id"]))
            record.approval = Approval(entry["approval"])
            record.contributed_rounds = set(entry["contributed_rounds"])
            record.liveness = Liveness.DISCONNECTED
        core._sessions = {
            bytes.fromhex(s["session_id"]): s["node_id"] for s in manifest["sessions"]
        }
        core.metrics_history = {int(k): v for k, v in manifest["metrics_history"].items()}
        core.event_log = manifest["event_log"]
        core._eval_matrix = manifest.get("eval_matrix", [])
        core._log("restored_from_checkpoint", round=manifest["round_index"])
        return core


def _parse_checkpoint(raw: bytes) -> tuple[dict, TensorMap, list[bytes]]:
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("not a federation checkpoint")
    body, (crc,) = raw[:-4], struct.unpack(">I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CorruptCheckpoint("truncated checkpoint body")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (manifest_len,) = struct.unpack(">I", take(4))
    try:
        manifest = json.loads(take(manifest_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"manifest is not valid JSON: {exc}") from exc
    (model_len,) = struct.unpack(">I", take(4))
    model = deserialize(take(model_len))
    blobs = []
    for _ in manifest.get("received", []):
        (blob_len,) = struct.unpack(">I", take(4))
        blobs.append(take(blob_len))
    if pos != len(body):
        raise CorruptCheckpoint("trailing bytes in checkpoint")
    return manifest, model, blobs


def _error(code: str, message: str) -> Frame:
    return Frame(protocol.ERROR, protocol.encode_payload({"code": code, "message": message}))
