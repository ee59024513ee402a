"""Coordinator state machine, protocol handling, and checkpoint tests."""

import itertools

import numpy as np
import pytest

from fedorch import protocol
from fedorch.coordinator import (
    Approval,
    CoordinatorCore,
    FederationConfig,
    Liveness,
    RoundStatus,
    quorum_threshold,
)
from fedorch.errors import (
    AlreadyRunning,
    Conflict,
    CorruptCheckpoint,
    InsufficientNodes,
    NotExpected,
    StructureMismatch,
    WrongRound,
)
from fedorch.protocol import Frame, prove
from fedorch.tensors import TensorMap, WeightedUpdate, aggregate


MODEL = TensorMap([("w0", (2, 1), [0.5, -0.5]), ("b0", (1,), [0.0])])
TOKENS = {"a": b"tok-a", "b": b"tok-b", "c": b"tok-c"}


def counters():
    nonce_counter = itertools.count()
    session_counter = itertools.count()
    return (
        lambda: next(nonce_counter).to_bytes(protocol.NONCE_LEN, "big"),
        lambda: next(session_counter).to_bytes(protocol.SESSION_ID_LEN, "big"),
    )


def make_core(checkpoint_dir=None, approve=("a", "b"), **config_kwargs):
    nonce_source, session_source = counters()
    config = FederationConfig(
        min_nodes=2, checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None, **config_kwargs
    )
    return CoordinatorCore(
        config, MODEL, TOKENS, auto_approve=approve,
        nonce_source=nonce_source, session_source=session_source,
    )


def update_for(node_id, value, count=10):
    weights = TensorMap([("w0", (2, 1), [value, value]), ("b0", (1,), [value])])
    return WeightedUpdate(weights, count, node_id)


def authenticate(core, conn_id, node_id, now=0.0, resume=False):
    out = core.handle_frame(conn_id, Frame(protocol.HELLO, protocol.encode_payload(
        {"node_id": node_id, "protocol": 1, "resume": resume}
    )), now)
    assert out[0][1].msg_type == protocol.CHALLENGE
    nonce = bytes.fromhex(protocol.decode_payload(out[0][1].payload)["nonce"])
    proof = prove(TOKENS[node_id], nonce, node_id)
    out = core.handle_frame(conn_id, Frame(protocol.AUTH_PROOF, protocol.encode_payload(
        {"node_id": node_id, "proof": proof.hex()}
    )), now)
    assert out[0][1].msg_type == protocol.JOIN_ACK
    return out


# --- lifecycle -------------------------------------------------------------------

def test_start_requires_min_nodes():
    core = make_core(approve=("a",))
    with pytest.raises(InsufficientNodes):
        core.start_federation(now=0.0)


def test_start_broadcasts_identical_round_start():
    core = make_core()
    authenticate(core, 1, "a")
    authenticate(core, 2, "b")
    out = core.start_federation(now=1.0)
    assert core.state.status is RoundStatus.IN_ROUND
    assert core.state.round_index == 1
    frames = {dst: frame for dst, frame in out}
    assert set(frames) == {1, 2}
    payloads = [f.payload for f in frames.values()]
    assert payloads[0] == payloads[1]
    header, weights = protocol.decode_tensor_payload(payloads[0])
    assert header["round"] == 1 and header["epochs"] == 10
    assert weights == MODEL


def test_double_start_rejected():
    core = make_core()
    core.start_federation(now=0.0)
    with pytest.raises(AlreadyRunning):
        core.start_federation(now=1.0)


def test_full_round_aggregates_and_advances():
    core = make_core(total_rounds=3)
    core.start_federation(now=0.0)
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    assert core.state.round_index == 1
    core.submit_update("b", 1, update_for("b", 3.0), now=2.0)
    core.try_advance(now=3.0)
    assert core.state.round_index == 2
    assert core.state.global_model.array("w0")[0][0] == np.float32(2.0)
    assert core.aggregation_count() == 1


def test_submission_guards():
    core = make_core()
    core.start_federation(now=0.0)
    with pytest.raises(WrongRound):
        core.submit_update("a", 2, update_for("a", 1.0), now=0.5)
    with pytest.raises(NotExpected):
        core.submit_update("c", 1, update_for("c", 1.0), now=0.5)
    bad = WeightedUpdate(TensorMap([("w0", (1, 1), [1.0]), ("b0", (1,), [0.0])]), 5, "a")
    with pytest.raises(StructureMismatch):
        core.submit_update("a", 1, bad, now=0.5)


def test_duplicate_submission_idempotent():
    core = make_core()
    core.start_federation(now=0.0)
    first = core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    second = core.submit_update("a", 1, update_for("a", 99.0), now=2.0)
    assert first is True and second is False
    assert len(core.state.received) == 1
    # first submission wins
    assert core.state.received["a"].weights.array("w0")[0][0] == np.float32(1.0)


def test_exactly_total_rounds_aggregations():
    core = make_core(total_rounds=20)
    core.start_federation(now=0.0)
    t = 1.0
    while core.state.status is RoundStatus.IN_ROUND:
        rnd = core.state.round_index
        core.submit_update("a", rnd, update_for("a", 0.5), now=t)
        core.submit_update("b", rnd, update_for("b", 1.5), now=t + 0.1)
        core.try_advance(now=t + 0.2)
        t += 1.0
    assert core.state.status is RoundStatus.FINISHED
    assert core.aggregation_count() == 20
    round_starts = [e for e in core.event_log if e["event"] == "round_started"]
    assert [e["round"] for e in round_starts] == list(range(1, 21))


# --- quorum and deadlines -----------------------------------------------------------

def test_strict_quorum_pauses_on_deadline():
    core = make_core(round_timeout=10.0)
    core.start_federation(now=0.0)
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    core.try_advance(now=5.0)
    assert core.state.status is RoundStatus.IN_ROUND
    core.try_advance(now=10.0)
    assert core.state.status is RoundStatus.PAUSED
    assert any(e["event"] == "paused" and e["reason"] == "quorum_failure" for e in core.event_log)


def test_half_quorum_aggregates_singleton_at_deadline():
    core = make_core(round_timeout=10.0, quorum_fraction=0.5)
    core.start_federation(now=0.0)
    core.submit_update("a", 1, update_for("a", 7.0), now=1.0)
    core.try_advance(now=10.0)
    assert core.state.round_index == 2
    # aggregate over the singleton equals that node's weights bit-exactly
    assert core.state.global_model == update_for("a", 7.0).weights
    assert core.nodes["b"].liveness is Liveness.STALE


def test_quorum_threshold_rounding():
    assert quorum_threshold(1.0, 8) == 8
    assert quorum_threshold(0.5, 8) == 4
    assert quorum_threshold(0.75, 8) == 6
    assert quorum_threshold(0.7, 10) == 7  # 0.7*10 is 7.000000000000001 in floats


# --- pause / resume / abort ----------------------------------------------------------

def test_pause_blocks_round_start_until_resume():
    core = make_core()
    authenticate(core, 1, "a")
    authenticate(core, 2, "b")
    core.start_federation(now=0.0)
    core.pause()
    assert core.state.status is RoundStatus.PAUSED
    # updates stored while paused do not advance the round
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    core.submit_update("b", 1, update_for("b", 3.0), now=1.1)
    assert core.try_advance(now=2.0) == []
    assert core.state.round_index == 1
    out = core.resume(now=3.0)
    assert core.state.round_index == 2  # both updates were in, so resume aggregated
    assert any(f.msg_type == protocol.ROUND_START for _, f in out)


def test_abort_is_terminal_and_notifies():
    core = make_core()
    authenticate(core, 1, "a")
    core.start_federation(now=0.0)
    out = core.abort()
    assert core.state.status is RoundStatus.ABORTED
    assert out and all(f.msg_type == protocol.SHUTDOWN for _, f in out)
    with pytest.raises(Conflict):
        core.pause()


# --- approval boundaries --------------------------------------------------------------

def test_approval_takes_effect_at_round_boundary():
    core = make_core(total_rounds=3)
    core.start_federation(now=0.0)
    assert core.state.expected_nodes == frozenset({"a", "b"})
    core.approve_node("c")
    assert core.state.expected_nodes == frozenset({"a", "b"})  # unchanged mid-round
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    core.submit_update("b", 1, update_for("b", 1.0), now=1.1)
    core.try_advance(now=2.0)
    assert core.state.round_index == 2
    assert core.state.expected_nodes == frozenset({"a", "b", "c"})


def test_eviction_takes_effect_at_round_boundary():
    core = make_core(total_rounds=3)
    core.start_federation(now=0.0)
    core.evict_node("b")
    assert "b" in core.state.expected_nodes
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    core.submit_update("b", 1, update_for("b", 1.0), now=1.1)
    core.try_advance(now=2.0)
    assert core.state.expected_nodes == frozenset({"a"})


# --- protocol front end ----------------------------------------------------------------

def test_auth_flow_and_round_delivery():
    core = make_core()
    core.start_federation(now=0.0)
    out = authenticate(core, 5, "a", now=1.0)
    # fresh join during an open round receives the ROUND_START immediately
    assert [f.msg_type for _, f in out] == [protocol.JOIN_ACK, protocol.ROUND_START]
    assert core.nodes["a"].liveness is Liveness.CONNECTED


def test_wrong_proof_rejected():
    core = make_core()
    out = core.handle_frame(9, Frame(protocol.HELLO, protocol.encode_payload(
        {"node_id": "a", "protocol": 1}
    )), 0.0)
    nonce = bytes.fromhex(protocol.decode_payload(out[0][1].payload)["nonce"])
    bad_proof = prove(b"wrong-token", nonce, "a")
    out = core.handle_frame(9, Frame(protocol.AUTH_PROOF, protocol.encode_payload(
        {"node_id": "a", "proof": bad_proof.hex()}
    )), 0.0)
    assert out[0][1].msg_type == protocol.ERROR
    assert protocol.decode_payload(out[0][1].payload)["code"] == "auth_failed"


def test_unknown_node_rejected():
    core = make_core()
    out = core.handle_frame(9, Frame(protocol.HELLO, protocol.encode_payload(
        {"node_id": "zz", "protocol": 1}
    )), 0.0)
    assert protocol.decode_payload(out[0][1].payload)["code"] == "unknown_node"


def test_unauthenticated_frames_do_not_transition():
    core = make_core()
    core.start_federation(now=0.0)
    payload = protocol.encode_tensor_payload(
        {"node_id": "a", "round": 1, "sample_count": 5}, update_for("a", 1.0).weights
    )
    out = core.handle_frame(77, Frame(protocol.ROUND_RESULT, payload), 0.0)
    assert protocol.decode_payload(out[0][1].payload)["code"] == "unauthenticated"
    assert len(core.state.received) == 0


def test_round_result_and_ack_over_protocol():
    core = make_core(total_rounds=1)
    authenticate(core, 1, "a", now=0.0)
    authenticate(core, 2, "b", now=0.0)
    core.start_federation(now=0.0)
    payload = protocol.encode_tensor_payload(
        {"node_id": "a", "round": 1, "sample_count": 5,
         "metrics": {"val_loss": 0.5, "val_balanced_accuracy": 0.8}},
        update_for("a", 1.0).weights,
    )
    out = core.handle_frame(1, Frame(protocol.ROUND_RESULT, payload), 1.0)
    assert out[0][1].msg_type == protocol.ROUND_ACK
    assert protocol.decode_payload(out[0][1].payload) == {"round": 1, "stored": True, "duplicate": False}
    payload_b = protocol.encode_tensor_payload(
        {"node_id": "b", "round": 1, "sample_count": 15,
         "metrics": {"val_loss": 1.0, "val_balanced_accuracy": 0.6}},
        update_for("b", 3.0).weights,
    )
    out = core.handle_frame(2, Frame(protocol.ROUND_RESULT, payload_b), 2.0)
    types = [f.msg_type for _, f in out]
    assert types[0] == protocol.ROUND_ACK
    assert protocol.SHUTDOWN in types  # single-round federation finishes
    assert core.state.status is RoundStatus.FINISHED
    # weighted metric aggregation: (5*0.5 + 15*1.0)/20 and (5*0.8 + 15*0.6)/20
    agg = core.round_metrics(1)["aggregate"]
    assert agg["val_loss"] == pytest.approx(0.875)
    assert agg["val_balanced_accuracy"] == pytest.approx(0.65)


def test_resume_req_decisions():
    core = make_core()
    out = authenticate(core, 1, "a", now=0.0, resume=True)
    session_id = protocol.decode_payload(out[0][1].payload)["session_id"]
    core.start_federation(now=0.0)

    def resume_with(sid):
        frames = core.handle_frame(1, Frame(protocol.RESUME_REQ, protocol.encode_payload(
            {"session_id": sid, "node_id": "a", "last_acked_round": 0}
        )), 1.0)
        return protocol.decode_payload(frames[0][1].payload)["decision"], frames

    decision, frames = resume_with(session_id)
    assert decision == "resume"
    assert frames[1][1].msg_type == protocol.ROUND_START

    core.submit_update("a", 1, update_for("a", 1.0), now=2.0)
    decision, frames = resume_with(session_id)
    assert decision == "wait" and len(frames) == 1

    decision, _ = resume_with("ff" * 16)
    assert decision == "rejoin"


def test_resume_req_after_finish_is_done():
    core = make_core(total_rounds=1)
    out = authenticate(core, 1, "a", now=0.0, resume=True)
    session_id = protocol.decode_payload(out[0][1].payload)["session_id"]
    core.start_federation(now=0.0)
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    core.submit_update("b", 1, update_for("b", 1.0), now=1.1)
    core.try_advance(now=2.0)
    frames = core.handle_frame(1, Frame(protocol.RESUME_REQ, protocol.encode_payload(
        {"session_id": session_id, "node_id": "a", "last_acked_round": 1}
    )), 3.0)
    assert protocol.decode_payload(frames[0][1].payload)["decision"] == "done"


# --- checkpointing --------------------------------------------------------------------

def test_checkpoint_round_trip_bit_identical(tmp_path):
    core = make_core(checkpoint_dir=tmp_path, total_rounds=5)
    authenticate(core, 1, "a")
    core.start_federation(now=0.0)
    core.submit_update("a", 1, update_for("a", 2.5), now=1.0)
    restored = CoordinatorCore.restore(tmp_path / "federation.ckpt", TOKENS)
    assert restored.state.round_index == 1
    assert restored.state.status is RoundStatus.IN_ROUND
    assert restored.state.global_model == core.state.global_model
    assert set(restored.state.received) == {"a"}
    assert restored.state.received["a"].weights == update_for("a", 2.5).weights
    assert restored.state.expected_nodes == core.state.expected_nodes
    # restored coordinator still recognizes the session for resume decisions
    assert restored._sessions == core._sessions


def test_checkpoint_resume_completes_identically(tmp_path):
    def run(crash: bool):
        dir_ = tmp_path / ("crash" if crash else "plain")
        core = make_core(checkpoint_dir=dir_, total_rounds=4)
        core.start_federation(now=0.0)
        t = 1.0
        rng = np.random.default_rng(0)
        while core.state.status is not RoundStatus.FINISHED:
            rnd = core.state.round_index
            va, vb = float(rng.standard_normal()), float(rng.standard_normal())
            core.submit_update("a", rnd, update_for("a", va), now=t)
            if crash and rnd == 2:
                core = CoordinatorCore.restore(dir_ / "federation.ckpt", TOKENS)
            core.submit_update("b", rnd, update_for("b", vb), now=t)
            core.try_advance(now=t)
            t += 1.0
        return core.state.global_model

    assert run(crash=False) == run(crash=True)


def test_corrupt_checkpoint_detected(tmp_path):
    core = make_core(checkpoint_dir=tmp_path)
    core.start_federation(now=0.0)
    path = tmp_path / "federation.ckpt"
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        CoordinatorCore.restore(path, TOKENS)


# --- snapshots ---------------------------------------------------------------------

def test_status_snapshot_shape():
    core = make_core()
    core.start_federation(now=0.0)
    core.submit_update("a", 1, update_for("a", 1.0), now=1.0)
    snap = core.status_snapshot()
    assert snap["round"] == 1
    assert snap["status"] == "InRound"
    assert snap["received"] == 1
    assert snap["expected"] == 2


def test_nodes_snapshot_shape():
    core = make_core()
    rows = core.nodes_snapshot()
    assert [r["node_id"] for r in rows] == ["a", "b", "c"]
    assert rows[0]["approval"] == "Approved"
    assert rows[2]["approval"] == "Pending"
