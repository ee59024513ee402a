"""Site-side federation client: config-driven, auto-reconnecting, resumable.

AgentCore is the transport-agnostic state machine shared by the real TCP
runner and the in-process simulator. Training for a round is a pure function
of (global weights, local data, node seed, round index), and optimizer state
is kept per round, so a round that gets re-delivered after a disconnect
retrains to a bit-identical update: the coordinator can never tell a retrained
submission from the lost original.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .datakit import SiteDataset, SiteProfile, generate_site, load_csv
from .errors import FatalConfigError, FedorchError, StructureMismatch
from .metrics import evaluate
from . import protocol
from .protocol import Frame, SessionTicket, prove
from .tensors import TensorMap, WeightedUpdate
from .trainer import TrainerCarry, TrainerConfig, predict_proba, train_local

HEARTBEAT_INTERVAL = 5.0
RESYNC_INTERVAL = 10.0


@dataclass(frozen=True)
class ReconnectPolicy:
    initial_backoff: float = 1.0
    multiplier: float = 2.0
    max_backoff: float = 60.0
    jitter: float = 0.1

    def __post_init__(self):
        if min(self.initial_backoff, self.multiplier, self.max_backoff) <= 0:
            raise FatalConfigError("backoff parameters must be positive")
        if not 0.0 <= self.jitter <= 1.0 / 3.0:
            # above 1/3 consecutive jittered delays could re-order
            raise FatalConfigError("jitter fraction must be in [0, 1/3]")

    def delay(self, attempt: int, rng: np.random.Generator) -> float:
        base = self.initial_backoff * self.multiplier**attempt
        jittered = base * (1.0 + self.jitter * float(rng.uniform(-1.0, 1.0)))
        return min(jittered, self.max_backoff)


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    server_host: str
    server_port: int
    token: bytes
    dataset: SiteDataset
    trainer: TrainerConfig = TrainerConfig()
    seed: int = 0
    epochs_per_round: int = 10  # fallback; the coordinator's ROUND_START wins
    carry_across_rounds: bool = True
    reconnect: ReconnectPolicy = ReconnectPolicy()
    state_dir: Optional[Path] = None


class AgentCore:
    """Node protocol state machine; emits frames, never touches a transport."""

    def __init__(
        self,
        node_id: str,
        token: bytes,
        dataset: SiteDataset,
        trainer_config: TrainerConfig,
        seed: int = 0,
        epochs_per_round: int = 10,
        carry_across_rounds: bool = True,
        ticket: Optional[SessionTicket] = None,
        carries: Optional[dict[int, TrainerCarry]] = None,
        on_persist: Optional[Callable[["AgentCore"], None]] = None,
        round_delay: float = 0.0,
    ):
        self.node_id = node_id
        self.token = token
        self.dataset = dataset
        self.trainer_config = trainer_config
        self.seed = seed
        self.epochs_per_round = epochs_per_round
        self.carry_across_rounds = carry_across_rounds
        self.ticket = ticket
        self.carries: dict[int, TrainerCarry] = dict(carries or {})
        self.on_persist = on_persist
        self.round_delay = round_delay
        self.finished = False
        self.exit_reason: Optional[str] = None
        self.fatal: Optional[str] = None
        self.needs_reconnect = False
        self.rounds_trained = 0
        self._pending_session: Optional[bytes] = None
        self._cache: Optional[tuple[int, WeightedUpdate, dict]] = None
        self._joined = False

    @property
    def joined(self) -> bool:
        return self._joined

    # --- connection lifecycle ----------------------------------------------------

    def connect_frames(self) -> list[Frame]:
        """Frames to send immediately after (re)connecting."""
        self._joined = False
        self._pending_session = None
        self.needs_reconnect = False
        payload = protocol.encode_payload({
            "node_id": self.node_id,
            "protocol": 1,
            "resume": self.ticket is not None,
        })
        return [Frame(protocol.HELLO, payload)]

    def idle_frames(self) -> list[Frame]:
        """Periodic re-sync while joined and waiting for work."""
        if not self._joined or self.finished or self.ticket is None:
            return []
        return [self._resume_req()]

    def heartbeat_frame(self) -> Optional[Frame]:
        return Frame(protocol.HEARTBEAT, b"") if self._joined else None

    def _resume_req(self) -> Frame:
        assert self.ticket is not None
        return Frame(protocol.RESUME_REQ, protocol.encode_payload({
            "session_id": self.ticket.session_id.hex(),
            "node_id": self.node_id,
            "last_acked_round": self.ticket.last_acked_round,
        }))

    # --- inbound dispatch ---------------------------------------------------------

    def on_frame(self, frame: Frame, now: float = 0.0) -> list[Frame]:
        handler = {
            protocol.CHALLENGE: self._on_challenge,
            protocol.JOIN_ACK: self._on_join_ack,
            protocol.ROUND_START: self._on_round_start,
            protocol.ROUND_ACK: self._on_round_ack,
            protocol.RESUME_STATE: self._on_resume_state,
            protocol.ERROR: self._on_error,
            protocol.SHUTDOWN: self._on_shutdown,
            protocol.HEARTBEAT: lambda f: [],
        }.get(frame.msg_type)
        if handler is None:
            return []
        return handler(frame)

    def _on_challenge(self, frame: Frame) -> list[Frame]:
        fields = protocol.decode_payload(frame.payload)
        nonce = bytes.fromhex(str(fields["nonce"]))
        proof = prove(self.token, nonce, self.node_id)
        return [Frame(protocol.AUTH_PROOF, protocol.encode_payload({
            "node_id": self.node_id,
            "proof": proof.hex(),
        }))]

    def _on_join_ack(self, frame: Frame) -> list[Frame]:
        fields = protocol.decode_payload(frame.payload)
        self._pending_session = bytes.fromhex(str(fields["session_id"]))
        self._joined = True
        if self.ticket is None:
            self.ticket = SessionTicket(self._pending_session, self.node_id, 0)
            self._persist()
            return []
        # holding a ticket: ask where we stand before doing any work
        return [self._resume_req()]

    def _on_resume_state(self, frame: Frame) -> list[Frame]:
        fields = protocol.decode_payload(frame.payload)
        decision = fields.get("decision")
        if decision == "done":
            self.finished = True
            self.exit_reason = "finished"
            return []
        if decision == "rejoin":
            # cursor is void; adopt the fresh session and ask again
            assert self._pending_session is not None
            self.ticket = SessionTicket(self._pending_session, self.node_id, 0)
            self._persist()
            return [self._resume_req()]
        if decision in ("resume", "wait"):
            if self._pending_session is not None and self.ticket is not None:
                self.ticket = SessionTicket(
                    self._pending_session, self.node_id, self.ticket.last_acked_round
                )
                self._persist()
            return []  # on "resume" the ROUND_START follows on the same connection
        return []

    def _on_round_start(self, frame: Frame) -> list[Frame]:
        header, global_weights = protocol.decode_tensor_payload(frame.payload)
        round_index = int(header["round"])
        epochs = int(header.get("epochs", self.epochs_per_round))
        if self.ticket is not None and round_index <= self.ticket.last_acked_round:
            return []  # stale re-delivery of a round we already completed
        update, metrics = self._run_round(global_weights, round_index, epochs)
        if self.round_delay > 0:
            time.sleep(self.round_delay)  # demo pacing only
        payload = protocol.encode_tensor_payload({
            "node_id": self.node_id,
            "round": round_index,
            "sample_count": update.sample_count,
            "metrics": metrics,
        }, update.weights)
        return [Frame(protocol.ROUND_RESULT, payload)]

    def _on_round_ack(self, frame: Frame) -> list[Frame]:
        fields = protocol.decode_payload(frame.payload)
        round_index = int(fields["round"])
        if self.ticket is not None and round_index >= self.ticket.last_acked_round:
            self.ticket.advance(round_index)
            self._prune_carries(round_index)
            self._persist()
        return []

    def _on_error(self, frame: Frame) -> list[Frame]:
        fields = protocol.decode_payload(frame.payload)
        code = fields.get("code", "")
        if code in ("unknown_node", "auth_failed"):
            self.fatal = f"{code}: {fields.get('message', '')}"
        elif code == "unauthenticated":
            self.needs_reconnect = True
        # wrong_round / not_expected and friends resolve via the next re-sync
        return []

    def _on_shutdown(self, frame: Frame) -> list[Frame]:
        fields = protocol.decode_payload(frame.payload)
        self.finished = True
        self.exit_reason = str(fields.get("reason", "shutdown"))
        return []

    # --- training ---------------------------------------------------------------

    def local_round(self, global_weights: TensorMap, round_index: int, epochs: int) -> WeightedUpdate:
        """Deterministic update for one round; public hook for equivalence tests."""
        update, _ = self._run_round(global_weights, round_index, epochs)
        return update

    def _run_round(self, global_weights: TensorMap, round_index: int, epochs: int):
        if self._cache is not None and self._cache[0] == round_index:
            return self._cache[1], self._cache[2]
        if self.dataset.input_dim != global_weights.shape("w0")[0]:
            raise StructureMismatch(
                f"global model expects {global_weights.shape('w0')[0]} features, "
                f"local data has {self.dataset.input_dim}"
            )
        metrics = self._global_model_metrics(global_weights)
        carry_in = self._carry_before(round_index)
        report = train_local(
            global_weights,
            self.dataset,
            epochs,
            rng_seed=(self.seed, round_index),
            config=self.trainer_config,
            carry=carry_in,
        )
        metrics["train_loss"] = report.final_train_loss
        metrics["val_loss"] = report.final_val_loss
        update = WeightedUpdate(report.weights, report.sample_count, self.node_id)
        self.carries[round_index] = report.carry
        self._cache = (round_index, update, metrics)
        self.rounds_trained += 1
        return update, metrics

    def _global_model_metrics(self, global_weights: TensorMap) -> dict:
        idx = self.dataset.val_idx
        scores = predict_proba(global_weights, self.dataset.features[idx])
        report = evaluate(scores, self.dataset.labels[idx])
        out = {"global_val_accuracy": report.accuracy}
        for key, value in (
            ("global_val_sensitivity", report.sensitivity),
            ("global_val_specificity", report.specificity),
            ("global_val_balanced_accuracy", report.balanced_accuracy),
            ("global_val_auc", report.roc_auc),
        ):
            if value is not None:
                out[key] = value
        return out

    def _carry_before(self, round_index: int) -> Optional[TrainerCarry]:
        if not self.carry_across_rounds:
            return None  # fresh optimizer and scheduler every round
        usable = [r for r in self.carries if r < round_index]
        return self.carries[max(usable)] if usable else None

    def _prune_carries(self, acked_round: int) -> None:
        for r in [r for r in self.carries if r < acked_round]:
            del self.carries[r]

    def _persist(self) -> None:
        if self.on_persist is not None:
            self.on_persist(self)


# --- agent state persistence ---------------------------------------------------------

def save_agent_state(core: AgentCore, state_dir: Path) -> None:
    """Persist ticket and the newest optimizer carry for crash-resume."""
    state_dir.mkdir(parents=True, exist_ok=True)
    ticket = core.ticket
    meta = {
        "node_id": core.node_id,
        "session_id": ticket.session_id.hex() if ticket else None,
        "last_acked_round": ticket.last_acked_round if ticket else 0,
        "carry_rounds": sorted(core.carries),
    }
    carry_blobs = {}
    for round_index, carry in core.carries.items():
        opt, sched = carry.optimizer, carry.scheduler
        carry_blobs[str(round_index)] = {
            "step": opt.step,
            "learning_rate": opt.learning_rate,
            "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon,
            "factor": sched.factor, "patience": sched.patience, "min_lr": sched.min_lr,
            "best_loss": sched.best_loss,
            "evals_since_improvement": sched.evals_since_improvement,
            "epochs_done": carry.epochs_done,
        }
    (state_dir / f"{core.node_id}.state.json").write_text(
        json.dumps({"meta": meta, "carries": carry_blobs}, sort_keys=True)
    )
    arrays = {}
    for round_index, carry in core.carries.items():
        for name, arr in carry.optimizer.first_moment.items():
            arrays[f"m/{round_index}/{name}"] = arr
        for name, arr in carry.optimizer.second_moment.items():
            arrays[f"v/{round_index}/{name}"] = arr
    np.savez(state_dir / f"{core.node_id}.moments.npz", **arrays)


def load_agent_state(node_id: str, state_dir: Path):
    """Returns (ticket, carries) or (None, {}) when no state was saved."""
    from .trainer import OptimizerState, PlateauScheduler

    meta_path = state_dir / f"{node_id}.state.json"
    if not meta_path.exists():
        return None, {}
    blob = json.loads(meta_path.read_text())
    meta = blob["meta"]
    ticket = None
    if meta.get("session_id"):
        ticket = SessionTicket(
            bytes.fromhex(meta["session_id"]), node_id, int(meta["last_acked_round"])
        )
    carries: dict[int, TrainerCarry] = {}
    moments_path = state_dir / f"{node_id}.moments.npz"
    arrays = dict(np.load(moments_path)) if moments_path.exists() else {}
    for key, fields in blob["carries"].items():
        round_index = int(key)
        first = {
            name.split("/", 2)[2]: arr
            for name, arr in arrays.items()
            if name.startswith(f"m/{round_index}/")
        }
        second = {
            name.split("/", 2)[2]: arr
            for name, arr in arrays.items()
            if name.startswith(f"v/{round_index}/")
        }
        opt = OptimizerState(
            step=int(fields["step"]),
            first_moment=first,
            second_moment=second,
            learning_rate=float(fields["learning_rate"]),
            beta1=float(fields["beta1"]),
            beta2=float(fields["beta2"]),
            epsilon=float(fields["epsilon"]),
        )
        sched = PlateauScheduler(
            factor=float(fields["factor"]),
            patience=int(fields["patience"]),
            min_lr=float(fields["min_lr"]),
            best_loss=float(fields["best_loss"]),
            evals_since_improvement=int(fields["evals_since_improvement"]),
        )
        carries[round_index] = TrainerCarry(opt, sched, int(fields["epochs_done"]))
    return ticket, carries


# --- config loading ---------------------------------------------------------------

def load_node_config(path) -> NodeConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise FatalConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise FatalConfigError("config must be a mapping")
    try:
        node_id = str(raw["node_id"])
        server = raw["server"]
        host, port = str(server["host"]), int(server["port"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FatalConfigError(f"missing or invalid node_id/server block: {exc}") from exc

    token = _load_token(raw)

    dataset_block = raw.get("dataset") or {}
    has_csv = "csv" in dataset_block
    has_synth = "synthetic" in dataset_block
    if has_csv == has_synth:
        raise FatalConfigError("dataset block needs exactly one of csv / synthetic")
    if has_csv:
        dataset = load_csv(dataset_block["csv"], seed=int(dataset_block.get("split_seed", 0)))
    else:
        synth = dict(dataset_block["synthetic"])
        input_dim = int(synth.pop("input_dim"))
        dataset = generate_site(SiteProfile(**synth), input_dim)

    trainer_block = dict(raw.get("trainer") or {})
    seed = int(trainer_block.pop("seed", 0))
    epochs_per_round = int(trainer_block.pop("epochs_per_round", 10))
    carry_across_rounds = bool(trainer_block.pop("carry_across_rounds", True))
    if epochs_per_round < 1:
        raise FatalConfigError("trainer.epochs_per_round must be >= 1")
    try:
        trainer = TrainerConfig(**trainer_block)
    except (TypeError, FedorchError) as exc:
        raise FatalConfigError(f"bad trainer block: {exc}") from exc

    try:
        reconnect = ReconnectPolicy(**(raw.get("reconnect") or {}))
    except TypeError as exc:
        raise FatalConfigError(f"bad reconnect block: {exc}") from exc

    state_dir = Path(raw["state_dir"]) if raw.get("state_dir") else None
    return NodeConfig(
        node_id=node_id,
        server_host=host,
        server_port=port,
        token=token,
        dataset=dataset,
        trainer=trainer,
        seed=seed,
        epochs_per_round=epochs_per_round,
        carry_across_rounds=carry_across_rounds,
        reconnect=reconnect,
        state_dir=state_dir,
    )


def _load_token(raw: dict) -> bytes:
    sources = [k for k in ("token", "token_env", "token_file") if raw.get(k)]
    if len(sources) != 1:
        raise FatalConfigError("provide exactly one of token / token_env / token_file")
    kind = sources[0]
    if kind == "token":
        return str(raw["token"]).encode("utf-8")
    if kind == "token_env":
        value = os.environ.get(str(raw["token_env"]))
        if not value:
            raise FatalConfigError(f"environment variable {raw['token_env']} is not set")
        return value.encode("utf-8")
    token_path = Path(raw["token_file"])
    try:
        mode = token_path.stat().st_mode & 0o077
    except OSError as exc:
        raise FatalConfigError(f"cannot read token file: {exc}") from exc
    if mode:
        raise FatalConfigError(
            f"token file {token_path} is group/world accessible; chmod 600 it"
        )
    return token_path.read_text().strip().encode("utf-8")


# --- real transport runner ---------------------------------------------------------

def run_agent(config: NodeConfig, *, max_runtime: Optional[float] = None,
              round_delay: float = 0.0) -> int:
    """Connect-train-report loop with capped exponential backoff. Returns exit code."""
    ticket, carries = (None, {})
    persist = None
    if config.state_dir is not None:
        ticket, carries = load_agent_state(config.node_id, config.state_dir)
        persist = lambda core: save_agent_state(core, config.state_dir)
    core = AgentCore(
        config.node_id, config.token, config.dataset, config.trainer,
        seed=config.seed, epochs_per_round=config.epochs_per_round,
        carry_across_rounds=config.carry_across_rounds,
        ticket=ticket, carries=carries, on_persist=persist, round_delay=round_delay,
    )
    backoff_rng = np.random.default_rng((config.seed, 0xB0FF))
    attempt = 0
    started = time.monotonic()
    while not core.finished and core.fatal is None:
        if max_runtime is not None and time.monotonic() - started > max_runtime:
            _log_event("runtime_exceeded", node=config.node_id)
            return 3
        try:
            with socket.create_connection(
                (config.server_host, config.server_port), timeout=10.0
            ) as sock:
                sock.settimeout(1.0)
                joined = _serve_connection(core, sock)
                if joined:
                    attempt = 0  # outage over; future backoff restarts from the base
        except (OSError, FedorchError) as exc:
            _log_event("disconnected", node=config.node_id, error=str(exc))
        if core.finished or core.fatal is not None:
            break
        delay = config.reconnect.delay(attempt, backoff_rng)
        attempt += 1
        _log_event("reconnect_wait", node=config.node_id, delay=round(delay, 3), attempt=attempt)
        time.sleep(delay)
    if core.fatal is not None:
        _log_event("auth_rejected", node=config.node_id, reason=core.fatal)
        return 2
    _log_event("finished", node=config.node_id, reason=core.exit_reason)
    return 0


def _serve_connection(core: AgentCore, sock) -> bool:
    """Drive one connection until it drops; returns True if the join completed."""
    for frame in core.connect_frames():
        protocol.send_frame(sock, frame)
    last_heartbeat = time.monotonic()
    last_resync = time.monotonic()
    while not core.finished and core.fatal is None and not core.needs_reconnect:
        try:
            frame = protocol.recv_frame(sock)
        except TimeoutError:
            now = time.monotonic()
            if core._joined and now - last_heartbeat >= HEARTBEAT_INTERVAL:
                hb = core.heartbeat_frame()
                if hb:
                    protocol.send_frame(sock, hb)
                last_heartbeat = now
            if core._joined and now - last_resync >= RESYNC_INTERVAL:
                for out in core.idle_frames():
                    protocol.send_frame(sock, out)
                last_resync = now
            continue
        if frame is None:
            raise ConnectionError("server closed the connection")
        for out in core.on_frame(frame, time.time()):
            protocol.send_frame(sock, out)
    return core._joined


def _log_event(event: str, **fields) -> None:
    record = {"event": event, "ts": round(time.time(), 3)}
    record.update(fields)
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="fedorch-node", description="Federation node agent")
    parser.add_argument("--config", required=True, help="YAML node config file")
    parser.add_argument("--max-runtime", type=float, default=None, help="give up after N seconds")
    args = parser.parse_args(argv)
    try:
        config = load_node_config(args.config)
    except FatalConfigError as exc:
        _log_event("fatal_config_error", error=str(exc))
        sys.exit(2)
    sys.exit(run_agent(config, max_runtime=args.max_runtime))


if __name__ == "__main__":
    main()
