"""Networked coordinator: framed TCP front end plus the HTTP control API.

All mutations funnel through one lock around the CoordinatorCore, which keeps
the single-logical-writer rule while node connections and API readers run on
their own threads. Control requests authenticate with the operator token from
FEDORCH_OPERATOR_TOKEN (or the config); node connections authenticate with
per-node challenge-response.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import socket
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import yaml

from .coordinator import CoordinatorCore, FederationConfig
from .errors import (
    AlreadyRunning,
    Conflict,
    FatalConfigError,
    FedorchError,
    InsufficientNodes,
)
from . import protocol
from .trainer import ModelSpec, init_model

OPERATOR_TOKEN_ENV = "FEDORCH_OPERATOR_TOKEN"


class CoordinatorServer:
    """Hosts a CoordinatorCore behind a node TCP port and an operator HTTP port."""

    def __init__(
        self,
        core: CoordinatorCore,
        host: str = "127.0.0.1",
        node_port: int = 0,
        http_port: int = 0,
        operator_token: Optional[str] = None,
    ):
        self.core = core
        self.lock = threading.RLock()
        self.host = host
        self.operator_token = operator_token or os.environ.get(OPERATOR_TOKEN_ENV) or ""
        self._listener = socket.create_server((host, node_port))
        self._listener.settimeout(0.2)
        self.node_port = self._listener.getsockname()[1]
        self._http = ThreadingHTTPServer((host, http_port), _make_handler(self))
        self.http_port = self._http.server_port
        self._connections: dict[int, _NodeConnection] = {}
        self._conn_seq = 0
        self._threads: list[threading.Thread] = []
        self._running = False

    # --- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        self._running = True
        for target, name in (
            (self._accept_loop, "fedorch-accept"),
            (self._http.serve_forever, "fedorch-http"),
            (self._tick_loop, "fedorch-tick"),
        ):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._running = False
        self._http.shutdown()
        self._listener.close()
        for conn in list(self._connections.values()):
            conn.close()

    def wait(self) -> None:
        while self._running:
            time.sleep(0.2)

    # --- node transport --------------------------------------------------------------

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, _ = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            self._conn_seq += 1
            conn = _NodeConnection(self._conn_seq, sock)
            self._connections[conn.conn_id] = conn
            threading.Thread(
                target=self._serve_node, args=(conn,), name=f"fedorch-node-{conn.conn_id}",
                daemon=True,
            ).start()

    def _serve_node(self, conn: "_NodeConnection") -> None:
        conn.sock.settimeout(1.0)
        with self.lock:
            self.core.connection_opened(conn.conn_id)
        try:
            while self._running:
                try:
                    frame = protocol.recv_frame(conn.sock)
                except TimeoutError:
                    continue
                if frame is None:
                    break
                with self.lock:
                    out = self.core.handle_frame(conn.conn_id, frame, time.time())
                self._route(out)
        except (OSError, FedorchError):
            pass
        finally:
            with self.lock:
                self.core.connection_closed(conn.conn_id)
            self._connections.pop(conn.conn_id, None)
            conn.close()

    def _route(self, out) -> None:
        for conn_id, frame in out:
            conn = self._connections.get(conn_id)
            if conn is None:
                continue  # disconnected; the node will re-sync on reconnect
            try:
                conn.send(frame)
            except OSError:
                conn.close()

    def _tick_loop(self) -> None:
        while self._running:
            time.sleep(0.25)
            with self.lock:
                out = self.core.tick(time.time())
            self._route(out)

    # --- operator commands (called from the HTTP handler) ---------------------------------

    def command(self, name: str, arg: Optional[str] = None) -> dict:
        with self.lock:
            now = time.time()
            if name == "start":
                self._route(self.core.start_federation(now))
            elif name == "pause":
                self.core.pause()
            elif name == "resume":
                self._route(self.core.resume(now))
            elif name == "abort":
                self._route(self.core.abort())
            elif name == "approve":
                self.core.approve_node(arg, now)
            elif name == "evict":
                self.core.evict_node(arg, now)
            else:
                raise Conflict(f"unknown command {name!r}")
            return self.core.status_snapshot()


class _NodeConnection:
    def __init__(self, conn_id: int, sock: socket.socket):
        self.conn_id = conn_id
        self.sock = sock
        self._send_lock = threading.Lock()

    def send(self, frame: protocol.Frame) -> None:
        with self._send_lock:
            protocol.send_frame(self.sock, frame)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def _make_handler(server: CoordinatorServer):
    class ControlHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Authorization, Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.end_headers()
            self.wfile.write(data)

        def _authorized(self) -> bool:
            if not server.operator_token:
                return False
            header = self.headers.get("Authorization", "")
            return header == f"Bearer {server.operator_token}"

        def do_OPTIONS(self):  # CORS preflight for the dashboard
            self._send(204, {})

        def do_GET(self):
            if not self._authorized():
                return self._send(401, {"error": "operator token required"})
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            with server.lock:
                core = server.core
                if parts == ["status"]:
                    return self._send(200, core.status_snapshot())
                if parts == ["nodes"]:
                    return self._send(200, {"nodes": core.nodes_snapshot()})
                if parts == ["metrics-series"]:
                    return self._send(200, {"series": core.metrics_series()})
                if parts == ["eval-matrix"]:
                    return self._send(200, {"matrix": core.eval_matrix()})
                if parts == ["events"]:
                    return self._send(200, {"events": core.event_log})
                if len(parts) == 3 and parts[0] == "rounds" and parts[2] == "metrics":
                    try:
                        return self._send(200, core.round_metrics(int(parts[1])))
                    except (ValueError, Conflict):
                        return self._send(404, {"error": f"no metrics for round {parts[1]}"})
            return self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            if not self._authorized():
                return self._send(401, {"error": "operator token required"})
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            try:
                if len(parts) == 2 and parts[0] == "federation":
                    return self._send(200, server.command(parts[1]))
                if len(parts) == 3 and parts[0] == "nodes" and parts[2] in ("approve", "evict"):
                    return self._send(200, server.command(parts[2], parts[1]))
            except (AlreadyRunning, InsufficientNodes, Conflict) as exc:
                return self._send(409, {"error": str(exc)})
            return self._send(404, {"error": f"unknown path {self.path}"})

    return ControlHandler


# --- configuration -----------------------------------------------------------------

def load_server_config(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise FatalConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise FatalConfigError("server config must be a mapping")
    return raw


def build_core(raw: dict, resume: Optional[str] = None) -> CoordinatorCore:
    fed = dict(raw.get("federation") or {})
    config = FederationConfig(
        total_rounds=int(fed.get("total_rounds", 20)),
        epochs_per_round=int(fed.get("epochs_per_round", 10)),
        quorum_fraction=float(fed.get("quorum_fraction", 1.0)),
        round_timeout=fed.get("round_timeout"),
        min_nodes=int(fed.get("min_nodes", 1)),
        checkpoint_dir=fed.get("checkpoint_dir"),
    )
    tokens: dict[str, bytes] = {}
    approved: list[str] = []
    for entry in raw.get("nodes") or []:
        node_id = str(entry["node_id"])
        if "token" in entry:
            tokens[node_id] = str(entry["token"]).encode("utf-8")
        elif "token_env" in entry:
            value = os.environ.get(str(entry["token_env"]))
            if not value:
                raise FatalConfigError(f"env var {entry['token_env']} for node {node_id} is unset")
            tokens[node_id] = value.encode("utf-8")
        else:
            raise FatalConfigError(f"node {node_id} needs token or token_env")
        if entry.get("approve"):
            approved.append(node_id)
    if resume:
        core = CoordinatorCore.restore(resume, tokens, now=time.time())
    else:
        model_block = dict(raw.get("model") or {})
        spec = ModelSpec(
            input_dim=int(model_block.get("input_dim", 1)),
            hidden_dims=tuple(model_block.get("hidden_dims", ())),
            seed=int(model_block.get("seed", 0)),
        )
        core = CoordinatorCore(config, init_model(spec), tokens, auto_approve=approved)
    return core


# --- demo federation ------------------------------------------------------------------

def run_demo(preset: str, host: str, node_port: int, http_port: int,
             operator_token: str, round_delay: float, total_rounds: int,
             epochs_per_round: int, checkpoint_dir: Optional[str]) -> CoordinatorServer:
    """Boot a coordinator plus in-process synthetic agents against real sockets.

    One node is left Pending so an operator can exercise the approval flow;
    local baselines train in the background to populate the eval matrix.
    """
    from .datakit import preset_sites
    from .metrics import cross_eval, evaluate  # noqa: F401  (cross_eval used below)
    from .nodeagent import AgentCore, NodeConfig, ReconnectPolicy, run_agent
    from .trainer import TrainerConfig, train_local

    sites, input_dim = preset_sites(preset)
    tokens = {ds.site_id: f"demo-token-{ds.site_id}".encode() for ds in sites}
    config = FederationConfig(
        total_rounds=total_rounds,
        epochs_per_round=epochs_per_round,
        min_nodes=max(1, len(sites) - 1),
        checkpoint_dir=checkpoint_dir,
    )
    model = init_model(ModelSpec(input_dim=input_dim, seed=42))
    pending = sites[-1].site_id  # left for the operator to approve
    core = CoordinatorCore(
        config, model, tokens,
        auto_approve=[ds.site_id for ds in sites if ds.site_id != pending],
    )
    server = CoordinatorServer(core, host, node_port, http_port, operator_token)
    server.start()

    def agent_thread(ds):
        cfg = NodeConfig(
            node_id=ds.site_id,
            server_host=host,
            server_port=server.node_port,
            token=tokens[ds.site_id],
            dataset=ds,
            trainer=TrainerConfig(),
            seed=1000 + hash(ds.site_id) % 1000,
            epochs_per_round=epochs_per_round,
            reconnect=ReconnectPolicy(initial_backoff=0.5, max_backoff=5.0),
        )
        run_agent(cfg, round_delay=round_delay)

    for ds in sites:
        threading.Thread(target=agent_thread, args=(ds,), daemon=True,
                         name=f"demo-agent-{ds.site_id}").start()

    def baseline_thread():
        models = {}
        for ds in sites:
            report = train_local(
                init_model(ModelSpec(input_dim=input_dim, seed=7)), ds,
                epochs=100, rng_seed=(99, hash(ds.site_id) % 997),
            )
            models[ds.site_id] = report.weights
        rows = cross_eval(models, {ds.site_id: ds for ds in sites})
        with server.lock:
            core.set_eval_matrix([_report_row(r) for r in rows])

    threading.Thread(target=baseline_thread, daemon=True, name="demo-baselines").start()
    return server


def _report_row(report) -> dict:
    counts = report.counts
    return {
        "model_site": report.model_site,
        "test_site": report.test_site,
        "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "balanced_accuracy": report.balanced_accuracy,
        "accuracy": report.accuracy,
        "roc_auc": report.roc_auc,
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="fedorch-server", description="Federation coordinator")
    parser.add_argument("--config", help="YAML server config file")
    parser.add_argument("--resume", help="checkpoint file to resume from")
    parser.add_argument("--autostart", action="store_true",
                        help="start the federation once enough nodes are approved")
    parser.add_argument("--demo", metavar="PRESET",
                        help="run a self-contained demo federation from a preset")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--node-port", type=int, default=7005)
    parser.add_argument("--http-port", type=int, default=8080)
    parser.add_argument("--round-delay", type=float, default=1.0,
                        help="demo: seconds each node lingers per round")
    parser.add_argument("--rounds", type=int, default=20, help="demo: total rounds")
    parser.add_argument("--epochs", type=int, default=10, help="demo: epochs per round")
    parser.add_argument("--checkpoint-dir", default=None, help="demo: checkpoint directory")
    args = parser.parse_args(argv)

    operator_token = os.environ.get(OPERATOR_TOKEN_ENV)
    if not operator_token:
        operator_token = secrets.token_hex(8)
        print(f"[fedorch-server] generated operator token: {operator_token}", file=sys.stderr)

    if args.demo:
        server = run_demo(
            args.demo, args.host, args.node_port, args.http_port, operator_token,
            args.round_delay, args.rounds, args.epochs, args.checkpoint_dir,
        )
        print(
            f"[fedorch-server] demo on http://{args.host}:{server.http_port} "
            f"(nodes on tcp {server.node_port})",
            file=sys.stderr,
        )
        server.wait()
        return

    if not args.config:
        parser.error("--config is required unless --demo is used")
    raw = load_server_config(args.config)
    core = build_core(raw, resume=args.resume)
    listen = raw.get("listen") or {}
    server = CoordinatorServer(
        core,
        host=str(listen.get("host", args.host)),
        node_port=int(listen.get("node_port", args.node_port)),
        http_port=int(listen.get("http_port", args.http_port)),
        operator_token=operator_token,
    )
    server.start()
    print(
        f"[fedorch-server] control API on http://{server.host}:{server.http_port}, "
        f"nodes on tcp {server.node_port}",
        file=sys.stderr,
    )
    if args.autostart:
        def autostart():
            while True:
                time.sleep(0.5)
                try:
                    server.command("start")
                    return
                except (InsufficientNodes, Conflict):
                    continue
                except AlreadyRunning:
                    return
        threading.Thread(target=autostart, daemon=True).start()
    server.wait()


if __name__ == "__main__":
    main()
