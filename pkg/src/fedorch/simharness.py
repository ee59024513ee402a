"""Deterministic in-process federation with fault injection, plus experiments.

The simulator drives the same CoordinatorCore and AgentCore used by the real
network stack, but over a virtual transport: a single event heap ordered by
(time, sequence) with seeded drops and latencies. Agents recover from every
fault through the ordinary resume path (periodic re-sync + idempotent
submissions), so with retries enabled the final global model is bit-identical
to the fault-free run, which is exactly what the equivalence experiments
assert. Training happens synchronously inside event handlers, so a run is a
pure function of (profiles, config, fault plan, seeds).
"""

from __future__ import annotations

import argparse
import heapq
import itertools
import json
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .coordinator import CHECKPOINT_FILENAME, CoordinatorCore, FederationConfig
from .datakit import SiteDataset, SiteProfile, generate_site, preset_config
from .errors import InvalidPlan
from .metrics import EvalReport, cross_eval, evaluate
from .nodeagent import AgentCore
from . import protocol
from .tensors import TensorMap, serialize
from .trainer import (
    ModelSpec,
    TrainerConfig,
    derive_seed,
    init_model,
    predict_proba,
    train_local,
)

PHASES = ("before_train", "after_train_before_submit")

_POLL_INTERVAL = 5.0
_CRASH_DOWNTIME = 2.0


@dataclass(frozen=True)
class FaultPlan:
    """Deterministic fault schedule for one simulated federation run."""

    seed: int = 0
    drop_probability: float = 0.0
    latency: float | tuple[float, float] = 0.001
    disconnects: tuple[tuple[str, int, str], ...] = ()
    coordinator_crash_at: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.drop_probability < 1.0:
            raise InvalidPlan("drop_probability must be in [0, 1)")
        if isinstance(self.latency, tuple):
            lo, hi = self.latency
            if lo < 0 or hi < lo:
                raise InvalidPlan("latency range must satisfy 0 <= lo <= hi")
        elif self.latency < 0:
            raise InvalidPlan("latency must be nonnegative")
        for node_id, round_index, phase in self.disconnects:
            if round_index < 1:
                raise InvalidPlan(f"disconnect references round {round_index}")
            if phase not in PHASES:
                raise InvalidPlan(f"unknown disconnect phase {phase!r}")
        if self.coordinator_crash_at is not None and self.coordinator_crash_at < 1:
            raise InvalidPlan("coordinator_crash_at must be >= 1")


@dataclass
class ExperimentReport:
    """Everything one scenario run produced; bit-reproducible except wall clock."""

    scenario: str
    seeds: tuple[int, ...]
    per_round: list[dict]
    final_matrix: list[dict]
    local_baselines: dict
    summary: dict
    wall_clock_seconds: float
    final_model: Optional[TensorMap] = None
    event_log: list = None

    def deterministic_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seeds": list(self.seeds),
            "per_round": self.per_round,
            "final_matrix": self.final_matrix,
            "local_baselines": self.local_baselines,
            "summary": self.summary,
            "event_log": self.event_log,
        }

    def to_json(self) -> str:
        payload = dict(self.deterministic_dict(), wall_clock_seconds=self.wall_clock_seconds)
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        if self.final_matrix:
            (out_dir / "eval_matrix.csv").write_text(_rows_to_csv(self.final_matrix))


def node_seed(base_seed: int, index: int) -> int:
    """Stable per-site training seed for a run seed."""
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1, np.uint64)[0] >> 1)


def report_row(report: EvalReport) -> dict:
    c = report.counts
    return {
        "model_site": report.model_site,
        "test_site": report.test_site,
        "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "balanced_accuracy": report.balanced_accuracy,
        "accuracy": report.accuracy,
        "roc_auc": report.roc_auc,
    }


def _rows_to_csv(rows: list[dict]) -> str:
    header = ["model_site", "test_site", "tp", "fp", "tn", "fn",
              "sensitivity", "specificity", "balanced_accuracy", "accuracy", "roc_auc"]
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            value = row.get(key)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(format(value, ".10g"))
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# --- the simulator -----------------------------------------------------------------


class _SimAgent:
    __slots__ = ("core", "generation", "connected", "faults", "last_down", "last_up")

    def __init__(self, core: AgentCore, faults: dict[tuple[int, str], bool]):
        self.core = core
        self.generation = 0
        self.connected = False
        self.faults = faults
        self.last_down = 0.0  # FIFO cursor for coordinator->agent delivery times
        self.last_up = 0.0


class FederationSim:
    """Event-driven federation over a simulated lossy transport."""

    def __init__(
        self,
        sites: Sequence[SiteDataset],
        config: FederationConfig,
        plan: FaultPlan,
        trainer_config: TrainerConfig,
        base_seed: int,
        checkpoint_dir: str,
        hidden_dims: tuple[int, ...] = (),
        carry_across_rounds: bool = True,
    ):
        if not sites:
            raise InvalidPlan("need at least one site")
        known = {ds.site_id for ds in sites}
        for node_id, _, _ in plan.disconnects:
            if node_id not in known:
                raise InvalidPlan(f"disconnect references unknown node {node_id!r}")
        if plan.coordinator_crash_at is not None and plan.coordinator_crash_at > config.total_rounds:
            raise InvalidPlan("coordinator_crash_at beyond total_rounds")
        self.sites = list(sites)
        self.plan = plan
        self.trainer_config = trainer_config
        self.base_seed = base_seed
        input_dim = sites[0].input_dim
        self.initial_model = init_model(
            ModelSpec(input_dim=input_dim, hidden_dims=hidden_dims, seed=node_seed(base_seed, 999))
        )
        self.tokens = {ds.site_id: f"sim-{ds.site_id}".encode() for ds in sites}
        self.config = FederationConfig(
            total_rounds=config.total_rounds,
            epochs_per_round=config.epochs_per_round,
            quorum_fraction=config.quorum_fraction,
            round_timeout=config.round_timeout,
            min_nodes=config.min_nodes,
            checkpoint_dir=checkpoint_dir,
        )
        self._nonce_counter = itertools.count()
        self._session_counter = itertools.count(1)
        self.core = self._new_core()
        self.agents: dict[str, _SimAgent] = {}
        for index, ds in enumerate(sorted(self.sites, key=lambda d: d.site_id)):
            agent_core = AgentCore(
                ds.site_id, self.tokens[ds.site_id], ds, trainer_config,
                seed=node_seed(base_seed, index),
                carry_across_rounds=carry_across_rounds,
            )
            faults = {
                (round_index, phase): True
                for node_id, round_index, phase in plan.disconnects
                if node_id == ds.site_id
            }
            self.agents[ds.site_id] = _SimAgent(agent_core, faults)
        self.rng = np.random.default_rng((plan.seed, 0xFA017))
        self.now = 0.0
        self._seq = itertools.count()
        self._heap: list = []
        self.down = False
        self._crash_pending = plan.coordinator_crash_at
        self.dropped_frames = 0

    def _new_core(self) -> CoordinatorCore:
        return CoordinatorCore(
            self.config,
            self.initial_model,
            self.tokens,
            auto_approve=list(self.tokens),
            nonce_source=lambda: next(self._nonce_counter).to_bytes(protocol.NONCE_LEN, "big"),
            session_source=lambda: next(self._session_counter).to_bytes(protocol.SESSION_ID_LEN, "big"),
        )

    # --- scheduling ---------------------------------------------------------------

    def _schedule(self, delay: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), fn))

    def _latency(self) -> float:
        lat = self.plan.latency
        if isinstance(lat, tuple):
            return float(self.rng.uniform(lat[0], lat[1]))
        return float(lat)

    def _dropped(self) -> bool:
        if self.plan.drop_probability == 0.0:
            return False
        dropped = bool(self.rng.random() < self.plan.drop_probability)
        if dropped:
            self.dropped_frames += 1
        return dropped

    # --- transport --------------------------------------------------------------------

    def _send_up(self, node_id: str, frames: Iterable[protocol.Frame]) -> None:
        agent = self.agents[node_id]
        generation = agent.generation
        for frame in frames:
            if self._dropped():
                continue
            at = max(self.now + self._latency(), agent.last_up)
            agent.last_up = at + 1e-9
            self._schedule(at - self.now, lambda f=frame, g=generation, n=node_id: self._deliver_up(n, g, f))

    def _deliver_up(self, node_id: str, generation: int, frame: protocol.Frame) -> None:
        agent = self.agents[node_id]
        if self.down or not agent.connected or agent.generation != generation:
            return
        out = self.core.handle_frame((node_id, generation), frame, self.now)
        for (dst_node, dst_gen), reply in out:
            self._send_down(dst_node, dst_gen, reply)
        self._maybe_crash()

    def _send_down(self, node_id: str, generation: int, frame: protocol.Frame) -> None:
        agent = self.agents[node_id]
        if self._dropped():
            return
        at = max(self.now + self._latency(), agent.last_down)
        agent.last_down = at + 1e-9
        self._schedule(at - self.now, lambda: self._deliver_down(node_id, generation, frame))

    def _deliver_down(self, node_id: str, generation: int, frame: protocol.Frame) -> None:
        agent = self.agents[node_id]
        if not agent.connected or agent.generation != generation:
            return
        if frame.msg_type == protocol.ROUND_START:
            header, _ = protocol.decode_tensor_payload(frame.payload)
            key = (int(header["round"]), "before_train")
            if agent.faults.pop(key, None):
                self._sever(node_id)
                return
        replies = agent.core.on_frame(frame, self.now)
        kept: list[protocol.Frame] = []
        for reply in replies:
            if reply.msg_type == protocol.ROUND_RESULT:
                reply_header, _ = protocol.decode_tensor_payload(reply.payload)
                key = (int(reply_header["round"]), "after_train_before_submit")
                if agent.faults.pop(key, None):
                    self._sever(node_id)
                    return  # trained result is lost with the connection
            kept.append(reply)
        self._send_up(node_id, kept)

    # --- connection management --------------------------------------------------------

    def _connect(self, node_id: str) -> None:
        agent = self.agents[node_id]
        agent.generation += 1
        agent.connected = True
        self.core.connection_opened((node_id, agent.generation))
        self._send_up(node_id, agent.core.connect_frames())

    def _sever(self, node_id: str) -> None:
        agent = self.agents[node_id]
        if agent.connected and not self.down:
            self.core.connection_closed((node_id, agent.generation))
        agent.connected = False
        agent.generation += 1

    def _maybe_crash(self) -> None:
        if self._crash_pending is None or self.down:
            return
        state = self.core.state
        if state.round_index == self._crash_pending and len(state.received) >= 1:
            self._crash_pending = None
            self.down = True
            for node_id in self.agents:
                self._sever(node_id)
            self._schedule(_CRASH_DOWNTIME, self._restore)

    def _restore(self) -> None:
        path = Path(self.config.checkpoint_dir) / CHECKPOINT_FILENAME
        self.core = CoordinatorCore.restore(
            path,
            self.tokens,
            now=self.now,
            nonce_source=lambda: next(self._nonce_counter).to_bytes(protocol.NONCE_LEN, "big"),
            session_source=lambda: next(self._session_counter).to_bytes(protocol.SESSION_ID_LEN, "big"),
        )
        self.down = False

    def _poll(self, node_id: str) -> None:
        agent = self.agents[node_id]
        if agent.core.finished:
            return
        if self.down:
            self._sever(node_id)
        elif not agent.connected or agent.core.needs_reconnect or not agent.core.joined:
            # covers a join whose handshake frames were dropped mid-flight
            if agent.connected:
                self._sever(node_id)
            self._connect(node_id)
        else:
            self._send_up(node_id, agent.core.idle_frames())
        self._schedule(_POLL_INTERVAL, lambda: self._poll(node_id))

    # --- main loop ---------------------------------------------------------------------

    def run(self, max_events: int = 2_000_000) -> CoordinatorCore:
        for node_id in sorted(self.agents):
            self._connect(node_id)
            self._schedule(_POLL_INTERVAL, lambda n=node_id: self._poll(n))
        started = False
        events = 0
        while self._heap:
            events += 1
            if events > max_events:
                raise RuntimeError("simulation did not converge (event budget exhausted)")
            when, _, fn = heapq.heappop(self._heap)
            self.now = when
            fn()
            if not started and not self.down:
                ready = sum(
                    1 for a in self.agents.values() if a.connected and a.core.ticket is not None
                )
                if ready == len(self.agents):
                    started = True
                    for (node_id, gen), frame in self.core.start_federation(self.now):
                        self._send_down(node_id, gen, frame)
            if started and all(a.core.finished for a in self.agents.values()):
                break
        if not all(a.core.finished for a in self.agents.values()):
            raise RuntimeError("simulation ended with unfinished agents")
        return self.core


def run_sim(
    profiles: Sequence[SiteProfile],
    config: FederationConfig,
    fault_plan: FaultPlan,
    *,
    input_dim: int,
    trainer_config: Optional[TrainerConfig] = None,
    base_seed: int = 0,
    split_fractions: tuple[float, float] = (0.7, 0.2),
    scenario: str = "custom",
) -> ExperimentReport:
    """Run one simulated federation over synthetic sites built from profiles."""
    sites = [generate_site(p, input_dim, split_fractions) for p in profiles]
    started = time.perf_counter()
    core = _run_federation(sites, config, fault_plan, trainer_config or TrainerConfig(), base_seed)
    final_model = core.state.global_model
    matrix = cross_eval({"federated": final_model}, {ds.site_id: ds for ds in sites})
    return ExperimentReport(
        scenario=scenario,
        seeds=(base_seed,),
        per_round=_per_round(core),
        final_matrix=[report_row(r) for r in matrix],
        local_baselines={},
        summary={
            "rounds": core.state.round_index,
            "aggregations": core.aggregation_count(),
            "dropped_frames_observed": getattr(core, "_dropped_frames", 0),
            "final_model_hex": serialize(final_model).hex(),
        },
        wall_clock_seconds=time.perf_counter() - started,
        final_model=final_model,
        event_log=list(core.event_log),
    )


def _run_federation(
    sites: Sequence[SiteDataset],
    config: FederationConfig,
    plan: FaultPlan,
    trainer_config: TrainerConfig,
    base_seed: int,
    hidden_dims: tuple[int, ...] = (),
) -> CoordinatorCore:
    with tempfile.TemporaryDirectory(prefix="fedorch-sim-") as ckpt_dir:
        sim = FederationSim(sites, config, plan, trainer_config, base_seed, ckpt_dir, hidden_dims)
        core = sim.run()
        core._dropped_frames = sim.dropped_frames
        return core


def _per_round(core: CoordinatorCore) -> list[dict]:
    series = []
    for entry in core.metrics_series():
        series.append({
            "round": entry["round"],
            "contributors": entry.get("contributors", []),
            "metrics": entry.get("aggregate", {}),
        })
    return series


# --- experiments ------------------------------------------------------------------------


def _preset_sites_for_seed(preset: str, run_seed: int) -> tuple[list[SiteDataset], dict]:
    block = preset_config(preset)
    input_dim = int(block["input_dim"])
    fractions = tuple(block.get("split", (0.7, 0.2)))
    sites = []
    for index, entry in enumerate(block["sites"]):
        profile = SiteProfile(**dict(entry, seed=node_seed(run_seed, 500 + index)))
        sites.append(generate_site(profile, input_dim, fractions))
    return sites, {"input_dim": input_dim, "split": fractions}


def preset_trainer_config(preset: str) -> TrainerConfig:
    """Trainer settings a preset's experiments were calibrated with."""
    return TrainerConfig(**(preset_config(preset).get("trainer") or {}))


def _cross_site_means(rows: list[EvalReport], own_site: Optional[str]) -> dict:
    """Mean sensitivity/specificity/balanced accuracy over foreign defined cells."""
    sums: dict[str, list[float]] = {"sensitivity": [], "specificity": [], "balanced_accuracy": []}
    for row in rows:
        if own_site is not None and row.test_site == own_site:
            continue
        for key in sums:
            value = getattr(row, key)
            if value is not None:
                sums[key].append(value)
    return {key: (float(np.mean(vals)) if vals else None) for key, vals in sums.items()}


def experiment_local_vs_federated(
    preset: str = "eight-sites",
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    *,
    baseline_epochs: int = 100,
    federation: Optional[FederationConfig] = None,
    trainer_config: Optional[TrainerConfig] = None,
    exclude_sites: Sequence[str] = (),
    collapse_threshold: float = 0.1,
) -> ExperimentReport:
    """Train per-site baselines and a federated model; compare cross-site metrics."""
    started = time.perf_counter()
    federation = federation or FederationConfig()
    trainer_config = trainer_config or preset_trainer_config(preset)
    per_seed: list[dict] = []
    final_matrix_rows: list[dict] = []
    per_round: list[dict] = []
    baseline_summaries: dict[str, dict] = {}
    for seed in seeds:
        sites, _ = _preset_sites_for_seed(preset, seed)
        sites = [ds for ds in sites if ds.site_id not in set(exclude_sites)]
        site_map = {ds.site_id: ds for ds in sites}

        local_models: dict[str, TensorMap] = {}
        for index, ds in enumerate(sorted(sites, key=lambda d: d.site_id)):
            spec = ModelSpec(input_dim=ds.input_dim, seed=node_seed(seed, 100 + index))
            report = train_local(
                init_model(spec), ds, baseline_epochs,
                rng_seed=derive_seed(node_seed(seed, 200 + index)),
                config=trainer_config,
            )
            local_models[ds.site_id] = report.weights

        fed_config = FederationConfig(
            total_rounds=federation.total_rounds,
            epochs_per_round=federation.epochs_per_round,
            quorum_fraction=federation.quorum_fraction,
            round_timeout=federation.round_timeout,
            min_nodes=len(sites),
        )
        core = _run_federation(sites, fed_config, FaultPlan(seed=seed), trainer_config, seed)
        federated_model = core.state.global_model

        all_models = dict(local_models)
        all_models["federated"] = federated_model
        rows = cross_eval(all_models, site_map)
        by_model: dict[str, list[EvalReport]] = {}
        for row in rows:
            by_model.setdefault(row.model_site, []).append(row)

        collapsed = []
        local_cross_bas = []
        for site_id in sorted(local_models):
            means = _cross_site_means(by_model[site_id], own_site=site_id)
            baseline_summaries.setdefault(site_id, {"cross_site": []})
            baseline_summaries[site_id]["cross_site"].append(means)
            if means["balanced_accuracy"] is not None:
                local_cross_bas.append(means["balanced_accuracy"])
            sens, spec = means["sensitivity"], means["specificity"]
            if (sens is not None and sens < collapse_threshold) or (
                spec is not None and spec < collapse_threshold
            ):
                collapsed.append(site_id)

        fed_means = _cross_site_means(by_model["federated"], own_site=None)
        per_seed.append({
            "seed": seed,
            "collapsed_models": collapsed,
            "n_collapsed": len(collapsed),
            "federated_cross_ba": fed_means["balanced_accuracy"],
            "mean_local_cross_ba": float(np.mean(local_cross_bas)) if local_cross_bas else None,
        })
        if seed == seeds[0]:
            final_matrix_rows = [report_row(r) for r in rows]
            per_round = _per_round(core)

    fed_bas = [s["federated_cross_ba"] for s in per_seed if s["federated_cross_ba"] is not None]
    local_bas = [s["mean_local_cross_ba"] for s in per_seed if s["mean_local_cross_ba"] is not None]
    summary = {
        "preset": preset,
        "per_seed": per_seed,
        "mean_collapsed_models": float(np.mean([s["n_collapsed"] for s in per_seed])),
        "mean_federated_cross_ba": float(np.mean(fed_bas)),
        "mean_local_cross_ba": float(np.mean(local_bas)),
        "superiority_margin": float(np.mean(fed_bas) - np.mean(local_bas)),
        "excluded_sites": sorted(exclude_sites),
    }
    return ExperimentReport(
        scenario=f"local-vs-federated:{preset}",
        seeds=tuple(seeds),
        per_round=per_round,
        final_matrix=final_matrix_rows,
        local_baselines={k: v for k, v in sorted(baseline_summaries.items())},
        summary=summary,
        wall_clock_seconds=time.perf_counter() - started,
    )


def experiment_noisy_site_ablation(
    preset: str = "eight-sites",
    noisy_site: str = "ugn",
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    **kwargs,
) -> ExperimentReport:
    """Federated balanced accuracy on clean sites, with vs without the noisy site."""
    started = time.perf_counter()
    federation = kwargs.pop("federation", None) or FederationConfig()
    trainer_config = kwargs.pop("trainer_config", None) or preset_trainer_config(preset)
    with_site: list[float] = []
    without_site: list[float] = []
    for seed in seeds:
        sites, _ = _preset_sites_for_seed(preset, seed)
        site_map = {ds.site_id: ds for ds in sites}
        clean = {k: v for k, v in site_map.items() if k != noisy_site}

        def federated_ba(training_sites: list[SiteDataset]) -> float:
            config = FederationConfig(
                total_rounds=federation.total_rounds,
                epochs_per_round=federation.epochs_per_round,
                min_nodes=len(training_sites),
            )
            core = _run_federation(training_sites, config, FaultPlan(seed=seed), trainer_config, seed)
            rows = cross_eval({"federated": core.state.global_model}, clean)
            return _cross_site_means(rows, own_site=None)["balanced_accuracy"]

        with_site.append(federated_ba(list(site_map.values())))
        without_site.append(federated_ba(list(clean.values())))
    summary = {
        "noisy_site": noisy_site,
        "ba_with_noisy_site": float(np.mean(with_site)),
        "ba_without_noisy_site": float(np.mean(without_site)),
        "degradation": float(np.mean(without_site) - np.mean(with_site)),
        "per_seed": [
            {"seed": s, "with": w, "without": wo}
            for s, w, wo in zip(seeds, with_site, without_site)
        ],
    }
    return ExperimentReport(
        scenario=f"noisy-site-ablation:{preset}",
        seeds=tuple(seeds),
        per_round=[],
        final_matrix=[],
        local_baselines={},
        summary=summary,
        wall_clock_seconds=time.perf_counter() - started,
    )


def experiment_size_sweep(
    sizes: Sequence[int] = (200, 400, 600, 800, 1000),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    *,
    epochs: int = 100,
    trainer_config: Optional[TrainerConfig] = None,
) -> ExperimentReport:
    """Single-site learning curve over dataset sizes with an 80/10/10 split."""
    started = time.perf_counter()
    if any(s < 10 for s in sizes):
        raise InvalidPlan(f"sizes must be >= 10, got {sorted(sizes)}")
    block = preset_config("size-sweep")
    input_dim = int(block["input_dim"])
    fractions = tuple(block.get("split", (0.8, 0.1)))
    template = dict(block["sites"][0])
    trainer_config = trainer_config or preset_trainer_config("size-sweep")

    by_size: dict[int, dict[str, list[float]]] = {
        size: {"sensitivity": [], "specificity": [], "balanced_accuracy": [], "roc_auc": []}
        for size in sizes
    }
    for seed in seeds:
        for size_index, size in enumerate(sizes):
            profile = SiteProfile(**dict(
                template,
                site_id=f"sweep-{size}",
                n_samples=size,
                seed=node_seed(seed, 700 + size_index),
            ))
            ds = generate_site(profile, input_dim, fractions)
            spec = ModelSpec(input_dim=input_dim, seed=node_seed(seed, 800 + size_index))
            report = train_local(
                init_model(spec), ds, epochs,
                rng_seed=derive_seed(node_seed(seed, 900 + size_index)),
                config=trainer_config,
            )
            scores = predict_proba(report.weights, ds.features[ds.test_idx])
            ev = evaluate(scores, ds.labels[ds.test_idx])
            for key in ("sensitivity", "specificity", "balanced_accuracy", "roc_auc"):
                value = getattr(ev, key)
                if value is not None:
                    by_size[size][key].append(value)

    curve = []
    for size in sizes:
        entry = {"size": size}
        for key, values in by_size[size].items():
            entry[f"mean_{key}"] = float(np.mean(values)) if values else None
        curve.append(entry)
    mean_bas = [entry["mean_balanced_accuracy"] for entry in curve]
    rho = float(stats.spearmanr(list(sizes), mean_bas).statistic)
    summary = {
        "sizes": list(sizes),
        "curve": curve,
        "spearman_size_vs_balanced_accuracy": rho,
    }
    return ExperimentReport(
        scenario="size-sweep",
        seeds=tuple(seeds),
        per_round=[],
        final_matrix=[],
        local_baselines={},
        summary=summary,
        wall_clock_seconds=time.perf_counter() - started,
    )


# --- CLI --------------------------------------------------------------------------------


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="fedorch-sim", description="Deterministic federation experiments"
    )
    parser.add_argument("--scenario", required=True,
                        choices=["eight-sites", "two-sites-skewed", "size-sweep",
                                 "fault-equivalence", "noisy-site-ablation"])
    parser.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated run seeds")
    parser.add_argument("--out", default=None, help="directory for report.json and CSVs")
    parser.add_argument("--rounds", type=int, default=20)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--baseline-epochs", type=int, default=100)
    args = parser.parse_args(argv)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s != "")
    federation = FederationConfig(total_rounds=args.rounds, epochs_per_round=args.epochs)

    if args.scenario in ("eight-sites", "two-sites-skewed"):
        report = experiment_local_vs_federated(
            args.scenario, seeds, baseline_epochs=args.baseline_epochs, federation=federation,
        )
    elif args.scenario == "size-sweep":
        report = experiment_size_sweep(seeds=seeds, epochs=args.baseline_epochs)
    elif args.scenario == "noisy-site-ablation":
        report = experiment_noisy_site_ablation(seeds=seeds, federation=federation)
    else:
        report = run_fault_equivalence(seeds[0] if seeds else 0, federation)

    print(json.dumps(report.summary, indent=2, sort_keys=True))
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}", file=sys.stderr)


def run_fault_equivalence(
    seed: int = 0,
    federation: Optional[FederationConfig] = None,
    preset: str = "two-sites-skewed",
) -> ExperimentReport:
    """Faulted vs fault-free run on the same seeds; checks bit-identical models."""
    started = time.perf_counter()
    federation = federation or FederationConfig()
    sites, _ = _preset_sites_for_seed(preset, seed)
    node_ids = sorted(ds.site_id for ds in sites)
    trainer = preset_trainer_config(preset)
    config = FederationConfig(
        total_rounds=federation.total_rounds,
        epochs_per_round=federation.epochs_per_round,
        min_nodes=len(sites),
    )
    clean = _run_federation(sites, config, FaultPlan(seed=seed), trainer, seed)
    mid = max(1, federation.total_rounds // 2)
    faulty_plan = FaultPlan(
        seed=seed,
        drop_probability=0.3,
        latency=(0.001, 0.05),
        disconnects=(
            (node_ids[0], max(1, mid - 1), "before_train"),
            (node_ids[-1], mid, "after_train_before_submit"),
        ),
        coordinator_crash_at=min(federation.total_rounds, mid + 1),
    )
    faulty = _run_federation(sites, config, faulty_plan, trainer, seed)
    identical = clean.state.global_model == faulty.state.global_model
    summary = {
        "preset": preset,
        "rounds": config.total_rounds,
        "bit_identical_final_model": bool(identical),
        "dropped_frames_in_faulty_run": getattr(faulty, "_dropped_frames", None),
    }
    return ExperimentReport(
        scenario="fault-equivalence",
        seeds=(seed,),
        per_round=_per_round(faulty),
        final_matrix=[],
        local_baselines={},
        summary=summary,
        wall_clock_seconds=time.perf_counter() - started,
        final_model=clean.state.global_model if identical else None,
    )


if __name__ == "__main__":
    main()
