/** Dashboard entry point: login, 2s polling, rendering, operator actions.
 * All mutating requests go through explicit button handlers; polling only GETs.
 */

import { ApiClient } from "./api.js";
import { actionEnabled, runAction } from "./actions.js";
import { heatColor, heatmapModel, lineGeometry, metricSeries } from "./charts.js";
import {
  DashboardState,
  initialState,
  loggedIn,
  nodeIsStale,
  pollFailed,
  pollSucceeded,
  progressPercent,
  type PollPayload,
} from "./state.js";
import type { OperatorAction } from "./types.js";

const POLL_INTERVAL_MS = 2000;

let state: DashboardState = initialState();
let api: ApiClient | null = null;
let pollTimer: number | null = null;
let pollInFlight = false;

const $ = (id: string) => document.getElementById(id)!;

function setupLogin(): void {
  const form = $("login-form") as HTMLFormElement;
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const url = ($("login-url") as HTMLInputElement).value.trim() || "http://127.0.0.1:8080";
    const token = ($("login-token") as HTMLInputElement).value; // memory only
    api = new ApiClient(url, token);
    state = loggedIn(state);
    render();
    void poll();
    if (pollTimer === null) {
      pollTimer = window.setInterval(() => void poll(), POLL_INTERVAL_MS);
    }
  });
}

async function poll(): Promise<void> {
  if (!api || state.phase !== "active" || pollInFlight) {
    return;
  }
  pollInFlight = true;
  try {
    const [status, nodes, series, matrix] = await Promise.all([
      api.status(),
      api.nodes(),
      api.metricsSeries(),
      api.evalMatrix(),
    ]);
    if (status.ok && nodes.ok && series.ok && matrix.ok) {
      const payload: PollPayload = {
        status: status.value,
        nodes: nodes.value,
        series: series.value,
        matrix: matrix.value,
      };
      state = pollSucceeded(state, payload, Date.now());
    } else {
      const failure = [status, nodes, series, matrix].find((r) => !r.ok);
      state = pollFailed(state, failure && !failure.ok ? failure.error : { kind: "network", message: "poll failed" });
    }
  } finally {
    pollInFlight = false;
  }
  render();
}

function toast(message: string, ok: boolean): void {
  const el = document.createElement("div");
  el.className = `toast ${ok ? "ok" : "err"}`;
  el.textContent = message;
  $("toasts").appendChild(el);
  setTimeout(() => el.remove(), 4000);
}

async function onAction(action: OperatorAction, nodeId?: string): Promise<void> {
  if (!api) {
    return;
  }
  const outcome = await runAction(api, action, {
    nodeId,
    confirm: (prompt) => window.confirm(prompt),
  });
  if (outcome === null) {
    return; // confirmation declined; nothing was sent
  }
  toast(outcome.toast, outcome.ok);
  if (outcome.unauthorized) {
    state = { ...state, phase: "login", unauthorized: true };
    render();
    return;
  }
  await poll(); // refresh from the source of truth after any 2xx
}

function render(): void {
  $("login").classList.toggle("hidden", state.phase !== "login");
  $("app").classList.toggle("hidden", state.phase !== "active");
  $("login-error").textContent = state.unauthorized
    ? `Unauthorized: ${state.lastError ?? "token rejected"}`
    : "";
  if (state.phase !== "active") {
    return;
  }
  $("stale-banner").classList.toggle(
    "hidden",
    !(state.stale || (state.missedPolls > 0 && state.snapshot === null)),
  );
  const snapshot = state.snapshot;
  if (!snapshot) {
    return;
  }
  renderStatus(snapshot);
  renderNodes(snapshot);
  renderCharts(snapshot);
}

function renderStatus(snapshot: PollPayload): void {
  const status = snapshot.status;
  const chip = $("status-chip");
  chip.textContent = status.status;
  chip.className = `chip ${status.status.toLowerCase()}`;
  $("round-label").textContent =
    status.round > 0 ? `round ${status.round} / ${status.total_rounds}` : "not started";
  $("received-label").textContent = `${status.received}/${status.expected} updates in`;
  ($("progress-fill") as HTMLElement).style.width = `${progressPercent(status)}%`;
  for (const action of ["start", "pause", "resume", "abort"] as OperatorAction[]) {
    ($(`btn-${action}`) as HTMLButtonElement).disabled = !actionEnabled(action, status.status);
  }
}

function renderNodes(snapshot: PollPayload): void {
  const now = Date.now() / 1000;
  const body = $("node-rows");
  body.innerHTML = "";
  for (const node of snapshot.nodes) {
    const row = document.createElement("tr");
    const stale = nodeIsStale(node, now);
    row.innerHTML = `
      <td>${node.node_id}</td>
      <td><span class="badge ${node.approval.toLowerCase()}">${node.approval}</span></td>
      <td><span class="badge ${stale ? "stale" : node.liveness.toLowerCase()}">${
        stale ? "Stale" : node.liveness
      }</span></td>
      <td>${node.contributed_rounds.length}</td>
      <td class="node-actions"></td>`;
    const cell = row.querySelector(".node-actions")!;
    for (const action of ["approve", "evict"] as OperatorAction[]) {
      const button = document.createElement("button");
      button.textContent = action;
      button.disabled = !actionEnabled(action, snapshot.status.status, node);
      button.addEventListener("click", () => void onAction(action, node.node_id));
      cell.appendChild(button);
    }
    body.appendChild(row);
  }
}

function renderCharts(snapshot: PollPayload): void {
  drawLines(snapshot);
  drawHeatmap(snapshot);
}

function drawLines(snapshot: PollPayload): void {
  const canvas = $("metrics-canvas") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const series = metricSeries(snapshot.series);
  const nonEmpty = series.some((s) => s.points.length > 0);
  $("metrics-empty").classList.toggle("hidden", nonEmpty);
  if (!nonEmpty) {
    return;
  }
  const geometry = lineGeometry(series, canvas.width, canvas.height);
  ctx.strokeStyle = "#30363d";
  ctx.fillStyle = "#8b949e";
  ctx.font = "10px monospace";
  for (const tick of geometry.yTicks) {
    ctx.beginPath();
    ctx.moveTo(28, tick.y);
    ctx.lineTo(canvas.width - 28, tick.y);
    ctx.stroke();
    ctx.fillText(tick.label, 2, tick.y + 3);
  }
  for (const tick of geometry.xTicks) {
    ctx.fillText(tick.label, tick.x - 4, canvas.height - 10);
  }
  for (const line of geometry.polylines) {
    ctx.strokeStyle = line.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    line.points.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
    ctx.stroke();
    for (const [x, y] of line.points) {
      ctx.fillStyle = line.color;
      ctx.beginPath();
      ctx.arc(x, y, 2, 0, Math.PI * 2);
      ctx.fill();
    }
  }
  const legend = $("metrics-legend");
  legend.innerHTML = series
    .map((s) => `<span><i style="background:${s.color}"></i>${s.label}</span>`)
    .join("");
}

function drawHeatmap(snapshot: PollPayload): void {
  const canvas = $("matrix-canvas") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const model = heatmapModel(snapshot.matrix);
  const empty = model.cells.length === 0;
  $("matrix-empty").classList.toggle("hidden", !empty);
  if (empty) {
    return;
  }
  const left = 70;
  const top = 20;
  const cw = (canvas.width - left - 10) / model.sites.length;
  const ch = (canvas.height - top - 40) / model.models.length;
  ctx.font = "10px monospace";
  ctx.fillStyle = "#8b949e";
  model.sites.forEach((site, j) => {
    ctx.fillText(site.slice(0, 9), left + j * cw + 3, top - 6);
  });
  model.models.forEach((m, i) => {
    ctx.fillStyle = "#8b949e";
    ctx.fillText(m.slice(0, 9), 2, top + i * ch + ch / 2 + 3);
    model.sites.forEach((site, j) => {
      const cell = model.cells[i * model.sites.length + j];
      const x = left + j * cw;
      const y = top + i * ch;
      if (cell.value === null) {
        drawHatched(ctx, x, y, cw - 2, ch - 2); // undefined metric cell
      } else {
        ctx.fillStyle = heatColor(cell.value);
        ctx.fillRect(x, y, cw - 2, ch - 2);
        ctx.fillStyle = "#e6edf3";
        ctx.fillText(cell.value.toFixed(2), x + cw / 2 - 12, y + ch / 2 + 3);
      }
    });
  });
  ctx.fillStyle = "#8b949e";
  ctx.fillText("rows: models, columns: test sites; hatched = undefined", left, canvas.height - 8);
}

function drawHatched(
  ctx: CanvasRenderingContext2D,
  x: number,
  y: number,
  w: number,
  h: number,
): void {
  ctx.save();
  ctx.fillStyle = "#21262d";
  ctx.fillRect(x, y, w, h);
  ctx.strokeStyle = "#6e7681";
  ctx.lineWidth = 1;
  ctx.beginPath();
  for (let offset = -h; offset < w; offset += 6) {
    ctx.moveTo(x + Math.max(0, offset), y + Math.max(0, -offset));
    ctx.lineTo(x + Math.min(w, offset + h), y + Math.min(h, h - offset + (offset > 0 ? offset : 0)));
  }
  for (let offset = 0; offset < w + h; offset += 6) {
    ctx.moveTo(x + Math.max(0, offset - h), y + Math.min(h, offset));
    ctx.lineTo(x + Math.min(w, offset), y + Math.max(0, offset - w));
  }
  ctx.stroke();
  ctx.restore();
}

function wireFederationButtons(): void {
  for (const action of ["start", "pause", "resume", "abort"] as OperatorAction[]) {
    $(`btn-${action}`).addEventListener("click", () => void onAction(action));
  }
}

setupLogin();
wireFederationButtons();
render();
