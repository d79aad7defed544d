/** DOM wiring: upload or attach a scene, cluster it, type queries, inspect
 * ranked clusters, click to re-highlight. One request in flight per action;
 * controls are disabled while waiting. */

import { ApiClient } from "./api.js";
import { buildAssignment } from "./palette.js";
import { parsePointCloud } from "./pcparse.js";
import { PointCloudView } from "./render.js";
import { ViewerState, HistoryEntry } from "./state.js";
import { ApiError } from "./types.js";

const api = new ApiClient("");
const state = new ViewerState();

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
};

const canvas = el<HTMLCanvasElement>("viewer");
const view = new PointCloudView(canvas);
const fileInput = el<HTMLInputElement>("scene-file");
const sceneLabel = el<HTMLSpanElement>("scene-label");
const kInput = el<HTMLInputElement>("k-input");
const seedInput = el<HTMLInputElement>("seed-input");
const stripFloorInput = el<HTMLInputElement>("strip-floor");
const clusterButton = el<HTMLButtonElement>("cluster-button");
const clusterError = el<HTMLSpanElement>("cluster-error");
const queryInput = el<HTMLInputElement>("query-input");
const queryButton = el<HTMLButtonElement>("query-button");
const resultsList = el<HTMLOListElement>("results");
const historyList = el<HTMLUListElement>("history");
const toast = el<HTMLDivElement>("toast");

let assignment: Int32Array | null = null;
let scenePositions: Float32Array | null = null;
let busy = false;

function setBusy(value: boolean): void {
  busy = value;
  for (const control of [fileInput, clusterButton, queryButton]) {
    control.disabled = value;
  }
  queryButton.disabled = value || !queryInput.value.trim() || !state.clustering;
}

function showToast(message: string): void {
  toast.textContent = message;
  toast.classList.add("visible");
  setTimeout(() => toast.classList.remove("visible"), 4000);
}

function renderHighlight(): void {
  if (assignment) {
    view.colorByAssignment(assignment, state.activeHighlight);
  }
}

function renderResults(entry: HistoryEntry): void {
  resultsList.textContent = "";
  for (const row of state.rankedRows(entry)) {
    const item = document.createElement("li");
    item.textContent = `cluster ${row.cluster}  score ${row.score.toFixed(5)}`;
    item.dataset.cluster = String(row.cluster);
    if (row.cluster === state.activeHighlight) item.classList.add("active");
    item.addEventListener("click", () => {
      state.setHighlight(row.cluster);
      renderResults(entry);
      renderHighlight();
    });
    resultsList.appendChild(item);
  }
}

function renderHistory(): void {
  historyList.textContent = "";
  for (const entry of [...state.history].reverse()) {
    const item = document.createElement("li");
    const top = entry.response.results[0];
    item.textContent = `"${entry.text}" -> cluster ${top ? top.cluster : "?"}`;
    item.addEventListener("click", () => renderResults(entry));
    historyList.appendChild(item);
  }
}

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file || busy) return;
  setBusy(true);
  try {
    const buffer = await file.arrayBuffer();
    const uploaded = await api.uploadScene(buffer);
    state.loadScene(uploaded.scene_id, uploaded.n_points);
    scenePositions = parsePointCloud(buffer);
    assignment = null;
    view.setPoints(scenePositions);
    sceneLabel.textContent = `${uploaded.scene_id} (${uploaded.n_points} points)`;
    resultsList.textContent = "";
    historyList.textContent = "";
    clusterError.textContent = "";
  } catch (err) {
    showToast(err instanceof Error ? err.message : String(err));
  } finally {
    setBusy(false);
  }
});

clusterButton.addEventListener("click", async () => {
  if (!state.sceneId || busy) return;
  setBusy(true);
  clusterError.textContent = "";
  try {
    const k = Number(kInput.value);
    const seed = Number(seedInput.value);
    const response = await api.cluster(state.sceneId, k, seed, stripFloorInput.checked);
    state.setClustering(response);
    const perCluster: number[][] = [];
    for (const summary of response.clusters) {
      perCluster[summary.index] = await api.points(state.sceneId, summary.index);
    }
    assignment = buildAssignment(state.nPoints, perCluster);
    renderHighlight();
    resultsList.textContent = "";
    renderHistory();
  } catch (err) {
    if (err instanceof ApiError && err.status === 422) {
      clusterError.textContent = err.message;
    } else {
      showToast(err instanceof Error ? err.message : String(err));
    }
  } finally {
    setBusy(false);
  }
});

queryInput.addEventListener("input", () => {
  queryButton.disabled = busy || !queryInput.value.trim() || !state.clustering;
});

async function submitQuery(): Promise<void> {
  const text = queryInput.value.trim();
  if (!text || !state.sceneId || busy) return;
  setBusy(true);
  try {
    const { body, raw } = await api.query(state.sceneId, text);
    const entry = state.addQuery(text, body, raw);
    renderResults(entry);
    renderHistory();
    renderHighlight();
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      showToast("cluster the scene first");
    } else {
      showToast(err instanceof Error ? err.message : String(err));
    }
  } finally {
    setBusy(false);
  }
}

queryButton.addEventListener("click", () => void submitQuery());
queryInput.addEventListener("keydown", (event) => {
  if (event.key === "Enter" && !queryButton.disabled) void submitQuery();
});

setBusy(false);
void api.health().then((ok) => {
  if (!ok) showToast("service unreachable; start it with: trialign serve --ckpt ...");
});
