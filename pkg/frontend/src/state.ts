/** Viewer session state: the loaded scene, its current clustering, the
 * query history, and the active highlight.
 *
 * The displayed ranking for each query is the raw server JSON; rendering
 * reads it verbatim so what the operator sees is exactly what the service
 * returned.
 */

import { ClusterResponse, QueryResponse } from "./types.js";

export interface HistoryEntry {
  text: string;
  response: QueryResponse;
  /** Exact JSON string received from /query. */
  raw: string;
}

export class ViewerState {
  sceneId: string | null = null;
  nPoints = 0;
  clustering: ClusterResponse | null = null;
  history: HistoryEntry[] = [];
  activeHighlight: number | null = null;

  loadScene(sceneId: string, nPoints: number): void {
    this.sceneId = sceneId;
    this.nPoints = nPoints;
    this.clustering = null;
    this.history = [];
    this.activeHighlight = null;
  }

  setClustering(response: ClusterResponse): void {
    if (this.sceneId === null || response.scene_id !== this.sceneId) {
      throw new Error("clustering response does not match the loaded scene");
    }
    this.clustering = response;
    // a fresh clustering invalidates highlights and past rankings
    this.history = [];
    this.activeHighlight = null;
  }

  get k(): number {
    return this.clustering ? this.clustering.k : 0;
  }

  addQuery(text: string, response: QueryResponse, raw: string): HistoryEntry {
    if (!this.clustering) {
      throw new Error("cluster the scene before querying");
    }
    const entry: HistoryEntry = { text, response, raw };
    this.history.push(entry);
    if (response.results.length > 0) {
      this.setHighlight(response.results[0].cluster);
    }
    return entry;
  }

  setHighlight(cluster: number | null): void {
    if (cluster !== null) {
      if (!this.clustering || cluster < 0 || cluster >= this.clustering.k) {
        throw new Error(`cluster ${cluster} is not part of the current clustering`);
      }
    }
    this.activeHighlight = cluster;
  }

  /** Rows for the ranked list panel, in server order. */
  rankedRows(entry: HistoryEntry): { rank: number; cluster: number; score: number }[] {
    return entry.response.results.map((r) => ({
      rank: r.rank,
      cluster: r.cluster,
      score: r.score,
    }));
  }
}
