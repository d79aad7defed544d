import { describe, expect, it } from "vitest";

import { ViewerState } from "../src/state.js";
import { ClusterResponse, QueryResponse } from "../src/types.js";

function clustering(sceneId: string, k: number): ClusterResponse {
  return {
    scene_id: sceneId,
    k,
    stripped: 0,
    clusters: Array.from({ length: k }, (_, index) => ({
      index,
      size: 10,
      centroid: [0, 0, 0] as [number, number, number],
      bbox: { min: [0, 0, 0] as [number, number, number], max: [1, 1, 1] as [number, number, number] },
    })),
  };
}

function queryResponse(clusters: number[]): QueryResponse {
  return {
    query: "q",
    results: clusters.map((cluster, i) => ({ cluster, score: 1 / (i + 2), rank: i + 1 })),
  };
}

describe("ViewerState", () => {
  it("loads a scene and resets dependent state", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 2));
    state.addQuery("q", queryResponse([1, 0]), "{}");
    state.loadScene("def", 50);
    expect(state.clustering).toBeNull();
    expect(state.history).toHaveLength(0);
    expect(state.activeHighlight).toBeNull();
  });

  it("rejects clustering for a different scene", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    expect(() => state.setClustering(clustering("zzz", 2))).toThrow(/does not match/);
  });

  it("requires clustering before queries", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    expect(() => state.addQuery("q", queryResponse([0]), "{}")).toThrow(/cluster/);
  });

  it("highlights the top cluster after a query", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 3));
    state.addQuery("q", queryResponse([2, 0, 1]), "{}");
    expect(state.activeHighlight).toBe(2);
  });

  it("re-highlighting any ranked result is allowed", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 3));
    state.addQuery("q", queryResponse([2, 0, 1]), "{}");
    state.setHighlight(1);
    expect(state.activeHighlight).toBe(1);
  });

  it("rejects highlights outside the current clustering", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 2));
    expect(() => state.setHighlight(5)).toThrow(/not part of/);
    expect(() => state.setHighlight(-1)).toThrow(/not part of/);
  });

  it("a new clustering invalidates history and highlight", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 2));
    state.addQuery("q", queryResponse([1, 0]), "{}");
    state.setClustering(clustering("abc", 3));
    expect(state.history).toHaveLength(0);
    expect(state.activeHighlight).toBeNull();
  });

  it("appends history in order so follow-up queries build on it", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 2));
    state.addQuery("first", queryResponse([0, 1]), "{}");
    state.addQuery("second", queryResponse([1, 0]), "{}");
    expect(state.history.map((h) => h.text)).toEqual(["first", "second"]);
  });

  it("ranked rows preserve server order exactly", () => {
    const state = new ViewerState();
    state.loadScene("abc", 100);
    state.setClustering(clustering("abc", 3));
    const response = queryResponse([2, 0, 1]);
    const entry = state.addQuery("q", response, "{}");
    expect(state.rankedRows(entry)).toEqual(
      response.results.map((r) => ({ rank: r.rank, cluster: r.cluster, score: r.score })),
    );
  });
});
