/** Wire types mirroring the scene query service responses. */

export interface UploadResponse {
  scene_id: string;
  n_points: number;
}

export interface ClusterSummary {
  index: number;
  size: number;
  centroid: [number, number, number];
  bbox: { min: [number, number, number]; max: [number, number, number] };
}

export interface ClusterResponse {
  scene_id: string;
  k: number;
  clusters: ClusterSummary[];
  stripped: number;
}

export interface QueryResult {
  cluster: number;
  score: number;
  rank: number;
}

export interface QueryResponse {
  query: string;
  results: QueryResult[];
}

export interface PointsResponse {
  cluster: number;
  indices?: number[];
  coords?: [number, number, number][];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}
