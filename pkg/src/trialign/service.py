"""HTTP facade for interactive scene querying: upload a scene, cluster it,
rank clusters against language queries, and fetch per-cluster points.

Sessions live in memory; mutations are serialized per scene while queries
stay read-only.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .checkpoint import Checkpoint, load_checkpoint
from .geometry import FormatError, SceneCloud, parse_pc_bytes
from .inference import ClusterSet, InferenceSession, cluster_scene, scene_query

DEFAULT_MAX_POINTS = 2_000_000


@dataclass
class SceneSession:
    scene_id: str
    scene: SceneCloud
    created_at: float
    clusters: Optional[ClusterSet] = None
    cluster_params: Optional[dict] = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    def __init__(self):
        self._sessions: Dict[str, SceneSession] = {}
        self._lock = threading.Lock()

    def add(self, scene: SceneCloud) -> SceneSession:
        session = SceneSession(scene_id=uuid.uuid4().hex[:12], scene=scene,
                               created_at=time.time())
        with self._lock:
            self._sessions[session.scene_id] = session
        return session

    def get(self, scene_id: str) -> Optional[SceneSession]:
        with self._lock:
            return self._sessions.get(scene_id)


class ClusterRequest(BaseModel):
    k: int
    seed: int = 0
    strip_floor: bool = False


class QueryRequest(BaseModel):
    text: str


def create_app(ckpt: Checkpoint, max_points: int = DEFAULT_MAX_POINTS,
               static_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="scene query service")
    inference = InferenceSession(ckpt)
    store = SessionStore()

    def error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"error": message})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/scenes")
    async def upload_scene(request: Request):
        body = await request.body()
        try:
            pc = parse_pc_bytes(body)
        except FormatError as exc:
            return error(400, str(exc))
        if pc.n_points > max_points:
            return error(413, f"scene exceeds the {max_points}-point limit")
        session = store.add(SceneCloud(points=pc.points))
        return {"scene_id": session.scene_id, "n_points": session.scene.n_points}

    @app.post("/scenes/{scene_id}/cluster")
    def cluster(scene_id: str, req: ClusterRequest):
        session = store.get(scene_id)
        if session is None:
            return error(404, f"unknown scene {scene_id}")
        with session.lock:
            try:
                clusters = cluster_scene(session.scene, req.k, req.seed,
                                         strip_floor=req.strip_floor,
                                         session=inference)
            except ValueError as exc:
                return error(422, str(exc))
            session.clusters = clusters
            session.cluster_params = req.model_dump()
            pts = session.scene.points
            summary = []
            for j in range(clusters.k):
                members = pts[clusters.members(j)]
                summary.append({
                    "index": j,
                    "size": int(members.shape[0]),
                    "centroid": clusters.centroids[j].tolist(),
                    "bbox": {"min": members.min(axis=0).tolist(),
                             "max": members.max(axis=0).tolist()},
                })
        return {"scene_id": scene_id, "k": clusters.k, "clusters": summary,
                "stripped": int(session.scene.n_points - clusters.kept_indices.size)}

    @app.post("/scenes/{scene_id}/query")
    def query(scene_id: str, req: QueryRequest):
        session = store.get(scene_id)
        if session is None:
            return error(404, f"unknown scene {scene_id}")
        if session.clusters is None:
            return error(409, "scene has not been clustered yet")
        if not req.text.strip():
            return error(422, "query text must be nonempty")
        ranked = scene_query(session.clusters, req.text, inference)
        return {"query": req.text,
                "results": [{"cluster": s.cluster, "score": s.score, "rank": s.rank}
                            for s in ranked]}

    @app.get("/scenes/{scene_id}/points")
    def points(scene_id: str, cluster: int = Query(...), coords: int = Query(0)):
        session = store.get(scene_id)
        if session is None:
            return error(404, f"unknown scene {scene_id}")
        if session.clusters is None:
            return error(409, "scene has not been clustered yet")
        if not 0 <= cluster < session.clusters.k:
            return error(422, f"cluster index {cluster} out of range "
                              f"[0, {session.clusters.k})")
        members = session.clusters.members(cluster)
        if coords:
            return {"cluster": cluster,
                    "coords": session.scene.points[members].tolist()}
        return {"cluster": cluster, "indices": members.tolist()}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="viewer")

    return app


def serve(ckpt_path, port: int = 8000, host: str = "127.0.0.1",
          static_dir: Optional[Path] = None) -> None:
    import uvicorn

    ckpt = load_checkpoint(ckpt_path)
    app = create_app(ckpt, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port)
