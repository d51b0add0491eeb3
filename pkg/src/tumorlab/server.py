"""Read-only HTTP endpoint over an embedding table.

GET /neighbors?tumor_id=<id>&k=<K> returns ranked neighbors with same-image
exclusion; GET /healthz reports status and the table fingerprint. The table
is an immutable snapshot: reloading requires a restart.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .retrieval import EmbeddingTable, RetrievalIndex, query


def build_app(table: EmbeddingTable) -> FastAPI:
    index = RetrievalIndex(table)
    by_id = {row.tumor_id: row for row in table.rows}
    app = FastAPI(title="tumorlab retrieval endpoint")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "fingerprint": table.fingerprint, "rows": len(table.rows)}

    @app.get("/neighbors")
    def neighbors(tumor_id: str = "", k: str = "5"):
        try:
            k_int = int(k)
        except ValueError:
            raise HTTPException(status_code=400, detail=f"malformed k: {k!r}")
        if k_int < 1:
            raise HTTPException(status_code=400, detail=f"k must be >= 1, got {k_int}")
        row = by_id.get(tumor_id)
        if row is None:
            raise HTTPException(status_code=404, detail=f"unknown tumor_id: {tumor_id!r}")
        result = query(index, row.embedding, k_int, exclude_image_id=row.image_id)
        return JSONResponse(
            {
                "query": tumor_id,
                "k": k_int,
                "truncated": result.truncated,
                "neighbors": [
                    {"tumor_id": n.tumor_id, "distance": n.distance, "labels": n.row.labels}
                    for n in result.neighbors
                ],
            }
        )

    return app


def serve(table_path: Path | str, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    table = EmbeddingTable.load(table_path)
    uvicorn.run(build_app(table), host=host, port=port)
