"""Read-only HTTP API over a heat-map index.

The service exposes the same scoring code path as the search command, so
rankings agree between the two. The index is immutable after load and
requests are handled concurrently.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel, Field

from .core import UnknownFactorError
from .heatmaps import HeatMapStack
from .retrieval import QueryGroup, QueryTerm, rank_images, resolve_factor

log = logging.getLogger("semfactor.service")


@dataclass
class SearchIndex:
    stacks: dict[str, HeatMapStack]
    factor_names: list[str]


def build_search_index(stacks: dict[str, HeatMapStack]) -> SearchIndex:
    if not stacks:
        raise ValueError("empty heat-map index")
    names = None
    for stack in stacks.values():
        if names is None:
            names = stack.factor_names
        elif stack.factor_names != names:
            raise ValueError(f"inconsistent factor names at image {stack.image_id}")
    return SearchIndex(stacks=dict(stacks), factor_names=list(names))


class GroupBody(BaseModel):
    factors: list[str] = Field(min_length=1)
    colocated: bool = True


class SearchBody(BaseModel):
    groups: list[GroupBody] = Field(min_length=1)
    limit: int | None = None


def create_app(index: SearchIndex) -> FastAPI:
    app = FastAPI(title="semfactor search", docs_url=None, redoc_url=None)

    @app.middleware("http")
    async def access_log(request: Request, call_next):
        start = time.perf_counter()
        response = await call_next(request)
        log.info(
            json.dumps(
                {
                    "method": request.method,
                    "path": request.url.path,
                    "status": response.status_code,
                    "ms": round((time.perf_counter() - start) * 1000, 3),
                }
            )
        )
        return response

    @app.get("/api/health")
    def health():
        return {"status": "ok", "images": len(index.stacks), "factors": len(index.factor_names)}

    @app.get("/api/factors")
    def factors():
        return {"factors": index.factor_names}

    @app.post("/api/search")
    def search(body: SearchBody):
        try:
            groups = tuple(
                QueryGroup(
                    factors=tuple(resolve_factor(nm, index.factor_names) for nm in g.factors),
                    colocated=g.colocated if len(g.factors) > 1 else True,
                )
                for g in body.groups
            )
        except UnknownFactorError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        ranked = rank_images(index.stacks, QueryTerm(groups=groups))
        if body.limit is not None:
            ranked = ranked[: body.limit]
        return {"results": [{"image_id": i, "score": s} for i, s in ranked]}

    @app.get("/api/heatmap/{image_id}/{factor_name}")
    def heatmap(image_id: str, factor_name: str):
        stack = index.stacks.get(image_id)
        if stack is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        try:
            k = resolve_factor(factor_name, index.factor_names)
        except UnknownFactorError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from None
        return {
            "image_id": image_id,
            "factor": factor_name,
            "width": stack.width,
            "height": stack.height,
            "values": [float(v) for v in stack.maps[k].ravel()],
        }

    return app
