"""
FastAPI application exposing the stateless geometry and metric operations.
"""

import logging

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from periscope.errors import PeriscopeError, ShapeError
from periscope.models.service import (
    BackProjectRequest,
    BackProjectResponse,
    ErrorResponse,
    EvaluateRequest,
    EvaluateResponse,
    RefractionRequest,
    RefractionResponse,
)
from periscope.stages.measurement import back_project_coords
from periscope.stages.refraction import refraction_table
from periscope.stages.training import evaluate

logger = logging.getLogger(__name__)

app = FastAPI(
    title="Periscope",
    description="Metric periocular depth: refraction oracle, back-projection and depth metrics.",
    version="1.0.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(PeriscopeError)
async def periscope_error_handler(request: Request, exc: PeriscopeError):
    logger.warning("%s %s failed: %s", request.method, request.url.path, exc)
    return JSONResponse(
        status_code=422,
        content=ErrorResponse(error=exc.code, message=str(exc)).model_dump(),
    )


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"status": "ok", "service": "periscope"}


@app.post("/api/v1/refraction", response_model=RefractionResponse)
def refraction(request: RefractionRequest):
    rows = refraction_table(
        request.angles_deg,
        radius=request.radius_mm,
        depth=request.chamber_depth_mm,
        index=request.index,
        true_diameter=request.pupil_mm,
    )
    return RefractionResponse(rows=rows)


@app.post("/api/v1/back-project", response_model=BackProjectResponse)
def back_project(request: BackProjectRequest):
    """Pinhole back-projection of pixels whose depth the caller already looked up."""
    if len(request.pixels) != len(request.depths):
        raise ShapeError(f"{len(request.pixels)} pixels but {len(request.depths)} depths")
    px = np.asarray(request.pixels, dtype=np.float64)
    depths = np.asarray(request.depths, dtype=np.float64)
    points = back_project_coords(px[:, 0], px[:, 1], depths, request.intrinsics)
    valid = np.isfinite(depths) & (depths > 0)
    return BackProjectResponse(
        points_mm=[tuple(map(float, p)) if ok else None for p, ok in zip(points, valid)],
        n_invalid=int((~valid).sum()),
    )


@app.post("/api/v1/evaluate", response_model=EvaluateResponse)
def evaluate_depth(request: EvaluateRequest):
    try:
        pred = np.asarray(request.pred_mm, dtype=np.float64)
        gt = np.asarray(request.gt_mm, dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(f"depth arrays must be rectangular numeric lists: {exc}") from exc
    return EvaluateResponse(metrics=evaluate(pred, gt))
