"""HTTP annotation service.

A thin JSON adapter over the document store and analytics modules: every
response body is producible by a direct library call. Writes funnel through
the store's single writer; the optional static directory serves the
annotation console.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .data import (
    AU_DESCRIPTIONS,
    PAIN_ICU_ANNOTATION_AUS,
    AnnotationDoc,
    AnnotationStore,
    AULabel,
    FrameRecord,
    PainReport,
    consolidate_labels,
)
from .pain import association_table

_CONTENT_TYPES = {".png": "image/png", ".ppm": "image/x-portable-pixmap"}


def au_schema() -> list[dict]:
    return [{"au_id": au, "description": AU_DESCRIPTIONS[au]} for au in PAIN_ICU_ANNOTATION_AUS]


@dataclass
class ServiceState:
    store: AnnotationStore
    frames: list[FrameRecord] = field(default_factory=list)
    reports: list[PainReport] = field(default_factory=list)
    metrics_path: str | None = None
    static_dir: str | None = None
    assignment_order: str = "ascending"  # or "random" (seeded per annotator)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.frame_id)
        self._by_id = {f.frame_id: f for f in self.frames}

    def frame(self, frame_id: str) -> FrameRecord | None:
        return self._by_id.get(frame_id)

    def queue_for(self, annotator_id: str) -> list[FrameRecord]:
        done = self.store.frames_annotated_by(annotator_id)
        pending = [f for f in self.frames if f.frame_id not in done]
        if self.assignment_order == "random":
            import random

            rng = random.Random(annotator_id)
            rng.shuffle(pending)
        return pending

    def association_payload(self) -> dict:
        labels_by_frame = {}
        for fid in self.store.annotated_frame_ids():
            labels_by_frame[fid] = consolidate_labels(self.store.docs_for_frame(fid))
        return association_table(self.frames, labels_by_frame, self.reports).to_json_dict()


class LabelIn(BaseModel):
    present: bool
    intensity: int | None = None


class AnnotationIn(BaseModel):
    frame_id: str
    annotator_id: str
    labels: dict[str, LabelIn]


def create_app(state: ServiceState, cors: bool = False) -> FastAPI:
    app = FastAPI(title="aupipe annotation service")

    if cors:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
        )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        # undecodable JSON is a malformed request, not a schema violation
        if any(e.get("type") == "json_invalid" for e in exc.errors()):
            return JSONResponse(status_code=400, content={"detail": "malformed JSON body"})
        return JSONResponse(status_code=422, content={"detail": exc.errors()})

    @app.get("/api/frames/next")
    def next_frame(annotator: str = ""):
        if not annotator:
            raise HTTPException(status_code=400, detail="missing annotator id")
        pending = state.queue_for(annotator)
        if not pending:
            return Response(status_code=204)
        frame = pending[0]
        return {
            "frame_id": frame.frame_id,
            "image_url": f"/api/frames/{frame.frame_id}/image",
            "au_schema": au_schema(),
        }

    @app.post("/api/annotations")
    def submit_annotation(payload: AnnotationIn):
        if state.frame(payload.frame_id) is None:
            raise HTTPException(status_code=404, detail=f"unknown frame {payload.frame_id!r}")
        try:
            labels = {
                int(au): AULabel(present=entry.present, intensity=entry.intensity)
                for au, entry in payload.labels.items()
            }
            doc = AnnotationDoc(
                frame_id=payload.frame_id,
                annotator_id=payload.annotator_id,
                labels=labels,
                submitted_at=datetime.now(timezone.utc),
            )
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        outcome = state.store.upsert(doc)
        stored = state.store.get(doc.frame_id, doc.annotator_id)
        return JSONResponse(
            status_code=201 if outcome == "created" else 200, content=stored.to_json_dict()
        )

    @app.get("/api/frames/{frame_id}/image")
    def frame_image(frame_id: str):
        frame = state.frame(frame_id)
        if frame is None or not os.path.exists(frame.image_path):
            raise HTTPException(status_code=404, detail=f"no image for frame {frame_id!r}")
        ext = os.path.splitext(frame.image_path)[1].lower()
        with open(frame.image_path, "rb") as fh:
            data = fh.read()
        return Response(content=data, media_type=_CONTENT_TYPES.get(ext, "application/octet-stream"))

    @app.get("/api/progress")
    def progress():
        return {
            "annotators": state.store.counts_by_annotator(),
            "total_frames": len(state.frames),
            "consolidated_frames": len(state.store.annotated_frame_ids()),
        }

    @app.get("/api/analysis/association")
    def association():
        return state.association_payload()

    @app.get("/api/metrics/latest")
    def latest_metrics():
        if not state.metrics_path or not os.path.exists(state.metrics_path):
            raise HTTPException(status_code=404, detail="no evaluation has run")
        with open(state.metrics_path, encoding="utf-8") as fh:
            return json.load(fh)

    if state.static_dir:
        app.mount("/", StaticFiles(directory=state.static_dir, html=True), name="console")

    return app
