"""Dataset ingestion, segment scheduling, patient splits, and the
annotation document store.

Recording segments are scheduled around self-reported pain timestamps: one
15-minute window per report, centered on it, clipped to the recording span,
with overlaps resolved into disjoint coverage so no frame is extracted
twice. Annotations live in a JSON-lines journal (one document per line)
with an in-memory index; (frame_id, annotator_id) is the upsert key.
"""
from __future__ import annotations

import csv
import json
import math
import os
import random
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

# Annotation inventory: the twelve AU codes collected for ICU frames, with
# their FACS descriptions.
PAIN_ICU_ANNOTATION_AUS: tuple[int, ...] = (4, 6, 7, 9, 10, 12, 20, 24, 25, 26, 27, 43)

AU_DESCRIPTIONS: dict[int, str] = {
    1: "Inner Brow Raiser",
    2: "Outer Brow Raiser",
    4: "Brow Lowerer",
    5: "Upper Lid Raiser",
    6: "Cheek Raiser",
    7: "Lid Tightener",
    9: "Nose Wrinkler",
    10: "Upper Lip Raiser",
    12: "Lip Corner Puller",
    14: "Dimpler",
    15: "Lip Corner Depressor",
    17: "Chin Raiser",
    20: "Lip Stretcher",
    23: "Lip Funneler",
    24: "Lip Pressor",
    25: "Lips Part",
    26: "Jaw Drop",
    27: "Mouth Stretch",
    43: "Eyes Closed",
}

SEGMENT_DURATION = timedelta(minutes=15)
REPORT_RADIUS = timedelta(minutes=60)


def parse_timestamp(value: str) -> datetime:
    """ISO-8601 -> aware UTC datetime; naive stamps are taken as UTC."""
    dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat()


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    patient_id: str
    captured_at: datetime
    image_path: str
    has_landmarks: bool = False


@dataclass(frozen=True)
class PainReport:
    patient_id: str
    reported_at: datetime
    dvprs: int

    def __post_init__(self):
        if not 0 <= int(self.dvprs) <= 10:
            raise ValueError(f"dvprs score {self.dvprs} outside 0..10")
        object.__setattr__(self, "dvprs", int(self.dvprs))


@dataclass(frozen=True)
class Segment:
    start: datetime
    end: datetime
    reported_at: datetime

    @property
    def duration(self) -> timedelta:
        return self.end - self.start


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    ratio: float


@dataclass(frozen=True)
class AULabel:
    present: bool
    intensity: int | None = None


@dataclass(frozen=True)
class AnnotationDoc:
    frame_id: str
    annotator_id: str
    labels: dict[int, AULabel]
    submitted_at: datetime

    def __post_init__(self):
        if not self.frame_id or not self.annotator_id:
            raise ValueError("frame_id and annotator_id must be non-empty")
        for au, label in self.labels.items():
            if au not in PAIN_ICU_ANNOTATION_AUS:
                raise ValueError(f"AU {au} is not in the annotation inventory")
            if label.intensity is not None:
                if not label.present:
                    raise ValueError(f"AU {au}: intensity given for an absent AU")
                hi = 1 if au == 43 else 5
                if not 0 <= label.intensity <= hi:
                    raise ValueError(f"AU {au}: intensity {label.intensity} outside 0..{hi}")

    def to_json_dict(self) -> dict:
        labels = {}
        for au in sorted(self.labels):
            entry: dict = {"present": self.labels[au].present}
            if self.labels[au].intensity is not None:
                entry["intensity"] = self.labels[au].intensity
            labels[str(au)] = entry
        return {
            "frame_id": self.frame_id,
            "annotator_id": self.annotator_id,
            "labels": labels,
            "submitted_at": format_timestamp(self.submitted_at),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "AnnotationDoc":
        labels = {
            int(au): AULabel(present=bool(entry["present"]), intensity=entry.get("intensity"))
            for au, entry in payload["labels"].items()
        }
        return cls(
            frame_id=payload["frame_id"],
            annotator_id=payload["annotator_id"],
            labels=labels,
            submitted_at=parse_timestamp(payload["submitted_at"]),
        )


# ---------------------------------------------------------------------------
# manifests and reports

_MANIFEST_HEADER = ["frame_id", "patient_id", "captured_at", "image_path"]
_REPORT_HEADER = ["patient_id", "reported_at", "dvprs"]


def load_manifest(path: str | os.PathLike) -> list[FrameRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _MANIFEST_HEADER:
            raise ValueError(f"{path}: manifest header mismatch")
        frames = []
        seen: set[str] = set()
        for row in reader:
            if not row:
                continue
            frame_id, patient_id, captured_at, image_path = row
            if frame_id in seen:
                raise ValueError(f"{path}: duplicate frame_id {frame_id!r}")
            seen.add(frame_id)
            frames.append(
                FrameRecord(
                    frame_id=frame_id,
                    patient_id=patient_id,
                    captured_at=parse_timestamp(captured_at),
                    image_path=image_path,
                )
            )
    return frames


def save_manifest(path: str | os.PathLike, frames: list[FrameRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        for f in frames:
            writer.writerow([f.frame_id, f.patient_id, format_timestamp(f.captured_at), f.image_path])


def load_pain_reports(path: str | os.PathLike) -> list[PainReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _REPORT_HEADER:
            raise ValueError(f"{path}: pain-report header mismatch")
        return [
            PainReport(patient_id=row[0], reported_at=parse_timestamp(row[1]), dvprs=int(row[2]))
            for row in reader
            if row
        ]


def save_pain_reports(path: str | os.PathLike, reports: list[PainReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REPORT_HEADER)
        for r in reports:
            writer.writerow([r.patient_id, format_timestamp(r.reported_at), r.dvprs])


# ---------------------------------------------------------------------------
# segment scheduling

def schedule_segments(
    reports: list[PainReport],
    span_start: datetime,
    span_end: datetime,
    duration: timedelta = SEGMENT_DURATION,
    radius: timedelta = REPORT_RADIUS,
    center_offset: timedelta = timedelta(0),
) -> list[Segment]:
    """One duration-long window per report, centered on it (plus the
    configurable offset), clipped to the recording span and the report's
    radius. Overlaps between reports are resolved by keeping only the
    not-yet-covered remainder, so output segments are disjoint and each
    stays within its own report's window.
    """
    if span_start > span_end:
        raise ValueError("recording span is inverted")
    covered: list[tuple[datetime, datetime]] = []
    out: list[Segment] = []
    for report in sorted(reports, key=lambda r: r.reported_at):
        center = report.reported_at + center_offset
        start = max(center - duration / 2, span_start, report.reported_at - radius)
        end = min(center + duration / 2, span_end, report.reported_at + radius)
        if start >= end:
            continue
        for frag_start, frag_end in _subtract(start, end, covered):
            covered.append((frag_start, frag_end))
            out.append(Segment(start=frag_start, end=frag_end, reported_at=report.reported_at))
        covered.sort()
    out.sort(key=lambda s: s.start)
    return out


def _subtract(start: datetime, end: datetime, covered: list[tuple[datetime, datetime]]):
    pieces = [(start, end)]
    for c_start, c_end in covered:
        next_pieces = []
        for s, e in pieces:
            if c_end <= s or c_start >= e:
                next_pieces.append((s, e))
                continue
            if s < c_start:
                next_pieces.append((s, c_start))
            if c_end < e:
                next_pieces.append((c_end, e))
        pieces = next_pieces
    return pieces


def frames_near_report(
    frames: list[FrameRecord], report: PainReport, radius: timedelta = REPORT_RADIUS
) -> list[FrameRecord]:
    """Frames of the report's patient within the closed +-radius interval,
    time-ordered."""
    hits = [
        f
        for f in frames
        if f.patient_id == report.patient_id and abs(f.captured_at - report.reported_at) <= radius
    ]
    hits.sort(key=lambda f: (f.captured_at, f.frame_id))
    return hits


def split_by_patient(patient_ids, ratio: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Deterministic patient-wise split: seeded shuffle, then round-half-up
    of ratio * n patients into train."""
    ids = sorted(set(patient_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 patients to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_train = math.floor(ratio * len(ids) + 0.5)
    return DatasetSplit(train=tuple(ids[:n_train]), test=tuple(ids[n_train:]), seed=seed, ratio=ratio)


# ---------------------------------------------------------------------------
# annotation store

class AnnotationStore:
    """JSON-lines-backed document store keyed by (frame_id, annotator_id).

    Writes are serialized through one lock and appended to the journal
    before the index is updated; re-submitting a byte-identical document is
    a no-op, so replaying the journal is idempotent. ``compact`` rewrites
    the journal with only the live documents.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self._path = str(path) if path is not None else None
        self._index: dict[tuple[str, str], AnnotationDoc] = {}
        self._lock = threading.Lock()
        if self._path and os.path.exists(self._path):
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    doc = AnnotationDoc.from_json_dict(json.loads(line))
                    self._index[(doc.frame_id, doc.annotator_id)] = doc

    def __len__(self) -> int:
        return len(self._index)

    def _append(self, doc: AnnotationDoc) -> None:
        if not self._path:
            return
        with open(self._path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(doc.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n")
            fh.flush()

    def upsert(self, doc: AnnotationDoc) -> str:
        """Insert or replace; returns 'created', 'updated', or 'unchanged'."""
        key = (doc.frame_id, doc.annotator_id)
        with self._lock:
            existing = self._index.get(key)
            if existing is not None and existing.to_json_dict() == doc.to_json_dict():
                return "unchanged"
            self._append(doc)
            self._index[key] = doc
            return "updated" if existing is not None else "created"

    def get(self, frame_id: str, annotator_id: str) -> AnnotationDoc | None:
        with self._lock:
            return self._index.get((frame_id, annotator_id))

    def docs_for_frame(self, frame_id: str) -> list[AnnotationDoc]:
        with self._lock:
            docs = [d for (fid, _), d in self._index.items() if fid == frame_id]
        docs.sort(key=lambda d: d.annotator_id)
        return docs

    def annotated_frame_ids(self) -> set[str]:
        with self._lock:
            return {fid for fid, _ in self._index}

    def frames_annotated_by(self, annotator_id: str) -> set[str]:
        with self._lock:
            return {fid for fid, aid in self._index if aid == annotator_id}

    def counts_by_annotator(self) -> dict[str, int]:
        with self._lock:
            counts: dict[str, int] = {}
            for _, aid in self._index:
                counts[aid] = counts.get(aid, 0) + 1
        return counts

    def all_docs(self) -> list[AnnotationDoc]:
        with self._lock:
            docs = list(self._index.values())
        docs.sort(key=lambda d: (d.frame_id, d.annotator_id))
        return docs

    def compact(self) -> None:
        if not self._path:
            return
        with self._lock:
            docs = sorted(self._index.values(), key=lambda d: (d.frame_id, d.annotator_id))
            tmp = self._path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                for doc in docs:
                    fh.write(json.dumps(doc.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n")
            os.replace(tmp, self._path)


def consolidate_labels(
    docs: list[AnnotationDoc], au_ids: tuple[int, ...] = PAIN_ICU_ANNOTATION_AUS
) -> dict[int, bool]:
    """Per-AU majority vote over the annotators who labeled that AU; an
    exact tie (or no votes) counts as absent."""
    if not docs:
        raise ValueError("cannot consolidate an empty document list")
    out: dict[int, bool] = {}
    for au in au_ids:
        votes = [d.labels[au].present for d in docs if au in d.labels]
        present = sum(votes)
        out[au] = present > len(votes) - present
    return out


def query_labels(
    store: AnnotationStore,
    frame_ids: list[str],
    au_ids: tuple[int, ...],
    known_frame_ids: set[str],
):
    """Consolidated label matrix in frame order plus an annotated-frame
    mask; unannotated frames are masked out, never zero-filled silently."""
    unknown = [fid for fid in frame_ids if fid not in known_frame_ids]
    if unknown:
        raise KeyError(f"unknown frame ids: {unknown[:5]}")
    labels = np.zeros((len(frame_ids), len(au_ids)), dtype=np.float64)
    mask = np.zeros(len(frame_ids), dtype=bool)
    for i, fid in enumerate(frame_ids):
        docs = store.docs_for_frame(fid)
        if not docs:
            continue
        consolidated = consolidate_labels(docs, au_ids)
        labels[i] = [1.0 if consolidated[au] else 0.0 for au in au_ids]
        mask[i] = True
    return labels, mask
