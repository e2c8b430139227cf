"""Pain analytics: PSPI scoring, DVPRS categories, and the AU-presence by
pain-category association table.

The PSPI score combines six AU intensities as brow + max(cheek, lid) +
max(nose, upper lip) + eyes-closed, giving a 0..16 scale. The self-reported
DVPRS 0..10 score buckets into mild (0-4), moderate (5-6), and high (7-10).
Association percentages report how often each AU is present among frames
captured within an hour of a report in each category; a same-patient frame
near two reports counts once per report (configurable). No claim of pain
detection is made here: the table reports associations only.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import timedelta
from typing import Mapping

from .data import (
    PAIN_ICU_ANNOTATION_AUS,
    REPORT_RADIUS,
    FrameRecord,
    PainReport,
    frames_near_report,
)

PSPI_AUS = (4, 6, 7, 9, 10, 43)
PSPI_MAX = 16
DVPRS_CATEGORIES = ("mild", "moderate", "high")


def _check_intensity(au: int, value) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValueError(f"AU {au}: intensity must be an integer, got {value!r}")
    hi = 1 if au == 43 else 5
    if not 0 <= value <= hi:
        raise ValueError(f"AU {au}: intensity {value} outside 0..{hi}")
    return value


def pspi(intensities: Mapping[int, int]) -> int:
    """Pain intensity from the six constituent AU intensities; missing AUs
    are an error rather than an implicit zero."""
    missing = [au for au in PSPI_AUS if au not in intensities]
    if missing:
        raise ValueError(f"missing PSPI intensities for AUs {missing}")
    v = {au: _check_intensity(au, intensities[au]) for au in PSPI_AUS}
    return v[4] + max(v[6], v[7]) + max(v[9], v[10]) + v[43]


def dvprs_category(score: int) -> str:
    if not isinstance(score, int) or isinstance(score, bool):
        raise ValueError(f"DVPRS score must be an integer, got {score!r}")
    if not 0 <= score <= 10:
        raise ValueError(f"DVPRS score {score} outside 0..10")
    if score <= 4:
        return "mild"
    if score <= 6:
        return "moderate"
    return "high"


@dataclass(frozen=True)
class AssociationCell:
    present_count: int
    denominator: int

    @property
    def percentage(self) -> float | None:
        if self.denominator == 0:
            return None
        return 100.0 * self.present_count / self.denominator


@dataclass(frozen=True)
class AssociationTable:
    au_ids: tuple[int, ...]
    cells: dict[tuple[int, str], AssociationCell]

    def cell(self, au_id: int, category: str) -> AssociationCell:
        return self.cells[(au_id, category)]

    def to_json_dict(self) -> dict:
        rows = []
        for au in self.au_ids:
            for cat in DVPRS_CATEGORIES:
                c = self.cells[(au, cat)]
                rows.append(
                    {
                        "au_id": au,
                        "category": cat,
                        "present_count": c.present_count,
                        "denominator": c.denominator,
                        "percentage": c.percentage,
                    }
                )
        return {"categories": list(DVPRS_CATEGORIES), "rows": rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["au_id", "category", "present_count", "denominator", "percentage"])
        for au in self.au_ids:
            for cat in DVPRS_CATEGORIES:
                c = self.cells[(au, cat)]
                pct = "" if c.percentage is None else f"{c.percentage:.1f}"
                writer.writerow([au, cat, c.present_count, c.denominator, pct])
        return buf.getvalue()


def association_table(
    frames: list[FrameRecord],
    labels_by_frame: Mapping[str, Mapping[int, bool]],
    reports: list[PainReport],
    au_ids: tuple[int, ...] = PAIN_ICU_ANNOTATION_AUS,
    radius: timedelta = REPORT_RADIUS,
    dedupe_per_category: bool = False,
) -> AssociationTable:
    """AU presence percentages per pain category.

    Only frames with consolidated labels participate. Each report
    contributes its nearby frames to its category; with
    ``dedupe_per_category`` a frame counts at most once per category even
    when several same-category reports cover it.
    """
    labeled = [f for f in frames if f.frame_id in labels_by_frame]
    present: dict[tuple[int, str], int] = {}
    denom: dict[str, int] = {cat: 0 for cat in DVPRS_CATEGORIES}
    seen: dict[str, set[str]] = {cat: set() for cat in DVPRS_CATEGORIES}

    for report in reports:
        cat = dvprs_category(report.dvprs)
        for frame in frames_near_report(labeled, report, radius):
            if dedupe_per_category:
                if frame.frame_id in seen[cat]:
                    continue
                seen[cat].add(frame.frame_id)
            denom[cat] += 1
            labels = labels_by_frame[frame.frame_id]
            for au in au_ids:
                if labels.get(au, False):
                    present[(au, cat)] = present.get((au, cat), 0) + 1

    cells = {
        (au, cat): AssociationCell(present_count=present.get((au, cat), 0), denominator=denom[cat])
        for au in au_ids
        for cat in DVPRS_CATEGORIES
    }
    return AssociationTable(au_ids=tuple(au_ids), cells=cells)
