import itertools
from datetime import datetime, timedelta, timezone

import pytest

from aupipe import pain as P
from aupipe.data import FrameRecord, PainReport

UTC = timezone.utc
T0 = datetime(2022, 3, 1, 0, 0, tzinfo=UTC)


def intensities(a4=0, a6=0, a7=0, a9=0, a10=0, a43=0):
    return {4: a4, 6: a6, 7: a7, 9: a9, 10: a10, 43: a43}


def brute_force_pspi(v):
    best_cheek = v[6] if v[6] >= v[7] else v[7]
    best_nose = v[9] if v[9] >= v[10] else v[10]
    return v[4] + best_cheek + best_nose + v[43]


class TestPspi:
    def test_all_zero(self):
        assert P.pspi(intensities()) == 0

    def test_sixteen_point_maximum(self):
        assert P.pspi(intensities(5, 5, 5, 5, 5, 1)) == 16

    def test_formula_example(self):
        assert P.pspi(intensities(a4=5, a6=5, a7=3, a9=0, a10=2, a43=1)) == 13

    def test_missing_au_rejected(self):
        with pytest.raises(ValueError):
            P.pspi({4: 1, 6: 1, 7: 1, 9: 1, 10: 1})

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            P.pspi(intensities(a4=6))
        with pytest.raises(ValueError):
            P.pspi(intensities(a43=2))
        with pytest.raises(ValueError):
            P.pspi(intensities(a6=-1))

    def test_exhaustive_range_monotone_bruteforce(self):
        seen = set()
        for a4, a6, a7, a9, a10 in itertools.product(range(6), repeat=5):
            for a43 in (0, 1):
                v = intensities(a4, a6, a7, a9, a10, a43)
                score = P.pspi(v)
                assert score == brute_force_pspi(v)
                assert 0 <= score <= 16
                seen.add(score)
                # monotone: bumping any component never lowers the score
                for au in P.PSPI_AUS:
                    hi = 1 if au == 43 else 5
                    if v[au] < hi:
                        bumped = dict(v)
                        bumped[au] += 1
                        assert P.pspi(bumped) >= score
        assert seen == set(range(17))


class TestDvprs:
    @pytest.mark.parametrize(
        "score,category",
        [(0, "mild"), (4, "mild"), (5, "moderate"), (6, "moderate"), (7, "high"), (10, "high")],
    )
    def test_buckets(self, score, category):
        assert P.dvprs_category(score) == category

    def test_partition(self):
        preimages = {cat: [] for cat in P.DVPRS_CATEGORIES}
        for s in range(11):
            preimages[P.dvprs_category(s)].append(s)
        assert preimages["mild"] == [0, 1, 2, 3, 4]
        assert preimages["moderate"] == [5, 6]
        assert preimages["high"] == [7, 8, 9, 10]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            P.dvprs_category(11)
        with pytest.raises(ValueError):
            P.dvprs_category(-1)
        with pytest.raises(ValueError):
            P.dvprs_category(2.5)


def make_frames(n, patient="p1", start=T0, step_minutes=10):
    return [
        FrameRecord(f"f{i:03d}", patient, start + timedelta(minutes=i * step_minutes), f"f{i}.png")
        for i in range(n)
    ]


class TestAssociationTable:
    def test_all_present_is_hundred_percent(self):
        frames = make_frames(4)
        labels = {f.frame_id: {25: True} for f in frames}
        reports = [PainReport("p1", T0 + timedelta(minutes=15), dvprs=2)]
        table = P.association_table(frames, labels, reports, au_ids=(25,))
        cell = table.cell(25, "mild")
        assert cell.denominator == 4 and cell.present_count == 4
        assert cell.percentage == 100.0

    def test_empty_category_is_null(self):
        frames = make_frames(2)
        labels = {f.frame_id: {25: True} for f in frames}
        reports = [PainReport("p1", T0, dvprs=9)]
        table = P.association_table(frames, labels, reports, au_ids=(25,))
        assert table.cell(25, "mild").percentage is None
        assert table.cell(25, "mild").denominator == 0
        assert table.cell(25, "high").percentage == 100.0

    def test_three_of_eight(self):
        frames = make_frames(8, step_minutes=5)
        labels = {f.frame_id: {26: i < 3} for i, f in enumerate(frames)}
        reports = [PainReport("p1", T0 + timedelta(minutes=17), dvprs=6)]
        table = P.association_table(frames, labels, reports, au_ids=(26,))
        cell = table.cell(26, "moderate")
        assert (cell.present_count, cell.denominator) == (3, 8)
        assert cell.percentage == 37.5

    def test_multi_report_counts_once_per_report(self):
        frames = make_frames(2, step_minutes=5)
        labels = {f.frame_id: {25: True} for f in frames}
        reports = [
            PainReport("p1", T0, dvprs=1),
            PainReport("p1", T0 + timedelta(minutes=5), dvprs=2),
        ]
        table = P.association_table(frames, labels, reports, au_ids=(25,))
        assert table.cell(25, "mild").denominator == 4
        deduped = P.association_table(frames, labels, reports, au_ids=(25,), dedupe_per_category=True)
        assert deduped.cell(25, "mild").denominator == 2

    def test_duplicating_frames_preserves_percentages(self):
        frames = make_frames(6, step_minutes=5)
        labels = {f.frame_id: {25: i % 2 == 0} for i, f in enumerate(frames)}
        reports = [PainReport("p1", T0 + timedelta(minutes=10), dvprs=3)]
        base = P.association_table(frames, labels, reports, au_ids=(25,))

        doubled_frames = frames + [
            FrameRecord(f.frame_id + "_dup", f.patient_id, f.captured_at, f.image_path) for f in frames
        ]
        doubled_labels = dict(labels)
        doubled_labels.update({f.frame_id + "_dup": labels[f.frame_id] for f in frames})
        doubled = P.association_table(doubled_frames, doubled_labels, reports, au_ids=(25,))
        assert base.cell(25, "mild").percentage == doubled.cell(25, "mild").percentage
        assert doubled.cell(25, "mild").denominator == 2 * base.cell(25, "mild").denominator

    def test_frame_order_invariance(self):
        frames = make_frames(5, step_minutes=7)
        labels = {f.frame_id: {43: i in (0, 3)} for i, f in enumerate(frames)}
        reports = [PainReport("p1", T0 + timedelta(minutes=14), dvprs=8)]
        a = P.association_table(frames, labels, reports, au_ids=(43,))
        b = P.association_table(list(reversed(frames)), labels, reports, au_ids=(43,))
        assert a == b

    def test_unlabeled_frames_excluded(self):
        frames = make_frames(4, step_minutes=5)
        labels = {frames[0].frame_id: {25: True}, frames[1].frame_id: {25: False}}
        reports = [PainReport("p1", T0 + timedelta(minutes=7), dvprs=0)]
        table = P.association_table(frames, labels, reports, au_ids=(25,))
        assert table.cell(25, "mild").denominator == 2

    def test_csv_and_json_exports(self):
        frames = make_frames(2, step_minutes=5)
        labels = {f.frame_id: {25: True, 26: False} for f in frames}
        reports = [PainReport("p1", T0, dvprs=5)]
        table = P.association_table(frames, labels, reports, au_ids=(25, 26))
        csv_text = table.to_csv()
        assert csv_text.splitlines()[0] == "au_id,category,present_count,denominator,percentage"
        assert "25,moderate,2,2,100.0" in csv_text
        payload = table.to_json_dict()
        assert payload["categories"] == ["mild", "moderate", "high"]
        rows = {(r["au_id"], r["category"]): r for r in payload["rows"]}
        assert rows[(26, "moderate")]["percentage"] == 0.0
        assert rows[(25, "mild")]["percentage"] is None
