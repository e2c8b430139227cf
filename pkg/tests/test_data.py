from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aupipe import data as D

UTC = timezone.utc
T0 = datetime(2022, 3, 1, 0, 0, tzinfo=UTC)


def ts(hours=0, minutes=0, seconds=0):
    return T0 + timedelta(hours=hours, minutes=minutes, seconds=seconds)


def report(patient="p1", at=None, dvprs=5):
    return D.PainReport(patient_id=patient, reported_at=at or ts(10), dvprs=dvprs)


def doc(frame="f1", annotator="a1", labels=None, at=None):
    labels = labels if labels is not None else {25: D.AULabel(True)}
    return D.AnnotationDoc(frame_id=frame, annotator_id=annotator, labels=labels, submitted_at=at or ts(1))


class TestTypes:
    def test_dvprs_range(self):
        with pytest.raises(ValueError):
            report(dvprs=11)
        with pytest.raises(ValueError):
            report(dvprs=-1)

    def test_doc_rejects_unknown_au(self):
        with pytest.raises(ValueError):
            doc(labels={99: D.AULabel(True)})

    def test_doc_rejects_intensity_without_presence(self):
        with pytest.raises(ValueError):
            doc(labels={25: D.AULabel(False, intensity=2)})

    def test_doc_intensity_ranges(self):
        with pytest.raises(ValueError):
            doc(labels={25: D.AULabel(True, intensity=6)})
        with pytest.raises(ValueError):
            doc(labels={43: D.AULabel(True, intensity=2)})  # eyes closed is binary
        doc(labels={43: D.AULabel(True, intensity=1), 4: D.AULabel(True, intensity=5)})

    def test_doc_json_roundtrip(self):
        d = doc(labels={25: D.AULabel(True, intensity=3), 43: D.AULabel(True, intensity=1), 4: D.AULabel(False)})
        again = D.AnnotationDoc.from_json_dict(d.to_json_dict())
        assert again == d

    def test_timestamps(self):
        assert D.parse_timestamp("2022-03-01T00:00:00Z") == T0
        assert D.parse_timestamp("2022-03-01T01:00:00+01:00") == T0
        assert D.parse_timestamp(D.format_timestamp(T0)) == T0


class TestScheduleSegments:
    def test_centered_quarter_hour(self):
        segs = D.schedule_segments([report(at=ts(10))], ts(0), ts(24))
        assert len(segs) == 1
        assert segs[0].start == ts(10) - timedelta(minutes=7, seconds=30)
        assert segs[0].end == ts(10) + timedelta(minutes=7, seconds=30)

    def test_clipped_at_recording_start(self):
        segs = D.schedule_segments([report(at=ts(0, 5))], ts(0), ts(24))
        assert segs[0].start == ts(0)
        assert segs[0].end == ts(0, 5) + timedelta(minutes=7, seconds=30)
        assert segs[0].duration <= timedelta(minutes=15)

    def test_no_reports(self):
        assert D.schedule_segments([], ts(0), ts(24)) == []

    def test_overlap_resolved_disjoint(self):
        segs = D.schedule_segments([report(at=ts(10)), report(at=ts(10, 10))], ts(0), ts(24))
        assert len(segs) == 2
        assert segs[0].end <= segs[1].start
        # combined coverage equals the union of both raw windows
        assert segs[0].start == ts(10) - timedelta(minutes=7, seconds=30)
        assert segs[1].end == ts(10, 10) + timedelta(minutes=7, seconds=30)

    def test_duplicate_report_contributes_once(self):
        segs = D.schedule_segments([report(at=ts(10)), report(at=ts(10))], ts(0), ts(24))
        assert len(segs) == 1

    def test_inverted_span_rejected(self):
        with pytest.raises(ValueError):
            D.schedule_segments([], ts(2), ts(1))

    @settings(max_examples=200, deadline=None)
    @given(
        offsets=st.lists(st.integers(min_value=0, max_value=24 * 60), min_size=0, max_size=8),
        span_start=st.integers(min_value=0, max_value=6 * 60),
        span_hours=st.integers(min_value=1, max_value=18),
    )
    def test_properties(self, offsets, span_start, span_hours):
        reports = [report(at=ts(minutes=m)) for m in offsets]
        start, end = ts(minutes=span_start), ts(minutes=span_start) + timedelta(hours=span_hours)
        segs = D.schedule_segments(reports, start, end)
        for seg in segs:
            assert seg.duration <= timedelta(minutes=15)
            assert seg.start >= start and seg.end <= end
            # segment intersects its report's +-60 min window
            assert seg.start <= seg.reported_at + timedelta(minutes=60)
            assert seg.end >= seg.reported_at - timedelta(minutes=60)
        for a, b in zip(segs, segs[1:]):
            assert a.end <= b.start


class TestFramesNearReport:
    def frames(self):
        return [
            D.FrameRecord("f60", "p1", ts(9, 0), "f60.png"),  # exactly 60 min before
            D.FrameRecord("f61", "p1", ts(8, 59), "f61.png"),  # 61 min before
            D.FrameRecord("fmid", "p1", ts(10, 1), "fmid.png"),
            D.FrameRecord("fother", "p2", ts(10), "fother.png"),
        ]

    def test_closed_interval_boundary(self):
        hits = D.frames_near_report(self.frames(), report(at=ts(10)))
        ids = [f.frame_id for f in hits]
        assert "f60" in ids and "f61" not in ids

    def test_other_patient_excluded(self):
        ids = [f.frame_id for f in D.frames_near_report(self.frames(), report(at=ts(10)))]
        assert "fother" not in ids

    def test_time_ordered(self):
        hits = D.frames_near_report(self.frames(), report(at=ts(10)))
        times = [f.captured_at for f in hits]
        assert times == sorted(times)

    def test_empty(self):
        assert D.frames_near_report([], report()) == []


class TestSplitByPatient:
    def test_seventy_thirty(self):
        split = D.split_by_patient([f"p{i}" for i in range(10)], ratio=0.7, seed=1)
        assert len(split.train) == 7 and len(split.test) == 3

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(20)]
        assert D.split_by_patient(ids, seed=42) == D.split_by_patient(ids, seed=42)

    def test_cohort_49(self):
        split = D.split_by_patient([f"p{i:02d}" for i in range(49)], ratio=0.7, seed=0)
        assert len(split.train) == 34 and len(split.test) == 15
        assert not set(split.train) & set(split.test)

    def test_too_few(self):
        with pytest.raises(ValueError):
            D.split_by_patient(["only"])

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(min_value=2, max_value=80), seed=st.integers(0, 2**32 - 1))
    def test_partition_property(self, n, seed):
        ids = [f"p{i}" for i in range(n)]
        split = D.split_by_patient(ids, seed=seed)
        assert sorted(split.train + split.test) == sorted(ids)
        assert not set(split.train) & set(split.test)


class TestConsolidation:
    def test_majority(self):
        docs = [
            doc(annotator="a1", labels={25: D.AULabel(True)}),
            doc(annotator="a2", labels={25: D.AULabel(True)}),
            doc(annotator="a3", labels={25: D.AULabel(False)}),
        ]
        assert D.consolidate_labels(docs)[25] is True

    def test_tie_is_absent(self):
        docs = [
            doc(annotator=f"a{i}", labels={25: D.AULabel(i < 2)})
            for i in range(4)
        ]
        assert D.consolidate_labels(docs)[25] is False

    def test_single_annotator_verbatim(self):
        d = doc(labels={25: D.AULabel(True), 26: D.AULabel(False)})
        out = D.consolidate_labels([d])
        assert out[25] is True and out[26] is False and out[43] is False

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            D.consolidate_labels([])


class TestStore:
    def test_upsert_created_updated_unchanged(self, tmp_path):
        store = D.AnnotationStore(tmp_path / "journal.jsonl")
        d = doc()
        assert store.upsert(d) == "created"
        assert store.upsert(d) == "unchanged"
        revised = doc(labels={25: D.AULabel(False)})
        assert store.upsert(revised) == "updated"
        assert len(store) == 1

    def test_duplicate_upsert_leaves_journal_identical(self, tmp_path):
        path = tmp_path / "journal.jsonl"
        store = D.AnnotationStore(path)
        store.upsert(doc())
        before = path.read_bytes()
        store.upsert(doc())
        assert path.read_bytes() == before

    def test_survives_restart_bit_exact(self, tmp_path):
        path = tmp_path / "journal.jsonl"
        store = D.AnnotationStore(path)
        docs = [
            doc(frame="f1", annotator="a1", labels={25: D.AULabel(True, 3)}),
            doc(frame="f1", annotator="a2", labels={26: D.AULabel(True)}),
            doc(frame="f2", annotator="a1", labels={43: D.AULabel(True, 1)}),
        ]
        for d in docs:
            store.upsert(d)
        reopened = D.AnnotationStore(path)
        assert reopened.all_docs() == store.all_docs()

    def test_compaction_keeps_state(self, tmp_path):
        path = tmp_path / "journal.jsonl"
        store = D.AnnotationStore(path)
        store.upsert(doc())
        store.upsert(doc(labels={26: D.AULabel(True)}))
        store.upsert(doc(labels={27: D.AULabel(True)}))
        assert len(path.read_text().splitlines()) == 3
        store.compact()
        assert len(path.read_text().splitlines()) == 1
        assert D.AnnotationStore(path).all_docs() == store.all_docs()

    def test_counts(self, tmp_path):
        store = D.AnnotationStore()
        store.upsert(doc(frame="f1", annotator="a1"))
        store.upsert(doc(frame="f2", annotator="a1"))
        store.upsert(doc(frame="f1", annotator="a2"))
        assert store.counts_by_annotator() == {"a1": 2, "a2": 1}
        assert store.annotated_frame_ids() == {"f1", "f2"}
        assert store.frames_annotated_by("a2") == {"f1"}


class TestQueryLabels:
    def test_round_trip_and_mask(self):
        store = D.AnnotationStore()
        store.upsert(doc(frame="f1", labels={25: D.AULabel(True), 26: D.AULabel(False)}))
        labels, mask = D.query_labels(store, ["f1", "f2"], (25, 26, 43), {"f1", "f2"})
        np.testing.assert_array_equal(labels[0], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(mask, [True, False])
        np.testing.assert_array_equal(labels[1], [0.0, 0.0, 0.0])

    def test_unknown_frame(self):
        store = D.AnnotationStore()
        with pytest.raises(KeyError):
            D.query_labels(store, ["ghost"], (25,), {"f1"})


class TestFileFormats:
    def test_manifest_roundtrip(self, tmp_path):
        frames = [
            D.FrameRecord("f1", "p1", ts(1), "imgs/f1.png"),
            D.FrameRecord("f2", "p2", ts(2), "imgs/f2.png"),
        ]
        path = tmp_path / "manifest.csv"
        D.save_manifest(path, frames)
        assert D.load_manifest(path) == frames

    def test_manifest_duplicate_frame_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text(
            "frame_id,patient_id,captured_at,image_path\n"
            "f1,p1,2022-03-01T00:00:00+00:00,a.png\n"
            "f1,p1,2022-03-01T00:01:00+00:00,b.png\n"
        )
        with pytest.raises(ValueError):
            D.load_manifest(path)

    def test_reports_roundtrip(self, tmp_path):
        reports = [report(at=ts(3), dvprs=7), report(patient="p9", at=ts(4), dvprs=0)]
        path = tmp_path / "reports.csv"
        D.save_pain_reports(path, reports)
        assert D.load_pain_reports(path) == reports

    def test_patient_leakage_guard(self):
        # frame-level leakage check across a split
        frames = [D.FrameRecord(f"f{i}", f"p{i % 7}", ts(i), "x.png") for i in range(50)]
        split = D.split_by_patient({f.patient_id for f in frames}, seed=3)
        train_patients = {f.patient_id for f in frames if f.patient_id in set(split.train)}
        test_patients = {f.patient_id for f in frames if f.patient_id in set(split.test)}
        assert not train_patients & test_patients
