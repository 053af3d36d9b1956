"""Scoring of algorithm track output against validated ground truth.

Counting is restricted to target-class lesions. An algorithm track is
credited to at most one true lesion and each true lesion to at most one
track, via maximum bipartite matching on the "track contains an annotation
of this lesion" relation; the leftovers are the missed-lesion and
false-track counts. This keeps unique_reported + missed - false_reported
exactly equal to the number of true lesions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import InputMismatch
from .model import LesionAnnotation, LesionClass, TrackRegistry


@dataclass(frozen=True)
class ReaderCounts:
    """Dual-reader agreement counts over true target lesions.

    reader_1/reader_2: distinct true lesions annotated by each reader.
    aligned: lesions annotated by both readers under identical label sets.
    misaligned: remaining distinct lesions (label conflicts plus lesions
    seen by only one reader).
    """
    reader_1: int
    reader_2: int
    aligned: int
    misaligned: int

    def __post_init__(self):
        for f in ("reader_1", "reader_2", "aligned", "misaligned"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")
        if self.aligned > min(self.reader_1, self.reader_2):
            raise ValueError("aligned cannot exceed either reader's count")


@dataclass(frozen=True)
class PatientScore:
    patient_id: str
    unique_reported: int
    missed: int
    false_reported: int
    reader: ReaderCounts | None = None

    def __post_init__(self):
        for f in ("unique_reported", "missed", "false_reported"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")
        if self.true_count < 0:
            raise ValueError("false_reported exceeds unique_reported + missed")

    @property
    def true_count(self) -> int:
        return self.unique_reported + self.missed - self.false_reported

    @property
    def failed(self) -> bool:
        return self.missed + self.false_reported > 0


@dataclass(frozen=True)
class CohortReport:
    scores: tuple[PatientScore, ...]
    total_unique: int
    total_missed: int
    total_false: int
    total_true: int
    overestimation_rate: float
    failure_fraction: float
    failure_patients: tuple[str, ...]


def _max_bipartite(adjacency: Sequence[Sequence[int]], n_right: int) -> int:
    """Size of a maximum matching; adjacency[u] lists right-side neighbors."""
    match_right = [-1] * n_right

    def try_assign(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or try_assign(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    size = 0
    for u in range(len(adjacency)):
        if try_assign(u, [False] * n_right):
            size += 1
    return size


def _truth_lesion_index(truth: TrackRegistry) -> dict[tuple, int]:
    """Annotation key -> index of the true target lesion that owns it."""
    owner: dict[tuple, int] = {}
    targets = truth.tracks_of_class(LesionClass.TARGET)
    for idx, track in enumerate(targets):
        for obs in track.observations:
            owner[obs.annotation.key] = idx
    return owner


def _alignment_from_groups(
        groups: Mapping[str, Sequence[tuple[int, str]]]) -> ReaderCounts:
    """Agreement counts from per-reader lists of (lesion index, source label)."""
    readers = sorted(groups)
    if len(readers) > 2:
        raise InputMismatch(f"alignment is defined for at most two readers, "
                            f"got {len(readers)}")
    labels: list[dict[int, set[str]]] = []
    for r in readers:
        by_lesion: dict[int, set[str]] = {}
        for lesion, label in groups[r]:
            by_lesion.setdefault(lesion, set()).add(label)
        labels.append(by_lesion)
    while len(labels) < 2:
        labels.append({})
    first, second = labels
    aligned = sum(1 for lesion in set(first) & set(second)
                  if first[lesion] == second[lesion])
    union = len(set(first) | set(second))
    return ReaderCounts(reader_1=len(first), reader_2=len(second),
                        aligned=aligned, misaligned=union - aligned)


def reader_alignment(annotations_by_reader: Mapping[str, Sequence[LesionAnnotation]],
                     truth: TrackRegistry) -> ReaderCounts:
    """Score two readers' target annotations against the validated grouping.

    Only target-class annotations participate. Every target annotation must
    be owned by some true target lesion, else InputMismatch.
    """
    owner = _truth_lesion_index(truth)
    groups: dict[str, list[tuple[int, str]]] = {}
    for reader, anns in annotations_by_reader.items():
        entries = groups.setdefault(reader, [])
        for a in anns:
            if a.lesion_class is not LesionClass.TARGET:
                continue
            if a.key not in owner:
                raise InputMismatch(f"annotation {a.key} absent from truth")
            entries.append((owner[a.key], a.source_label))
    return _alignment_from_groups(groups)


def score_patient(algorithm: TrackRegistry, truth: TrackRegistry) -> PatientScore:
    """Count unique / missed / falsely-opened target tracks for one patient.

    ``truth`` uses the same registry structure; its target tracks define the
    validated grouping of annotations into true lesions. Reader agreement
    counts are filled in when the truth involves at most two readers.
    """
    if algorithm.patient_id != truth.patient_id:
        raise InputMismatch(f"patient mismatch: {algorithm.patient_id!r} vs "
                            f"{truth.patient_id!r}")
    owner = _truth_lesion_index(truth)
    truth_targets = truth.tracks_of_class(LesionClass.TARGET)
    algo_targets = algorithm.tracks_of_class(LesionClass.TARGET)

    adjacency = []
    for track in algo_targets:
        lesions = set()
        for obs in track.observations:
            key = obs.annotation.key
            if key not in owner:
                raise InputMismatch(f"annotation {key} absent from truth")
            lesions.add(owner[key])
        adjacency.append(sorted(lesions))
    matched = _max_bipartite(adjacency, len(truth_targets))

    unique_reported = len(algo_targets)
    missed = len(truth_targets) - matched
    false_reported = unique_reported - matched

    readers = sorted({o.annotation.reader_id for t in truth_targets
                      for o in t.observations})
    reader = None
    if len(readers) <= 2:
        groups = {r: [] for r in readers}
        for idx, track in enumerate(truth_targets):
            for obs in track.observations:
                groups[obs.annotation.reader_id].append(
                    (idx, obs.annotation.source_label))
        reader = _alignment_from_groups(groups)

    return PatientScore(patient_id=algorithm.patient_id,
                        unique_reported=unique_reported, missed=missed,
                        false_reported=false_reported, reader=reader)


def aggregate(scores: Sequence[PatientScore]) -> CohortReport:
    """Cohort totals; overestimation rate is relative to the true count."""
    if not scores:
        raise ValueError("aggregate needs at least one score")
    total_unique = sum(s.unique_reported for s in scores)
    total_missed = sum(s.missed for s in scores)
    total_false = sum(s.false_reported for s in scores)
    total_true = sum(s.true_count for s in scores)
    rate = ((total_unique - total_true) / total_true) if total_true else 0.0
    failures = tuple(s.patient_id for s in scores if s.failed)
    return CohortReport(scores=tuple(scores), total_unique=total_unique,
                        total_missed=total_missed, total_false=total_false,
                        total_true=total_true, overestimation_rate=rate,
                        failure_fraction=len(failures) / len(scores),
                        failure_patients=failures)


def _ref(pid, u, mi, f, r1, r2, align, mxn):
    return PatientScore(patient_id=str(pid), unique_reported=u, missed=mi,
                        false_reported=f,
                        reader=ReaderCounts(r1, r2, align, mxn))


# Bundled 25-patient dual-reader reference cohort; drives the
# `evaluate --table1-fixture` reproduction path.
REFERENCE_COHORT: tuple[PatientScore, ...] = (
    _ref(1, 3, 0, 0, 2, 2, 1, 2),
    _ref(2, 2, 0, 0, 2, 2, 2, 0),
    _ref(3, 6, 0, 0, 5, 3, 1, 5),
    _ref(4, 3, 0, 0, 2, 2, 1, 2),
    _ref(5, 1, 0, 0, 1, 0, 0, 1),
    _ref(6, 1, 0, 0, 1, 0, 0, 1),
    _ref(7, 2, 0, 0, 2, 0, 0, 2),
    _ref(8, 1, 0, 0, 1, 0, 0, 1),
    _ref(9, 2, 0, 0, 2, 2, 2, 0),
    _ref(10, 4, 0, 0, 2, 2, 0, 4),
    _ref(11, 2, 0, 0, 2, 2, 2, 0),
    _ref(12, 6, 0, 1, 5, 2, 2, 3),
    _ref(13, 4, 0, 2, 2, 0, 0, 2),
    _ref(14, 2, 0, 0, 2, 1, 1, 1),
    _ref(15, 1, 0, 0, 1, 1, 1, 0),
    _ref(16, 2, 0, 0, 2, 0, 0, 2),
    _ref(17, 4, 0, 0, 4, 2, 2, 2),
    _ref(18, 2, 0, 0, 2, 1, 1, 1),
    _ref(19, 3, 0, 0, 2, 2, 1, 2),
    _ref(20, 2, 0, 0, 1, 1, 0, 2),
    _ref(21, 1, 0, 0, 1, 0, 0, 1),
    _ref(22, 3, 0, 0, 3, 2, 2, 1),
    _ref(23, 2, 0, 0, 2, 2, 2, 0),
    _ref(24, 3, 0, 0, 1, 3, 1, 2),
    _ref(25, 3, 0, 0, 3, 2, 1, 2),
)


def score_to_dict(score: PatientScore) -> dict:
    entry = {
        "patient_id": score.patient_id,
        "unique_reported": score.unique_reported,
        "missed": score.missed,
        "false_reported": score.false_reported,
        "true_count": score.true_count,
    }
    if score.reader is not None:
        entry["reader"] = {
            "reader_1": score.reader.reader_1,
            "reader_2": score.reader.reader_2,
            "aligned": score.reader.aligned,
            "misaligned": score.reader.misaligned,
        }
    return entry


def report_to_dict(report: CohortReport) -> dict:
    return {
        "patients": [score_to_dict(s) for s in report.scores],
        "total_unique": report.total_unique,
        "total_missed": report.total_missed,
        "total_false": report.total_false,
        "total_true": report.total_true,
        "overestimation_rate": report.overestimation_rate,
        "failure_fraction": report.failure_fraction,
        "failure_patients": list(report.failure_patients),
    }
