"""End-to-end per-patient orchestration of matching and registration.

Stage order per timepoint: cross-reader matching within each series, then
cross-series merging after rigid registration onto the timepoint's reference
series (lexicographically first series_id). Timepoints are then merged
chronologically into a cumulative registry whose frame is the first
timepoint's reference series; the first timepoint is Screening when present.

Every matching decision and every registration outcome is appended to an
audit list of plain dicts, serializable as JSONL.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InputMismatch, LesionTrackError, ParseError
from .matching import (
    Correspondence,
    IncomingTrack,
    MatchConfig,
    MatchDecision,
    assign_names,
    match_lesions,
    merge_into_registry,
)
from .model import (
    LesionAnnotation,
    LesionClass,
    LesionTrack,
    Observation,
    Point3,
    TrackRegistry,
    Volume,
    parse_canonical_name,
)
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    RigidTransform,
    apply_transform,
    invert_transform,
    register,
)
from .volume_io import AnnotationTable

log = logging.getLogger(__name__)

FLAG_UNREGISTERED = "unregistered"
FLAG_IDENTITY_FALLBACK = "identity-fallback"


@dataclass(frozen=True)
class PipelineConfig:
    match: MatchConfig = MatchConfig()
    registration: RegistrationConfig = RegistrationConfig()


@dataclass(frozen=True)
class SeriesData:
    series_id: str
    volume: Volume | None
    annotations_by_reader: dict[str, tuple[LesionAnnotation, ...]]


@dataclass(frozen=True)
class TimepointData:
    timepoint_id: str
    series: tuple[SeriesData, ...]

    @property
    def reference_series(self) -> SeriesData | None:
        return self.series[0] if self.series else None


def _natural_key(text: str):
    parts = re.split(r"(\d+)", text)
    return tuple(int(p) if p.isdigit() else p.lower() for p in parts)


def timepoint_sort_key(timepoint_id: str):
    """Screening (case-insensitive) first, then natural ascending order."""
    is_screening = timepoint_id.strip().lower() == "screening"
    return (0 if is_screening else 1, _natural_key(timepoint_id))


@dataclass(frozen=True)
class PatientDataset:
    patient_id: str
    timepoints: tuple[TimepointData, ...]

    def __post_init__(self):
        for tp in self.timepoints:
            series_ids = [s.series_id for s in tp.series]
            if series_ids != sorted(series_ids):
                raise ValueError("series must be sorted by series_id")
            for s in tp.series:
                for reader, anns in s.annotations_by_reader.items():
                    for a in anns:
                        if a.series_id != s.series_id or a.timepoint_id != tp.timepoint_id \
                                or a.reader_id != reader:
                            raise InputMismatch(
                                f"annotation {a.key} filed under wrong slot")

    @staticmethod
    def from_annotations(table: AnnotationTable, patient_id: str,
                         volumes: Mapping[tuple[str, str], Volume] | None = None,
                         timepoint_order: Sequence[str] | None = None) -> "PatientDataset":
        """Group a patient's annotations into the timepoint/series/reader tree.

        ``volumes`` maps (timepoint_id, series_id) to loaded volumes; series
        that appear only there (volume without annotations) still join the
        dataset so they can serve as reference frames.
        """
        volumes = dict(volumes or {})
        anns = table.for_patient(patient_id)
        tree: dict[str, dict[str, dict[str, list[LesionAnnotation]]]] = {}
        for a in anns:
            tree.setdefault(a.timepoint_id, {}).setdefault(a.series_id, {}) \
                .setdefault(a.reader_id, []).append(a)
        for (tp_id, series_id) in volumes:
            tree.setdefault(tp_id, {}).setdefault(series_id, {})
        if timepoint_order is not None:
            missing = set(tree) - set(timepoint_order)
            if missing:
                raise InputMismatch(f"timepoint_order omits {sorted(missing)}")
            ordered = [t for t in timepoint_order if t in tree]
        else:
            ordered = sorted(tree, key=timepoint_sort_key)
        timepoints = []
        for tp_id in ordered:
            series = []
            for series_id in sorted(tree[tp_id]):
                by_reader = {r: tuple(v) for r, v in
                             sorted(tree[tp_id][series_id].items())}
                series.append(SeriesData(
                    series_id=series_id,
                    volume=volumes.get((tp_id, series_id)),
                    annotations_by_reader=by_reader))
            timepoints.append(TimepointData(timepoint_id=tp_id, series=tuple(series)))
        return PatientDataset(patient_id=patient_id, timepoints=tuple(timepoints))

    @property
    def annotation_count(self) -> int:
        return sum(len(anns) for tp in self.timepoints for s in tp.series
                   for anns in s.annotations_by_reader.values())


def _log_decisions(audit: list | None, decisions: Sequence[MatchDecision],
                   stage: str, patient_id: str, **context) -> None:
    if audit is None:
        return
    for d in decisions:
        audit.append({
            "event": "match_decision", "stage": stage, "patient": patient_id,
            "lesion_class": d.lesion_class.value,
            "a": list(d.key_a), "b": list(d.key_b),
            "distance_mm": d.distance_mm, "threshold_mm": d.threshold_mm,
            "accepted": d.accepted, **context,
        })


def match_within_series(annotations_by_reader: Mapping[str, Sequence[LesionAnnotation]],
                        cfg: PipelineConfig, registry: TrackRegistry,
                        audit: list | None = None) -> TrackRegistry:
    """Resolve one series' readers into tracks, in the series' own frame.

    The first reader's lesions open tracks; the second reader is matched
    against the first via distance-gated assignment. Additional readers, if
    ever present, are chained one at a time against the accumulated tracks.
    """
    readers = sorted(annotations_by_reader)
    if not readers:
        return registry
    series_ids = {a.series_id for r in readers for a in annotations_by_reader[r]}
    if len(series_ids) > 1:
        raise InputMismatch(f"annotations span multiple series {sorted(series_ids)}")
    context = {"series": next(iter(series_ids)) if series_ids else None,
               "timepoint": next((a.timepoint_id for r in readers
                                  for a in annotations_by_reader[r]), None)}
    first = tuple(annotations_by_reader[readers[0]])
    registry = assign_names(
        Correspondence(pairs=(), unmatched_a=first, unmatched_b=()), registry)
    if len(readers) >= 2:
        corr = match_lesions(first, tuple(annotations_by_reader[readers[1]]), cfg.match)
        _log_decisions(audit, corr.decisions, "within_series",
                       registry.patient_id, **context)
        registry = assign_names(corr, registry)
    for extra in readers[2:]:
        items = [IncomingTrack(lesion_class=a.lesion_class, point=a.centroid,
                               observations=(Observation(annotation=a,
                                                         mapped_centroid=a.centroid),))
                 for a in annotations_by_reader[extra]]
        registry, decisions = merge_into_registry(registry, items, cfg.match)
        _log_decisions(audit, decisions, "within_series",
                       registry.patient_id, **context)
    return registry


def _remap_track(track: LesionTrack, transform: RigidTransform | None) -> IncomingTrack:
    """Express a track's representative point and observations in a new frame.

    ``transform`` maps new-frame points into the track's current frame (the
    registration convention); None means the frames are assumed identical.
    """
    if transform is None:
        return IncomingTrack(lesion_class=track.lesion_class,
                             point=track.reference_centroid,
                             observations=track.observations)
    inverse = invert_transform(transform)
    observations = tuple(
        Observation(annotation=o.annotation,
                    mapped_centroid=apply_transform(inverse, o.mapped_centroid))
        for o in track.observations)
    return IncomingTrack(lesion_class=track.lesion_class,
                         point=apply_transform(inverse, track.reference_centroid),
                         observations=observations)


def _register_step(fixed: Volume | None, moving: Volume | None,
                   cfg: PipelineConfig, audit: list | None, stage: str,
                   patient_id: str, **context):
    """Run one registration; returns (transform or None, flag or None).

    None volume on either side falls back to the identity mapping; a raised
    registration error makes the caller enter the moving side's tracks as
    fresh tracks instead of matching them.
    """
    if fixed is None or moving is None:
        if audit is not None:
            audit.append({"event": "registration_fallback", "stage": stage,
                          "patient": patient_id, "reason": "missing volume",
                          **context})
        return None, FLAG_IDENTITY_FALLBACK
    try:
        result = register(fixed, moving, cfg.registration)
    except LesionTrackError as exc:
        if audit is not None:
            audit.append({"event": "registration_fallback", "stage": stage,
                          "patient": patient_id,
                          "reason": f"registration failed: {type(exc).__name__}: {exc}",
                          **context})
        return None, FLAG_UNREGISTERED
    if audit is not None:
        audit.append({
            "event": "registration", "stage": stage, "patient": patient_id,
            "converged": result.converged,
            "final_metric": result.final_metric,
            "iterations_per_level": list(result.iterations_per_level),
            "angles_rad": list(result.transform.angles),
            "translation_mm": list(result.transform.translation),
            "center_mm": [result.transform.center.x,
                          result.transform.center.y,
                          result.transform.center.z],
            **context,
        })
    return result.transform, None


class _FlagBook:
    """Track-name -> set of quality flags accumulated during a run."""

    def __init__(self):
        self.flags: dict[str, set[str]] = {}

    def add(self, names, flag: str) -> None:
        for name in names:
            self.flags.setdefault(name, set()).add(flag)

    def rename_merge(self, absorbed: Mapping[str, str]) -> None:
        for src, dst in absorbed.items():
            if src in self.flags:
                self.flags.setdefault(dst, set()).update(self.flags.pop(src))

    def as_dict(self) -> dict[str, tuple[str, ...]]:
        return {k: tuple(sorted(v)) for k, v in self.flags.items()}


def _merge_mapped_tracks(registry: TrackRegistry, source: TrackRegistry,
                         transform: RigidTransform | None, flag: str | None,
                         force_new: bool, cfg: PipelineConfig,
                         audit: list | None, stage: str,
                         flagbook: _FlagBook | None, **context) -> TrackRegistry:
    """Map source-registry tracks through a transform and merge or append them."""
    items = [_remap_track(t, transform) for t in source.tracks]
    if force_new:
        # Entered without matching: each to its own fresh track.
        registry, decisions = merge_into_registry(registry, items, cfg.match,
                                                  force_new=True)
    else:
        registry, decisions = merge_into_registry(registry, items, cfg.match)
    _log_decisions(audit, decisions, stage, registry.patient_id, **context)
    if flag is not None and flagbook is not None:
        touched = set()
        for item in items:
            for obs in item.observations:
                track = registry.track_of_annotation(obs.annotation)
                if track is not None:
                    touched.add(track.name)
        flagbook.add(touched, flag)
    return registry


def match_across_series(timepoint: TimepointData, cfg: PipelineConfig,
                        registry: TrackRegistry, audit: list | None = None,
                        flagbook: _FlagBook | None = None) -> TrackRegistry:
    """Merge the timepoint's non-reference series into the given registry.

    Precondition: the reference (first) series is already resolved into
    ``registry``. Each remaining series is resolved in its own frame,
    registered to the reference series, mapped, and merged.
    """
    series_list = timepoint.series
    if len(series_list) <= 1:
        return registry
    reference = series_list[0]
    for s in series_list[1:]:
        sub = match_within_series(s.annotations_by_reader, cfg,
                                  TrackRegistry(patient_id=registry.patient_id),
                                  audit)
        if not sub.tracks:
            continue
        transform, flag = _register_step(
            reference.volume, s.volume, cfg, audit, "across_series",
            registry.patient_id, timepoint=timepoint.timepoint_id,
            fixed_series=reference.series_id, moving_series=s.series_id)
        registry = _merge_mapped_tracks(
            registry, sub, transform, flag,
            force_new=(flag == FLAG_UNREGISTERED), cfg=cfg, audit=audit,
            stage="across_series", flagbook=flagbook,
            timepoint=timepoint.timepoint_id, moving_series=s.series_id)
    return registry


def _resolve_timepoint(timepoint: TimepointData, cfg: PipelineConfig,
                       patient_id: str, audit: list | None,
                       flagbook: _FlagBook | None) -> TrackRegistry:
    registry = TrackRegistry(patient_id=patient_id)
    reference = timepoint.reference_series
    if reference is None:
        return registry
    registry = match_within_series(reference.annotations_by_reader, cfg,
                                   registry, audit)
    return match_across_series(timepoint, cfg, registry, audit, flagbook)


def match_across_timepoints(dataset: PatientDataset, cfg: PipelineConfig,
                            audit: list | None = None,
                            flagbook: _FlagBook | None = None) -> TrackRegistry:
    """Chronologically merge per-timepoint registries into one registry.

    The first timepoint's reference-series volume is the global fixed image;
    later timepoints register their reference volume to it and map their
    tracks into that frame before distance-gated merging against the
    cumulative registry (so lesions may skip timepoints and still match).
    """
    cumulative = TrackRegistry(patient_id=dataset.patient_id)
    reference_volume: Volume | None = None
    for index, tp in enumerate(dataset.timepoints):
        tp_registry = _resolve_timepoint(tp, cfg, dataset.patient_id, audit, flagbook)
        tp_reference_volume = (tp.reference_series.volume
                               if tp.reference_series else None)
        if index == 0:
            cumulative = tp_registry
            reference_volume = tp_reference_volume
            if reference_volume is None and audit is not None:
                audit.append({"event": "warning", "stage": "across_timepoints",
                              "patient": dataset.patient_id,
                              "message": "first timepoint has no reference volume; "
                                         "the first volumed timepoint becomes the "
                                         "registration reference",
                              "timepoint": tp.timepoint_id})
            continue
        if not tp_registry.tracks:
            continue
        if reference_volume is None and tp_reference_volume is not None:
            # Late-arriving first volume: adopt it, merge this timepoint as-is.
            log.warning("patient %s: adopting %s as registration reference",
                        dataset.patient_id, tp.timepoint_id)
            if audit is not None:
                audit.append({"event": "registration_fallback",
                              "stage": "across_timepoints",
                              "patient": dataset.patient_id,
                              "reason": "missing reference volume",
                              "timepoint": tp.timepoint_id})
            cumulative = _merge_mapped_tracks(
                cumulative, tp_registry, None, FLAG_IDENTITY_FALLBACK,
                force_new=False, cfg=cfg, audit=audit,
                stage="across_timepoints", flagbook=flagbook,
                timepoint=tp.timepoint_id)
            reference_volume = tp_reference_volume
            continue
        transform, flag = _register_step(
            reference_volume, tp_reference_volume, cfg, audit,
            "across_timepoints", dataset.patient_id, timepoint=tp.timepoint_id)
        cumulative = _merge_mapped_tracks(
            cumulative, tp_registry, transform, flag,
            force_new=(flag == FLAG_UNREGISTERED), cfg=cfg, audit=audit,
            stage="across_timepoints", flagbook=flagbook,
            timepoint=tp.timepoint_id)
    return cumulative


def run_patient(dataset: PatientDataset,
                cfg: PipelineConfig = PipelineConfig()) -> tuple[TrackRegistry, list, dict]:
    """Full pipeline for one patient.

    Returns (registry, audit entries, flags) where flags maps track names to
    quality annotations such as identity-fallback merging.
    """
    audit: list = []
    flagbook = _FlagBook()
    registry = match_across_timepoints(dataset, cfg, audit, flagbook)
    return registry, audit, flagbook.as_dict()


def _triple(p: Point3) -> list[float]:
    return [p.x, p.y, p.z]


def tracks_to_dict(registry: TrackRegistry,
                   flags: Mapping[str, Sequence[str]] | None = None) -> dict:
    """Serializable view of a registry, deterministically ordered."""
    flags = flags or {}

    def track_key(t: LesionTrack):
        cls, idx = parse_canonical_name(t.name)
        return (cls.value, idx)

    tracks = []
    for t in sorted(registry.tracks, key=track_key):
        entry = {
            "name": t.name,
            "class": t.lesion_class.value,
            "reference_centroid_mm": _triple(t.reference_centroid),
            "observations": [
                {
                    "reader": o.annotation.reader_id,
                    "series": o.annotation.series_id,
                    "timepoint": o.annotation.timepoint_id,
                    "source_label": o.annotation.source_label,
                    "centroid_mm": _triple(o.annotation.centroid),
                    "mapped_centroid_mm": _triple(o.mapped_centroid),
                }
                for o in t.observations
            ],
        }
        if flags.get(t.name):
            entry["flags"] = sorted(flags[t.name])
        tracks.append(entry)
    return {"patient_id": registry.patient_id, "tracks": tracks}


def save_tracks_json(registry: TrackRegistry, path,
                     flags: Mapping[str, Sequence[str]] | None = None) -> None:
    payload = tracks_to_dict(registry, flags)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def tracks_from_dict(payload: dict) -> TrackRegistry:
    """Rebuild a registry from the tracks JSON structure."""
    try:
        patient_id = payload["patient_id"]
        track_dicts = payload["tracks"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"tracks JSON missing field: {exc}") from exc
    tracks = []
    next_index = {LesionClass.TARGET: 1, LesionClass.NON_TARGET: 1}
    for td in track_dicts:
        try:
            cls = LesionClass.parse(td["class"])
            observations = tuple(
                Observation(
                    annotation=LesionAnnotation(
                        centroid=Point3(*od["centroid_mm"]),
                        lesion_class=cls,
                        reader_id=od["reader"],
                        series_id=od["series"],
                        timepoint_id=od["timepoint"],
                        source_label=od["source_label"]),
                    mapped_centroid=Point3(*od["mapped_centroid_mm"]))
                for od in td["observations"])
            track = LesionTrack(
                name=td["name"], lesion_class=cls, observations=observations,
                reference_centroid=Point3(*td["reference_centroid_mm"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad track entry: {exc}") from exc
        tracks.append(track)
        _, idx = parse_canonical_name(track.name)
        next_index[cls] = max(next_index[cls], idx + 1)
    return TrackRegistry(patient_id=patient_id, tracks=tuple(tracks),
                         next_target_index=next_index[LesionClass.TARGET],
                         next_nontarget_index=next_index[LesionClass.NON_TARGET])


def load_tracks_json(path) -> TrackRegistry:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return tracks_from_dict(payload)


def save_audit_jsonl(audit: Sequence[dict], path) -> None:
    lines = [json.dumps(entry, sort_keys=True) for entry in audit]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")
