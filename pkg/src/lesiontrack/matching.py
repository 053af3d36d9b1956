"""Distance-gated optimal assignment of lesion annotations.

Correspondence between two annotation sets is found per lesion class: build
the pairwise centroid-distance matrix, solve the rectangular assignment
problem for minimum total distance, then dissolve any assigned pair whose
distance exceeds a class-specific gate. Dissolved members rejoin the
unmatched pools, so implausibly distant pairings never survive just because
the solver had spare capacity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidCost
from .model import (
    LesionAnnotation,
    LesionClass,
    LesionTrack,
    Observation,
    Point3,
    TrackRegistry,
    canonical_name,
)


@dataclass(frozen=True)
class MatchConfig:
    """Gate distances (mm) above which an assigned pair is dissolved."""

    target_threshold_mm: float = 40.0
    nontarget_threshold_mm: float = 50.0

    def __post_init__(self):
        if not (self.target_threshold_mm > 0 and np.isfinite(self.target_threshold_mm)):
            raise ValueError("target_threshold_mm must be positive and finite")
        if not (self.nontarget_threshold_mm > 0 and np.isfinite(self.nontarget_threshold_mm)):
            raise ValueError("nontarget_threshold_mm must be positive and finite")

    def threshold_for(self, lesion_class: LesionClass) -> float:
        if lesion_class is LesionClass.TARGET:
            return self.target_threshold_mm
        return self.nontarget_threshold_mm


@dataclass(frozen=True)
class CostMatrix:
    """Non-negative finite cost matrix; rows are side a, columns side b."""

    costs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.costs, dtype=float)
        if arr.ndim != 2:
            raise InvalidCost(f"cost matrix must be 2-d, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise InvalidCost("cost matrix contains NaN or infinite entries")
        if arr.size and arr.min() < 0:
            raise InvalidCost("cost matrix contains negative entries")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "costs", arr)

    @staticmethod
    def from_points(points_a: Sequence[Point3], points_b: Sequence[Point3]) -> "CostMatrix":
        """Pairwise Euclidean distances in mm."""
        a = np.array([p.as_array() for p in points_a], dtype=float).reshape(len(points_a), 3)
        b = np.array([p.as_array() for p in points_b], dtype=float).reshape(len(points_b), 3)
        diff = a[:, None, :] - b[None, :, :]
        return CostMatrix(np.sqrt((diff ** 2).sum(axis=2)))

    @property
    def n_rows(self) -> int:
        return self.costs.shape[0]

    @property
    def n_cols(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True)
class Assignment:
    """A partial one-to-one assignment between rows and columns."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_rows: tuple[int, ...]
    unmatched_cols: tuple[int, ...]

    def validate_against(self, n_rows: int, n_cols: int) -> None:
        rows = [r for r, _ in self.pairs] + list(self.unmatched_rows)
        cols = [c for _, c in self.pairs] + list(self.unmatched_cols)
        if sorted(rows) != list(range(n_rows)) or sorted(cols) != list(range(n_cols)):
            raise ValueError("assignment does not partition rows and columns")


def solve_assignment(costs: CostMatrix) -> Assignment:
    """Minimum-total-cost assignment of min(n_rows, n_cols) pairs.

    Rectangular matrices are handled directly; the surplus side's leftover
    indices come back in unmatched_rows / unmatched_cols.
    """
    arr = costs.costs
    if arr.size and not np.all(np.isfinite(arr)):
        raise InvalidCost("cost matrix contains NaN or infinite entries")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        return Assignment(
            pairs=(),
            unmatched_rows=tuple(range(arr.shape[0])),
            unmatched_cols=tuple(range(arr.shape[1])),
        )
    row_ind, col_ind = linear_sum_assignment(arr)
    order = np.argsort(row_ind)
    pairs = tuple((int(row_ind[i]), int(col_ind[i])) for i in order)
    matched_rows = {r for r, _ in pairs}
    matched_cols = {c for _, c in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_rows=tuple(r for r in range(arr.shape[0]) if r not in matched_rows),
        unmatched_cols=tuple(c for c in range(arr.shape[1]) if c not in matched_cols),
    )


def threshold_filter(assignment: Assignment, costs: CostMatrix,
                     threshold_mm: float) -> Assignment:
    """Dissolve assigned pairs strictly above the gate distance.

    A pair at exactly the threshold survives. Dissolved rows and columns are
    appended to the unmatched pools in ascending index order.
    """
    # +inf is a legal gate (keep everything); NaN and non-positive are not
    if not threshold_mm > 0 or np.isnan(threshold_mm):
        raise ValueError("threshold_mm must be positive")
    kept = []
    dropped_rows = []
    dropped_cols = []
    for r, c in assignment.pairs:
        if costs.costs[r, c] > threshold_mm:
            dropped_rows.append(r)
            dropped_cols.append(c)
        else:
            kept.append((r, c))
    return Assignment(
        pairs=tuple(kept),
        unmatched_rows=tuple(sorted(assignment.unmatched_rows + tuple(dropped_rows))),
        unmatched_cols=tuple(sorted(assignment.unmatched_cols + tuple(dropped_cols))),
    )


@dataclass(frozen=True)
class MatchDecision:
    """One solver-proposed pairing and its gate verdict, for audit trails."""

    lesion_class: LesionClass
    key_a: tuple
    key_b: tuple
    distance_mm: float
    threshold_mm: float
    accepted: bool


@dataclass(frozen=True)
class MatchedPair:
    item_a: LesionAnnotation
    item_b: LesionAnnotation
    distance_mm: float


@dataclass(frozen=True)
class Correspondence:
    pairs: tuple[MatchedPair, ...]
    unmatched_a: tuple[LesionAnnotation, ...]
    unmatched_b: tuple[LesionAnnotation, ...]
    decisions: tuple[MatchDecision, ...] = ()


def _match_points(points_a: Sequence[Point3], points_b: Sequence[Point3],
                  threshold_mm: float):
    """Index-level gated assignment; returns (pairs+distances, unmatched a, b, raw)."""
    costs = CostMatrix.from_points(points_a, points_b)
    raw = solve_assignment(costs)
    gated = threshold_filter(raw, costs, threshold_mm)
    pairs = tuple((r, c, float(costs.costs[r, c])) for r, c in gated.pairs)
    raw_pairs = tuple((r, c, float(costs.costs[r, c])) for r, c in raw.pairs)
    return pairs, gated.unmatched_rows, gated.unmatched_cols, raw_pairs


def match_lesions(set_a: Sequence[LesionAnnotation], set_b: Sequence[LesionAnnotation],
                  cfg: MatchConfig) -> Correspondence:
    """Match two annotation sets class by class.

    Target and non-target lesions are matched independently and never pair
    with each other. Output order is deterministic: targets before
    non-targets, pairs in row order within a class.
    """
    pairs: list[MatchedPair] = []
    unmatched_a: list[LesionAnnotation] = []
    unmatched_b: list[LesionAnnotation] = []
    decisions: list[MatchDecision] = []
    for lesion_class in (LesionClass.TARGET, LesionClass.NON_TARGET):
        sub_a = [x for x in set_a if x.lesion_class is lesion_class]
        sub_b = [x for x in set_b if x.lesion_class is lesion_class]
        threshold = cfg.threshold_for(lesion_class)
        kept, rest_a, rest_b, raw_pairs = _match_points(
            [x.centroid for x in sub_a], [x.centroid for x in sub_b], threshold)
        for r, c, d in raw_pairs:
            decisions.append(MatchDecision(
                lesion_class=lesion_class, key_a=sub_a[r].key, key_b=sub_b[c].key,
                distance_mm=d, threshold_mm=threshold, accepted=d <= threshold))
        pairs.extend(MatchedPair(sub_a[r], sub_b[c], d) for r, c, d in kept)
        unmatched_a.extend(sub_a[i] for i in rest_a)
        unmatched_b.extend(sub_b[i] for i in rest_b)
    return Correspondence(tuple(pairs), tuple(unmatched_a), tuple(unmatched_b),
                          tuple(decisions))


def _registry_as_dict(registry: TrackRegistry):
    return {t.name: list(t.observations) for t in registry.tracks}, \
           {t.name: t.lesion_class for t in registry.tracks}


def _rebuild_registry(registry: TrackRegistry, obs_by_name, class_by_name,
                      next_indices) -> TrackRegistry:
    existing_order = [t.name for t in registry.tracks]
    new_names = [n for n in obs_by_name if n not in set(existing_order)]
    tracks = tuple(
        LesionTrack.build(name, class_by_name[name], obs_by_name[name])
        for name in existing_order + new_names)
    return TrackRegistry(
        patient_id=registry.patient_id,
        tracks=tracks,
        next_target_index=next_indices[LesionClass.TARGET],
        next_nontarget_index=next_indices[LesionClass.NON_TARGET],
    )


def assign_names(corr: Correspondence, registry: TrackRegistry) -> TrackRegistry:
    """Fold a same-frame correspondence into the track registry.

    Side-a annotations must either already belong to a track or open one;
    matched side-b annotations join their partner's track, unmatched side-b
    annotations open new tracks. All newly opened tracks are numbered in one
    batch, ordered by (timepoint, series, reader, source_label), with
    independent counters per class.
    """
    claimed = set()
    for p in corr.pairs:
        if p.item_b.key in claimed:
            raise ValueError(f"side-b annotation {p.item_b.key} claimed twice")
        claimed.add(p.item_b.key)

    obs_by_name, class_by_name = _registry_as_dict(registry)
    next_indices = {
        LesionClass.TARGET: registry.next_target_index,
        LesionClass.NON_TARGET: registry.next_nontarget_index,
    }

    openers: list[LesionAnnotation] = []
    seen_openers = set()
    for ann in [p.item_a for p in corr.pairs] + list(corr.unmatched_a):
        if registry.track_of_annotation(ann) is None and ann.key not in seen_openers:
            openers.append(ann)
            seen_openers.add(ann.key)
    openers.extend(corr.unmatched_b)
    openers.sort(key=lambda a: a.order_key)

    opened_name: dict[tuple, str] = {}
    for ann in openers:
        idx = next_indices[ann.lesion_class]
        next_indices[ann.lesion_class] = idx + 1
        name = canonical_name(ann.lesion_class, idx)
        opened_name[ann.key] = name
        obs_by_name[name] = [Observation(annotation=ann, mapped_centroid=ann.centroid)]
        class_by_name[name] = ann.lesion_class

    for p in corr.pairs:
        track = registry.track_of_annotation(p.item_a)
        name = track.name if track is not None else opened_name[p.item_a.key]
        obs_by_name[name].append(
            Observation(annotation=p.item_b, mapped_centroid=p.item_b.centroid))

    return _rebuild_registry(registry, obs_by_name, class_by_name, next_indices)


@dataclass(frozen=True)
class IncomingTrack:
    """A resolved track from another frame, mapped into the registry frame.

    ``point`` is the representative centroid used for matching;
    ``observations`` already carry registry-frame mapped centroids.
    """

    lesion_class: LesionClass
    point: Point3
    observations: tuple[Observation, ...]

    @property
    def order_key(self) -> tuple:
        return min(obs.annotation.order_key for obs in self.observations)


def merge_into_registry(registry: TrackRegistry, incoming: Sequence[IncomingTrack],
                        cfg: MatchConfig,
                        force_new: bool = False) -> tuple[TrackRegistry, tuple[MatchDecision, ...]]:
    """Match incoming tracks against registry tracks class by class.

    Matched incoming tracks pour their observations into the existing track;
    unmatched ones open new tracks, numbered in one batch ordered by the
    earliest member annotation's (timepoint, series, reader, source_label).
    Existing unmatched tracks persist unchanged. ``force_new`` skips matching
    entirely so every incoming item opens its own track (used when spatial
    alignment is unavailable and matching would be unsound).
    """
    obs_by_name, class_by_name = _registry_as_dict(registry)
    next_indices = {
        LesionClass.TARGET: registry.next_target_index,
        LesionClass.NON_TARGET: registry.next_nontarget_index,
    }
    decisions: list[MatchDecision] = []
    openers: list[IncomingTrack] = []

    if force_new:
        openers.extend(incoming)
        openers.sort(key=lambda t: t.order_key)
        for item in openers:
            idx = next_indices[item.lesion_class]
            next_indices[item.lesion_class] = idx + 1
            name = canonical_name(item.lesion_class, idx)
            obs_by_name[name] = list(item.observations)
            class_by_name[name] = item.lesion_class
        return _rebuild_registry(registry, obs_by_name, class_by_name, next_indices), ()

    for lesion_class in (LesionClass.TARGET, LesionClass.NON_TARGET):
        existing = [t for t in registry.tracks if t.lesion_class is lesion_class]
        arriving = [t for t in incoming if t.lesion_class is lesion_class]
        if not arriving:
            continue
        threshold = cfg.threshold_for(lesion_class)
        kept, _, rest_b, raw_pairs = _match_points(
            [t.reference_centroid for t in existing],
            [t.point for t in arriving], threshold)
        for r, c, d in raw_pairs:
            decisions.append(MatchDecision(
                lesion_class=lesion_class,
                key_a=("track", existing[r].name),
                key_b=arriving[c].observations[0].annotation.key,
                distance_mm=d, threshold_mm=threshold, accepted=d <= threshold))
        for r, c, _ in kept:
            obs_by_name[existing[r].name].extend(arriving[c].observations)
        openers.extend(arriving[i] for i in rest_b)

    openers.sort(key=lambda t: t.order_key)
    for item in openers:
        idx = next_indices[item.lesion_class]
        next_indices[item.lesion_class] = idx + 1
        name = canonical_name(item.lesion_class, idx)
        obs_by_name[name] = list(item.observations)
        class_by_name[name] = item.lesion_class

    return _rebuild_registry(registry, obs_by_name, class_by_name, next_indices), \
        tuple(decisions)
