#!/usr/bin/env python3
"""Pair two readers' annotations of one series and assign canonical names.

Reader R2 names the same lesions differently, annotates one lesion R1
missed, and both jitter their centroids by a few millimeters. Gated
assignment pairs what belongs together, the leftover stays single, and the
registry hands out stable G/NG names in reading order.

Usage:
    python3 demos/02_matching_basics.py
"""
import numpy as np

from lesiontrack.matching import MatchConfig, match_lesions
from lesiontrack.model import (LesionAnnotation, LesionClass, Point3,
                               TrackRegistry)
from lesiontrack.pipeline import PipelineConfig, match_within_series


def _reader_annotations(reader, jitter, labels, positions, classes):
    rng = np.random.default_rng(jitter)
    out = []
    for label, pos, cls in zip(labels, positions, classes):
        shifted = np.asarray(pos, dtype=float) + rng.uniform(-2.5, 2.5, 3)
        out.append(LesionAnnotation(
            centroid=Point3(*shifted), lesion_class=cls, reader_id=reader,
            series_id="A", timepoint_id="Screening", source_label=label))
    return tuple(out)


def main():
    target = LesionClass.TARGET
    nontarget = LesionClass.NON_TARGET
    positions = [(40.0, 10.0, -20.0), (-35.0, 25.0, 10.0), (5.0, -40.0, 30.0)]
    r1 = _reader_annotations("R1", 1, ["T1", "T2", "N1"], positions,
                             [target, target, nontarget])
    # R2 swaps the two target names and reports an extra lesion
    r2 = _reader_annotations("R2", 2, ["T2", "T1", "N1", "T3"],
                             positions + [(60.0, 50.0, 40.0)],
                             [target, target, nontarget, target])

    cfg = MatchConfig()
    print(f"thresholds: target <= {cfg.target_threshold_mm} mm, "
          f"non-target <= {cfg.nontarget_threshold_mm} mm\n")

    corr = match_lesions(r1, r2, cfg)
    print("pairwise correspondence:")
    for pair in corr.pairs:
        print(f"  {pair.item_a.reader_id}:{pair.item_a.source_label}  <->  "
              f"{pair.item_b.reader_id}:{pair.item_b.source_label}   "
              f"{pair.distance_mm:5.2f} mm  ({pair.item_a.lesion_class.value})")
    for a in corr.unmatched_a + corr.unmatched_b:
        print(f"  {a.reader_id}:{a.source_label}  unmatched "
              f"({a.lesion_class.value})")

    audit = []
    registry = match_within_series({"R1": r1, "R2": r2}, PipelineConfig(),
                                   TrackRegistry(patient_id="demo"),
                                   audit=audit)
    print("\ncanonical tracks:")
    for track in registry.tracks:
        labels = sorted({f"{o.annotation.reader_id}:{o.annotation.source_label}"
                         for o in track.observations})
        print(f"  {track.name:4s} {track.lesion_class.value:10s} "
              f"{len(track.observations)} observations  [{', '.join(labels)}]")
    accepted = sum(1 for e in audit if e.get("accepted"))
    print(f"\naudit: {len(audit)} matching decisions, {accepted} accepted")


if __name__ == "__main__":
    main()
