"""Command-line entry points.

Subcommands: match (cross-reader pairing for one series), register (rigid
alignment of two volumes), track (full longitudinal pipeline for one
patient), synth (phantom generation), evaluate (scoring against truth),
plot / plot-tracks (triaxial figures). All JSON output is written with
sorted keys so repeated runs are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import InputMismatch, LesionTrackError
from .evaluation import (REFERENCE_COHORT, aggregate, report_to_dict,
                         score_patient)
from .matching import MatchConfig, match_lesions
from .model import LesionClass, Point3
from .phantom import PhantomLesion, PhantomSpec, generate_phantom
from .pipeline import (PatientDataset, PipelineConfig, load_tracks_json,
                       run_patient, save_audit_jsonl, save_tracks_json)
from .registration import (RegistrationConfig, RigidTransform, register,
                           resample)
from .viz import Marker, TriaxialRequest, render_track_sheet, render_triaxial
from .volume_io import (load_annotations, load_volume, save_annotations,
                        save_volume, volume_filename)


def _write_json(payload, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _config_from_dict(payload: dict) -> PipelineConfig:
    """Build pipeline settings from the config JSON.

    Accepts {"match": {...}, "registration": {...}}; a flat dict of
    registration fields is also accepted for the register subcommand.
    """
    if not isinstance(payload, dict):
        raise InputMismatch("config JSON must be an object")
    match_part = payload.get("match", {})
    reg_part = payload.get("registration", {})
    if not ("match" in payload or "registration" in payload):
        reg_part = payload
    try:
        match_cfg = MatchConfig(**match_part)
        if "shrink_factors" in reg_part:
            reg_part = dict(reg_part,
                            shrink_factors=tuple(reg_part["shrink_factors"]))
        if "smoothing_sigmas" in reg_part:
            reg_part = dict(reg_part,
                            smoothing_sigmas=tuple(reg_part["smoothing_sigmas"]))
        reg_cfg = RegistrationConfig(**reg_part)
    except TypeError as exc:
        raise InputMismatch(f"bad config field: {exc}") from exc
    return PipelineConfig(match=match_cfg, registration=reg_cfg)


def _load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return _config_from_dict(_load_json(path))


def _ann_entry(a) -> dict:
    return {"reader": a.reader_id, "source_label": a.source_label,
            "centroid_mm": [a.centroid.x, a.centroid.y, a.centroid.z]}


def _cmd_match(args) -> int:
    table = load_annotations(args.annotations)
    anns = [a for a in table.for_patient(args.patient)
            if a.timepoint_id == args.timepoint and a.series_id == args.series]
    readers = sorted({a.reader_id for a in anns})
    if len(readers) > 2:
        raise InputMismatch(f"series has {len(readers)} readers; "
                            "pairwise matching needs at most two")
    cfg = MatchConfig(target_threshold_mm=args.target_threshold,
                      nontarget_threshold_mm=args.nontarget_threshold)
    by_reader = {r: tuple(a for a in anns if a.reader_id == r) for r in readers}
    if len(readers) == 2:
        corr = match_lesions(by_reader[readers[0]], by_reader[readers[1]], cfg)
        pairs = [{"class": p.item_a.lesion_class.value,
                  "a": _ann_entry(p.item_a), "b": _ann_entry(p.item_b),
                  "distance_mm": p.distance_mm} for p in corr.pairs]
        unmatched = list(corr.unmatched_a) + list(corr.unmatched_b)
    else:
        pairs = []
        unmatched = anns
    unmatched_by_class = {
        cls.value: [_ann_entry(a) for a in
                    sorted((a for a in unmatched if a.lesion_class is cls),
                           key=lambda a: a.order_key)]
        for cls in (LesionClass.TARGET, LesionClass.NON_TARGET)}
    _write_json({
        "patient_id": args.patient, "timepoint_id": args.timepoint,
        "series_id": args.series, "readers": readers,
        "target_threshold_mm": args.target_threshold,
        "nontarget_threshold_mm": args.nontarget_threshold,
        "pairs": pairs, "unmatched": unmatched_by_class,
    }, args.out)
    print(f"match: {len(pairs)} pairs, "
          f"{sum(len(v) for v in unmatched_by_class.values())} unmatched "
          f"-> {args.out}")
    return 0


def _transform_to_dict(result) -> dict:
    t = result.transform
    return {
        "angles_rad": list(t.angles),
        "translation_mm": list(t.translation),
        "center_mm": [t.center.x, t.center.y, t.center.z],
        "converged": result.converged,
        "final_metric": result.final_metric,
        "iterations_per_level": list(result.iterations_per_level),
    }


def _cmd_register(args) -> int:
    cfg = _load_config(args.config)
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    result = register(fixed, moving, cfg.registration)
    if args.out_transform:
        _write_json(_transform_to_dict(result), args.out_transform)
    if args.out_resampled:
        save_volume(resample(moving, result.transform, fixed),
                    args.out_resampled)
    print(f"register: converged={result.converged} "
          f"metric={result.final_metric:.6f} "
          f"iterations={list(result.iterations_per_level)}")
    return 0


def _cmd_track(args) -> int:
    cfg = _load_config(args.config)
    table = load_annotations(args.annotations)
    volume_dir = Path(args.volumes)
    keys = {(a.timepoint_id, a.series_id)
            for a in table.for_patient(args.patient)}
    volumes = {}
    for tp, series in sorted(keys):
        header = volume_dir / volume_filename(args.patient, tp, series)
        if header.exists():
            volumes[(tp, series)] = load_volume(header)
    dataset = PatientDataset.from_annotations(table, args.patient,
                                              volumes=volumes)
    registry, audit, flags = run_patient(dataset, cfg)
    save_tracks_json(registry, args.out, flags)
    if args.audit:
        save_audit_jsonl(audit, args.audit)
    print(f"track: {len(registry.tracks)} tracks from "
          f"{dataset.annotation_count} annotations -> {args.out}")
    return 0


def _phantom_spec_from_dict(payload: dict) -> PhantomSpec:
    kwargs = dict(payload)
    for key in ("dims", "spacing", "body_semi_axes"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        lesions = []
        for entry in kwargs.pop("lesions", []):
            lesions.append(PhantomLesion(
                center=Point3(*entry["center_mm"]),
                radius_mm=float(entry["radius_mm"]),
                intensity=float(entry.get("intensity", 100.0)),
                lesion_class=LesionClass.parse(entry.get("class", "target"))))
        return PhantomSpec(lesions=tuple(lesions), **kwargs)
    except KeyError as exc:
        raise InputMismatch(f"bad phantom spec field: missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InputMismatch(f"bad phantom spec field: {exc}") from exc


def _cmd_synth(args) -> int:
    spec = _phantom_spec_from_dict(_load_json(args.spec))
    volume, table = generate_phantom(spec)
    save_volume(volume, args.out_volume)
    save_annotations(table, args.out_annotations)
    print(f"synth: {spec.dims} volume with {len(spec.lesions)} lesions "
          f"-> {args.out_volume}")
    return 0


def _cmd_evaluate(args) -> int:
    if args.table1_fixture:
        report = aggregate(REFERENCE_COHORT)
    else:
        if not (args.tracks and args.truth):
            raise InputMismatch("evaluate needs --tracks and --truth "
                                "(or --table1-fixture)")
        algorithm = load_tracks_json(args.tracks)
        truth = load_tracks_json(args.truth)
        report = aggregate([score_patient(algorithm, truth)])
    _write_json(report_to_dict(report), args.out)
    print(f"evaluate: U={report.total_unique} true={report.total_true} "
          f"missed={report.total_missed} false={report.total_false} "
          f"rate={100 * report.overestimation_rate:.2f}% -> {args.out}")
    return 0


def _parse_focus(text: str) -> Point3:
    parts = text.split(",")
    if len(parts) != 3:
        raise InputMismatch(f"--focus expects x,y,z got {text!r}")
    return Point3(*(float(p) for p in parts))


def _markers_from_json(path) -> tuple[Marker, ...]:
    if path is None:
        return ()
    entries = _load_json(path)
    return tuple(Marker(point=Point3(*e["point_mm"]),
                        label=str(e.get("label", "")),
                        lesion_class=LesionClass.parse(e.get("class", "target")))
                 for e in entries)


def _cmd_plot(args) -> int:
    volume = load_volume(args.volume)
    overlay = load_volume(args.overlay) if args.overlay else None
    req = TriaxialRequest(
        volume=volume, overlay=overlay, alpha=args.alpha,
        focus=_parse_focus(args.focus), markers=_markers_from_json(args.markers),
        window=tuple(args.window) if args.window else None,
        out_path=Path(args.out))
    path = render_triaxial(req)
    print(f"plot: wrote {path}")
    return 0


def _cmd_plot_tracks(args) -> int:
    registry = load_tracks_json(args.tracks)
    volume_dir = Path(args.volumes)
    keys = {(o.annotation.timepoint_id, o.annotation.series_id)
            for t in registry.tracks for o in t.observations}
    volumes = {}
    for tp, series in sorted(keys):
        header = volume_dir / volume_filename(registry.patient_id, tp, series)
        if header.exists():
            volumes[(tp, series)] = load_volume(header)
    files = render_track_sheet(registry, volumes, args.out_dir)
    print(f"plot-tracks: wrote {len(files)} files to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesiontrack",
        description="Longitudinal lesion matching, registration, and tracking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="pair two readers' lesions in one series")
    p.add_argument("--annotations", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--timepoint", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--target-threshold", type=float, default=40.0)
    p.add_argument("--nontarget-threshold", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("register", help="rigidly align two volumes")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--config")
    p.add_argument("--out-transform")
    p.add_argument("--out-resampled")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("track", help="run the full pipeline for one patient")
    p.add_argument("--annotations", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--audit")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("synth", help="generate a phantom volume")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-annotations", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("evaluate", help="score tracks against truth")
    p.add_argument("--tracks")
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.add_argument("--table1-fixture", action="store_true",
                   help="score the bundled 25-patient reference cohort")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("plot", help="triaxial slices through a focus point")
    p.add_argument("--volume", required=True)
    p.add_argument("--overlay")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--focus", required=True, help="x,y,z in mm")
    p.add_argument("--markers", help="JSON list of {point_mm, label, class}")
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("plot-tracks", help="one triaxial figure per observation")
    p.add_argument("--tracks", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_plot_tracks)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LesionTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
