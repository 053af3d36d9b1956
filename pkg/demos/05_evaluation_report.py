#!/usr/bin/env python3
"""Score a tracking run against ground truth and summarize a cohort.

First a full pipeline run on a synthetic patient is scored against that
patient's known lesion grouping: unique reported lesions, missed lesions,
falsely opened tracks, and dual-reader agreement. Then the bundled
25-patient reference cohort is aggregated into the overestimation rate
and the per-patient failure fraction.

Usage:
    python3 demos/05_evaluation_report.py [--out-dir DIR]
"""
import argparse
import json
from pathlib import Path

from lesiontrack.evaluation import (REFERENCE_COHORT, aggregate,
                                    report_to_dict, score_patient)
from lesiontrack.phantom import build_longitudinal_phantom
from lesiontrack.pipeline import PatientDataset, PipelineConfig, run_patient


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="demo_output/05_evaluation_report")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ph = build_longitudinal_phantom(seed=args.seed)
    dataset = PatientDataset.from_annotations(ph.table, ph.patient_id,
                                              volumes=ph.volumes)
    registry, _, _ = run_patient(dataset, PipelineConfig())
    score = score_patient(registry, ph.truth)

    print(f"patient {score.patient_id}")
    print(f"  unique reported  {score.unique_reported}")
    print(f"  missed           {score.missed}")
    print(f"  falsely opened   {score.false_reported}")
    print(f"  true lesions     {score.true_count}")
    print(f"  verdict          {'FAIL' if score.failed else 'ok'}")
    if score.reader is not None:
        rc = score.reader
        print(f"  reader agreement: R1 saw {rc.reader_1}, R2 saw "
              f"{rc.reader_2}, {rc.aligned} aligned, "
              f"{rc.misaligned} misaligned")

    report = aggregate(REFERENCE_COHORT)
    print(f"\nreference cohort ({len(report.scores)} patients)")
    print(f"  unique reported  {report.total_unique}")
    print(f"  true lesions     {report.total_true}")
    print(f"  missed / false   {report.total_missed} / {report.total_false}")
    print(f"  overestimation   {report.overestimation_rate:.2%}")
    print(f"  failures         {len(report.failure_patients)}/"
          f"{len(report.scores)} patients "
          f"({', '.join(report.failure_patients)})")

    out_path = out_dir / "cohort_report.json"
    out_path.write_text(json.dumps(report_to_dict(report), indent=2,
                                   sort_keys=True) + "\n", encoding="utf-8")
    print(f"\nwrote {out_path}")


if __name__ == "__main__":
    main()
