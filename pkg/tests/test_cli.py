"""In-process runs of every CLI subcommand against files on disk."""
import json

import numpy as np
import pytest
from PIL import Image

from helpers import ann, registry_of, tiny_volume, track_of
from lesiontrack.cli import main
from lesiontrack.model import Point3
from lesiontrack.phantom import (PhantomLesion, PhantomSpec,
                                 build_longitudinal_phantom, generate_phantom,
                                 transform_phantom)
from lesiontrack.pipeline import save_tracks_json
from lesiontrack.registration import (RigidTransform, invert_transform,
                                      with_center)
from lesiontrack.volume_io import (AnnotationTable, load_annotations,
                                   load_volume, save_annotations, save_volume,
                                   volume_filename)


# ---------------------------------------------------------------- match

def _match_csv(tmp_path, readers):
    rows = []
    for k, reader in enumerate(readers):
        dx = float(k)
        rows.append(("p", ann(10 + dx, 0, 0, reader=reader, label="T1",
                              series="S1")))
        rows.append(("p", ann(60 + dx, 0, 0, reader=reader, label="T2",
                              series="S1")))
    path = tmp_path / "ann.csv"
    save_annotations(AnnotationTable.build(rows), path)
    return path


def test_match_pairs_two_readers(tmp_path, capsys):
    csv_path = _match_csv(tmp_path, ("R1", "R2"))
    out = tmp_path / "match.json"
    rc = main(["match", "--annotations", str(csv_path), "--patient", "p",
               "--timepoint", "Screening", "--series", "S1",
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["readers"] == ["R1", "R2"]
    assert payload["target_threshold_mm"] == 40.0
    assert len(payload["pairs"]) == 2
    assert all(abs(p["distance_mm"] - 1.0) < 1e-9 for p in payload["pairs"])
    assert payload["unmatched"] == {"target": [], "non-target": []}
    assert "2 pairs" in capsys.readouterr().out


def test_match_single_reader_reports_unmatched(tmp_path):
    csv_path = _match_csv(tmp_path, ("R1",))
    out = tmp_path / "match.json"
    rc = main(["match", "--annotations", str(csv_path), "--patient", "p",
               "--timepoint", "Screening", "--series", "S1",
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["pairs"] == []
    assert len(payload["unmatched"]["target"]) == 2


def test_match_three_readers_fails(tmp_path, capsys):
    csv_path = _match_csv(tmp_path, ("R1", "R2", "R3"))
    rc = main(["match", "--annotations", str(csv_path), "--patient", "p",
               "--timepoint", "Screening", "--series", "S1",
               "--out", str(tmp_path / "match.json")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------- register

def test_register_recovers_transform_and_resamples(tmp_path):
    spec = PhantomSpec(dims=(32, 32, 32), spacing=(3.0, 3.0, 3.0),
                       body_semi_axes=(36, 30, 24),
                       lesions=(PhantomLesion(center=Point3(10, -6, 4),
                                              radius_mm=7.0),
                                PhantomLesion(center=Point3(-12, 8, -6),
                                              radius_mm=6.0)),
                       noise_sigma=1.0, rng_seed=4)
    vol, table = generate_phantom(spec)
    deg = np.pi / 180.0
    t_true = RigidTransform(angles=(2 * deg, -1 * deg, 2 * deg),
                            translation=(4.0, -3.0, 3.0),
                            center=Point3(0.0, 0.0, 0.0))
    moved, _ = transform_phantom(vol, table, t_true)
    fixed_hdr, moving_hdr = tmp_path / "fixed.hdr", tmp_path / "moving.hdr"
    save_volume(vol, fixed_hdr)
    save_volume(moved, moving_hdr)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"registration": {"rng_seed": 0}}))
    out_t = tmp_path / "transform.json"
    out_r = tmp_path / "resampled.hdr"
    rc = main(["register", "--fixed", str(fixed_hdr),
               "--moving", str(moving_hdr), "--config", str(config),
               "--out-transform", str(out_t), "--out-resampled", str(out_r)])
    assert rc == 0

    d = json.loads(out_t.read_text())
    assert set(d) == {"angles_rad", "translation_mm", "center_mm",
                      "converged", "final_metric", "iterations_per_level"}
    got = RigidTransform(angles=tuple(d["angles_rad"]),
                         translation=tuple(d["translation_mm"]),
                         center=Point3(*d["center_mm"]))
    # a phantom moved through t looks like an acquisition after motion
    # t inverse, so that is what the transform file should hold
    want = with_center(invert_transform(t_true), got.center)
    ang_err = np.abs(np.array(got.angles) - np.array(want.angles))
    tr_err = np.abs(np.array(got.translation) - np.array(want.translation))
    assert np.degrees(ang_err).max() < 1.5
    assert tr_err.max() < 1.5

    res = load_volume(out_r)
    assert res.dims == vol.dims and res.spacing == vol.spacing
    # compare away from the edges: the out-of-range fill band never reaches
    # the central crop for this small a motion
    crop = (slice(4, -4),) * 3
    corr = np.corrcoef(np.asarray(vol.data)[crop].ravel(),
                       np.asarray(res.data)[crop].ravel())[0, 1]
    assert corr > 0.95


def test_register_bad_config_field_fails(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"registration": {"bogus": 1}}))
    rc = main(["register", "--fixed", "nope.hdr", "--moving", "nope.hdr",
               "--config", str(config)])
    assert rc == 1
    assert "bad config field" in capsys.readouterr().err


# ---------------------------------------------------------------- track

@pytest.fixture(scope="module")
def patient_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("patient")
    ph = build_longitudinal_phantom(seed=0)
    csv_path = root / "annotations.csv"
    save_annotations(ph.table, csv_path)
    volume_dir = root / "volumes"
    volume_dir.mkdir()
    for (tp, series), vol in ph.volumes.items():
        save_volume(vol, volume_dir / volume_filename(ph.patient_id, tp,
                                                      series))
    return ph, csv_path, volume_dir


def test_track_full_pipeline(patient_files, tmp_path, capsys):
    ph, csv_path, volume_dir = patient_files
    out = tmp_path / "tracks.json"
    audit = tmp_path / "audit.jsonl"
    rc = main(["track", "--annotations", str(csv_path),
               "--volumes", str(volume_dir), "--patient", ph.patient_id,
               "--out", str(out), "--audit", str(audit)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["patient_id"] == ph.patient_id
    assert sorted(t["name"] for t in payload["tracks"]) == \
        ["G1", "G2", "G3", "G4", "NG1"]
    assert not any("flags" in t for t in payload["tracks"])
    events = [json.loads(line) for line in
              audit.read_text().strip().splitlines()]
    assert any(e["event"] == "registration" for e in events)
    assert any(e["event"] == "match_decision" for e in events)
    assert "5 tracks" in capsys.readouterr().out


def test_track_reruns_byte_identical(patient_files, tmp_path):
    ph, csv_path, volume_dir = patient_files
    outs = [tmp_path / "a.json", tmp_path / "b.json"]
    for out in outs:
        assert main(["track", "--annotations", str(csv_path),
                     "--volumes", str(volume_dir),
                     "--patient", ph.patient_id, "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_track_without_volumes_flags_fallback(patient_files, tmp_path):
    ph, csv_path, _ = patient_files
    empty = tmp_path / "no_volumes"
    empty.mkdir()
    out = tmp_path / "tracks.json"
    rc = main(["track", "--annotations", str(csv_path),
               "--volumes", str(empty), "--patient", ph.patient_id,
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert all("identity-fallback" in t.get("flags", ())
               for t in payload["tracks"])


# ---------------------------------------------------------------- synth

def test_synth_writes_volume_and_annotations(tmp_path, capsys):
    spec = {"dims": [24, 24, 24], "spacing": [2.0, 2.0, 2.0],
            "body_semi_axes": [20.0, 18.0, 16.0], "noise_sigma": 1.0,
            "rng_seed": 3,
            "lesions": [{"center_mm": [0, 0, 0], "radius_mm": 5.0},
                        {"center_mm": [-8, 6, -4], "radius_mm": 5.0,
                         "class": "non-target"}]}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out_vol = tmp_path / "phantom.hdr"
    out_csv = tmp_path / "phantom.csv"
    rc = main(["synth", "--spec", str(spec_path), "--out-volume",
               str(out_vol), "--out-annotations", str(out_csv)])
    assert rc == 0
    vol = load_volume(out_vol)
    assert vol.dims == (24, 24, 24)
    table = load_annotations(out_csv)
    labels = sorted(a.source_label for a in table.for_patient("phantom"))
    assert labels == ["N1", "T1"]
    assert "2 lesions" in capsys.readouterr().out


@pytest.mark.parametrize("payload", [
    {"dims": [24, 24, 24], "bogus": True},
    {"lesions": [{"radius_mm": 5.0}]},                      # missing center_mm
    {"lesions": [{"center_mm": [0, 0, 0]}]},                # missing radius_mm
    {"lesions": [{"center_mm": [0, 0, 0], "radius_mm": 5.0,
                  "class": "tumor"}]},                      # unknown class
])
def test_synth_invalid_spec_fails(tmp_path, capsys, payload):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(payload))
    rc = main(["synth", "--spec", str(spec_path),
               "--out-volume", str(tmp_path / "v.hdr"),
               "--out-annotations", str(tmp_path / "a.csv")])
    assert rc == 1
    assert "bad phantom spec field" in capsys.readouterr().err


# ---------------------------------------------------------------- evaluate

def test_evaluate_reference_fixture(tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = main(["evaluate", "--table1-fixture", "--out", str(out)])
    assert rc == 0
    d = json.loads(out.read_text())
    assert d["total_unique"] == 65
    assert d["total_true"] == 62
    assert abs(d["overestimation_rate"] - 3 / 62) < 1e-12
    assert d["failure_patients"] == ["12", "13"]
    assert "rate=4.84%" in capsys.readouterr().out


def test_evaluate_tracks_against_truth(tmp_path):
    reg = registry_of("p", [track_of("G1", (ann(0, 0, 0),))])
    tracks_path = tmp_path / "tracks.json"
    save_tracks_json(reg, tracks_path)
    out = tmp_path / "report.json"
    rc = main(["evaluate", "--tracks", str(tracks_path),
               "--truth", str(tracks_path), "--out", str(out)])
    assert rc == 0
    d = json.loads(out.read_text())
    assert d["total_missed"] == 0 and d["total_false"] == 0
    assert d["patients"][0]["unique_reported"] == 1


def test_evaluate_requires_inputs(tmp_path, capsys):
    rc = main(["evaluate", "--out", str(tmp_path / "report.json")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "report.json").exists()


# ---------------------------------------------------------------- plot

def _saved_ball(tmp_path):
    dims = (21, 21, 21)
    ii, jj, kk = np.indices(dims)
    data = np.where((ii - 10) ** 2 + (jj - 10) ** 2 + (kk - 10) ** 2 <= 16,
                    100.0, 0.0)
    path = tmp_path / "ball.hdr"
    save_volume(tiny_volume(data), path)
    return path


def test_plot_renders_markers(tmp_path):
    vol_path = _saved_ball(tmp_path)
    markers = tmp_path / "markers.json"
    markers.write_text(json.dumps(
        [{"point_mm": [10, 10, 10], "label": "G1", "class": "target"}]))
    out = tmp_path / "figure.png"
    rc = main(["plot", "--volume", str(vol_path), "--focus", "10,10,10",
               "--markers", str(markers), "--window", "0", "100",
               "--out", str(out)])
    assert rc == 0
    px = np.asarray(Image.open(out).convert("RGB"))
    assert (px == np.array([255, 0, 0])).all(axis=-1).any()


def test_plot_overlay_flag(tmp_path):
    vol_path = _saved_ball(tmp_path)
    out = tmp_path / "overlay.png"
    rc = main(["plot", "--volume", str(vol_path), "--overlay", str(vol_path),
               "--alpha", "0.6", "--focus", "10,10,10", "--out", str(out)])
    assert rc == 0
    assert out.exists()


def test_plot_malformed_focus_fails(tmp_path, capsys):
    vol_path = _saved_ball(tmp_path)
    rc = main(["plot", "--volume", str(vol_path), "--focus", "1,2",
               "--out", str(tmp_path / "x.png")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_plot_tracks_sheet(tmp_path, capsys):
    a1 = ann(3, 3, 3, label="T1", timepoint="Screening", series="A")
    a2 = ann(4, 3, 3, label="T1", timepoint="Week 8", series="A")
    reg = registry_of("p", [track_of("G1", (a1, a2))])
    tracks_path = tmp_path / "tracks.json"
    save_tracks_json(reg, tracks_path)
    volume_dir = tmp_path / "volumes"
    volume_dir.mkdir()
    # only the Screening volume exists; the Week 8 row is skipped
    save_volume(tiny_volume(np.zeros((8, 8, 8))),
                volume_dir / volume_filename("p", "Screening", "A"))
    out_dir = tmp_path / "figures"
    rc = main(["plot-tracks", "--tracks", str(tracks_path),
               "--volumes", str(volume_dir), "--out-dir", str(out_dir)])
    assert rc == 0
    assert sorted(p.name for p in out_dir.iterdir()) == \
        ["p_G1_Screening_A_R1.png"]
    assert "wrote 1 files" in capsys.readouterr().out


# ---------------------------------------------------------------- argparse

def test_unknown_command_exits_two():
    with pytest.raises(SystemExit) as err:
        main(["bogus"])
    assert err.value.code == 2


def test_missing_required_argument_exits_two():
    with pytest.raises(SystemExit) as err:
        main(["match", "--patient", "p"])
    assert err.value.code == 2
