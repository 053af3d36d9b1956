"""Volume header/raw round trips and annotation CSV parsing."""
import numpy as np
import pytest

from helpers import tiny_volume
from lesiontrack.errors import DataError, ParseError, SizeError
from lesiontrack.model import LesionClass, Point3
from lesiontrack.volume_io import (ANNOTATION_COLUMNS, AnnotationTable,
                                   load_annotations, load_volume, read_header,
                                   sanitize_token, save_annotations,
                                   save_volume, volume_filename)

HEADER = """\
# comment lines are allowed
dims: 4 4 4
spacing: 2.0 2.0 2.5
origin: -1.0 0.0 3.5
dtype: f32
"""


def test_read_header(tmp_path):
    p = tmp_path / "v.hdr"
    p.write_text(HEADER)
    h = read_header(p)
    assert h.dims == (4, 4, 4)
    assert h.spacing == (2.0, 2.0, 2.5)
    assert h.origin == (-1.0, 0.0, 3.5)
    assert h.dtype == "f32"


@pytest.mark.parametrize("mutation", [
    lambda t: t.replace("dtype: f32", "dtype: f64"),
    lambda t: t.replace("dims: 4 4 4", "dims: 4 4"),
    lambda t: t.replace("dims: 4 4 4", "dims: 4 0 4"),
    lambda t: t.replace("spacing: 2.0 2.0 2.5", "spacing: 2.0 -1 2.5"),
    lambda t: t + "extra: 1\n",
    lambda t: t + "dims: 2 2 2\n",  # duplicate key
    lambda t: t.replace("origin: -1.0 0.0 3.5\n", ""),
])
def test_bad_headers(tmp_path, mutation):
    p = tmp_path / "v.hdr"
    p.write_text(mutation(HEADER))
    with pytest.raises(ParseError):
        read_header(p)


def test_load_zero_u8_volume(tmp_path):
    (tmp_path / "v.hdr").write_text(
        "dims: 2 2 2\nspacing: 1 1 1\norigin: 0 0 0\ndtype: u8\n")
    (tmp_path / "v.raw").write_bytes(bytes(8))
    v = load_volume(tmp_path / "v.hdr")
    assert v.dims == (2, 2, 2)
    assert np.all(np.asarray(v.data) == 0.0)


def test_size_mismatch(tmp_path):
    (tmp_path / "v.hdr").write_text(
        "dims: 4 4 4\nspacing: 1 1 1\norigin: 0 0 0\ndtype: u8\n")
    (tmp_path / "v.raw").write_bytes(bytes(63))
    with pytest.raises(SizeError):
        load_volume(tmp_path / "v.hdr")


def test_non_finite_f32_rejected(tmp_path):
    (tmp_path / "v.hdr").write_text(
        "dims: 2 2 2\nspacing: 1 1 1\norigin: 0 0 0\ndtype: f32\n")
    data = np.zeros(8, dtype="<f4")
    data[3] = np.nan
    (tmp_path / "v.raw").write_bytes(data.tobytes())
    with pytest.raises(DataError):
        load_volume(tmp_path / "v.hdr")


def test_x_fastest_order(tmp_path):
    # voxel (1,0,0) is the second byte of the raw stream
    (tmp_path / "v.hdr").write_text(
        "dims: 2 2 2\nspacing: 1 1 1\norigin: 0 0 0\ndtype: u8\n")
    (tmp_path / "v.raw").write_bytes(bytes([0, 7, 0, 0, 0, 0, 0, 0]))
    v = load_volume(tmp_path / "v.hdr")
    assert v.data[1, 0, 0] == 7.0
    assert v.data[0, 1, 0] == 0.0


@pytest.mark.parametrize("dtype,values", [
    ("u8", lambda rng: rng.integers(0, 256, (3, 4, 5)).astype(float)),
    ("i16", lambda rng: rng.integers(-3000, 3000, (3, 4, 5)).astype(float)),
    ("f32", lambda rng: rng.normal(0, 100, (3, 4, 5)).astype(np.float32)
                           .astype(float)),
])
def test_round_trip_byte_exact(tmp_path, dtype, values):
    rng = np.random.default_rng(4)
    v = tiny_volume(values(rng), spacing=(1.5, 2.0, 0.5), origin=(-4, 2, 9))
    save_volume(v, tmp_path / "a.hdr", dtype=dtype)
    loaded = load_volume(tmp_path / "a.hdr")
    assert np.array_equal(np.asarray(loaded.data), np.asarray(v.data))
    assert loaded.spacing == v.spacing and loaded.origin == v.origin
    save_volume(loaded, tmp_path / "b.hdr", dtype=dtype)
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
    assert (tmp_path / "a.hdr").read_bytes() == (tmp_path / "b.hdr").read_bytes()


def test_integer_save_range_checked(tmp_path):
    v = tiny_volume(np.full((2, 2, 2), 300.0))
    with pytest.raises(DataError):
        save_volume(v, tmp_path / "v.hdr", dtype="u8")


CSV = """\
patient_id,timepoint_id,series_id,reader_id,class,source_label,x_mm,y_mm,z_mm
P1,Screening,S1,R1,target,T1,10,20,30
"""


def test_load_single_annotation(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(CSV)
    table = load_annotations(p)
    assert len(table) == 1
    a = table.for_patient("P1")[0]
    assert a.lesion_class is LesionClass.TARGET
    assert a.centroid == Point3(10, 20, 30)
    assert a.source_label == "T1"


def test_missing_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(CSV.replace(",z_mm", ""))
    with pytest.raises(ParseError):
        load_annotations(p)


def test_bad_coordinate_reports_row(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(CSV.replace("30", "thirty"))
    with pytest.raises(DataError, match="2"):
        load_annotations(p)


def test_duplicate_rows_rejected(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(CSV + "P1,Screening,S1,R1,target,T1,11,21,31\n")
    with pytest.raises(DataError):
        load_annotations(p)


def test_reader_partition(tmp_path):
    rows = ["P1,Screening,S1,R1,target,T{},0,0,{}".format(i, i * 60)
            for i in range(1, 4)]
    rows += ["P1,Screening,S1,R2,target,T{},1,0,{}".format(i, i * 60)
             for i in range(1, 3)]
    p = tmp_path / "a.csv"
    p.write_text(",".join(ANNOTATION_COLUMNS) + "\n" + "\n".join(rows) + "\n")
    table = load_annotations(p)
    by_reader = {}
    for a in table.for_patient("P1"):
        by_reader.setdefault(a.reader_id, []).append(a)
    assert {r: len(v) for r, v in by_reader.items()} == {"R1": 3, "R2": 2}


def test_order_independence(tmp_path):
    rows = ["P1,Screening,S1,R1,target,T1,0,0,0",
            "P2,Week 8,S2,R2,non-target,N1,5,5,5",
            "P1,Week 8,S1,R1,target,T2,9,9,9"]
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    head = ",".join(ANNOTATION_COLUMNS) + "\n"
    a.write_text(head + "\n".join(rows) + "\n")
    b.write_text(head + "\n".join(reversed(rows)) + "\n")
    assert load_annotations(a) == load_annotations(b)


def test_annotation_round_trip(tmp_path):
    head = ",".join(ANNOTATION_COLUMNS) + "\n"
    p = tmp_path / "a.csv"
    p.write_text(head + "P1,Screening,S1,R1,target,T1,10.25,-3.5,0.125\n")
    table = load_annotations(p)
    out = tmp_path / "b.csv"
    save_annotations(table, out)
    assert load_annotations(out) == table


def test_filename_helpers():
    assert sanitize_token("Week 8") == "Week-8"
    assert volume_filename("p 1", "Week 8", "A/B") == "p-1_Week-8_A-B.hdr"
