"""File formats: raw volumes with a text sidecar header, and annotation CSVs.

Volume storage is deliberately minimal: a little-endian raw voxel file in
x-fastest order next to a UTF-8 ``key: value`` header. Both are easy to write
by hand, which keeps every fixture in the test suite human-auditable.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SizeError
from .model import LesionAnnotation, LesionClass, Point3, Volume

DTYPES = {
    "u8": np.dtype("<u1"),
    "i16": np.dtype("<i2"),
    "f32": np.dtype("<f4"),
}

_HEADER_KEYS = ("dims", "spacing", "origin", "dtype")

ANNOTATION_COLUMNS = (
    "patient_id", "timepoint_id", "series_id", "reader_id",
    "class", "source_label", "x_mm", "y_mm", "z_mm",
)


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    dtype: str

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ParseError(f"unsupported dtype {self.dtype!r}")
        if any(d < 1 for d in self.dims):
            raise ParseError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ParseError(f"spacing must be positive, got {self.spacing}")

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def byte_length(self) -> int:
        return self.voxel_count * DTYPES[self.dtype].itemsize


def _parse_triple(value: str, kind, key: str):
    parts = value.split()
    if len(parts) != 3:
        raise ParseError(f"header key {key!r} needs 3 values, got {value!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise ParseError(f"header key {key!r}: {exc}") from exc


def read_header(header_path) -> VolumeHeader:
    """Parse a ``key: value`` sidecar header."""
    text = Path(header_path).read_text(encoding="utf-8")
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError(f"{header_path}:{lineno}: expected 'key: value', got {line!r}")
        key, _, value = line.partition(":")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise ParseError(f"{header_path}:{lineno}: unknown header key {key!r}")
        if key in fields:
            raise ParseError(f"{header_path}:{lineno}: duplicate header key {key!r}")
        fields[key] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise ParseError(f"{header_path}: missing header keys {missing}")
    return VolumeHeader(
        dims=_parse_triple(fields["dims"], int, "dims"),
        spacing=_parse_triple(fields["spacing"], float, "spacing"),
        origin=_parse_triple(fields["origin"], float, "origin"),
        dtype=fields["dtype"],
    )


def load_volume(header_path, raw_path=None) -> Volume:
    """Read a volume; intensities are converted to float64 internally.

    ``raw_path`` defaults to the header path with a ``.raw`` suffix.
    """
    header_path = Path(header_path)
    if raw_path is None:
        raw_path = header_path.with_suffix(".raw")
    header = read_header(header_path)
    raw = Path(raw_path).read_bytes()
    if len(raw) != header.byte_length:
        raise SizeError(
            f"{raw_path}: expected {header.byte_length} bytes for dims "
            f"{header.dims} dtype {header.dtype}, found {len(raw)}")
    flat = np.frombuffer(raw, dtype=DTYPES[header.dtype])
    data = flat.reshape(header.dims, order="F").astype(float)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{raw_path}: non-finite voxel values")
    return Volume(data=data, spacing=header.spacing, origin=Point3(*header.origin))


def save_volume(v: Volume, header_path, raw_path=None, dtype: str = "f32") -> None:
    """Write a volume as header + raw pair.

    Integer dtypes round to the nearest integer; values outside the dtype's
    range raise DataError rather than wrap.
    """
    header_path = Path(header_path)
    if raw_path is None:
        raw_path = header_path.with_suffix(".raw")
    if dtype not in DTYPES:
        raise ParseError(f"unsupported dtype {dtype!r}")
    np_dtype = DTYPES[dtype]
    data = v.data
    if np_dtype.kind in "ui":
        data = np.rint(data)
        info = np.iinfo(np_dtype)
        if data.min() < info.min or data.max() > info.max:
            raise DataError(f"intensities out of range for dtype {dtype}")
    flat = np.asarray(data, dtype=np_dtype).ravel(order="F")
    lines = [
        f"dims: {v.dims[0]} {v.dims[1]} {v.dims[2]}",
        f"spacing: {v.spacing[0]!r} {v.spacing[1]!r} {v.spacing[2]!r}",
        f"origin: {v.origin.x!r} {v.origin.y!r} {v.origin.z!r}",
        f"dtype: {dtype}",
    ]
    header_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(raw_path).write_bytes(flat.tobytes())


@dataclass(frozen=True)
class AnnotationTable:
    """Lesion annotations for one or more patients, in canonical row order."""

    rows: tuple[tuple[str, LesionAnnotation], ...]

    @staticmethod
    def build(rows) -> "AnnotationTable":
        """Canonicalize order and enforce key uniqueness."""
        ordered = sorted(
            rows,
            key=lambda r: (r[0], r[1].timepoint_id, r[1].series_id, r[1].reader_id,
                           r[1].lesion_class.value, r[1].source_label))
        seen = set()
        for patient_id, ann in ordered:
            key = (patient_id,) + ann.key
            if key in seen:
                raise DataError(f"duplicate annotation key {key}")
            seen.add(key)
        return AnnotationTable(tuple(ordered))

    def patients(self) -> tuple[str, ...]:
        out = []
        for patient_id, _ in self.rows:
            if patient_id not in out:
                out.append(patient_id)
        return tuple(out)

    def for_patient(self, patient_id: str) -> tuple[LesionAnnotation, ...]:
        return tuple(ann for pid, ann in self.rows if pid == patient_id)

    def __len__(self) -> int:
        return len(self.rows)


def load_annotations(csv_path) -> AnnotationTable:
    """Read an annotation CSV with the exact 9-column header."""
    csv_path = Path(csv_path)
    with csv_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{csv_path}: empty file") from None
        if tuple(h.strip() for h in header) != ANNOTATION_COLUMNS:
            raise ParseError(
                f"{csv_path}: header must be exactly {','.join(ANNOTATION_COLUMNS)}")
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) != len(ANNOTATION_COLUMNS):
                raise ParseError(f"{csv_path}:{lineno}: expected "
                                 f"{len(ANNOTATION_COLUMNS)} fields, got {len(record)}")
            fields = dict(zip(ANNOTATION_COLUMNS, (f.strip() for f in record)))
            try:
                centroid = Point3(float(fields["x_mm"]), float(fields["y_mm"]),
                                  float(fields["z_mm"]))
            except ValueError as exc:
                raise DataError(f"{csv_path}:{lineno}: bad coordinate ({exc})") from exc
            try:
                lesion_class = LesionClass.parse(fields["class"])
            except ValueError as exc:
                raise DataError(f"{csv_path}:{lineno}: {exc}") from exc
            try:
                ann = LesionAnnotation(
                    centroid=centroid,
                    lesion_class=lesion_class,
                    reader_id=fields["reader_id"],
                    series_id=fields["series_id"],
                    timepoint_id=fields["timepoint_id"],
                    source_label=fields["source_label"],
                )
            except ValueError as exc:
                raise DataError(f"{csv_path}:{lineno}: {exc}") from exc
            rows.append((fields["patient_id"], ann))
    try:
        return AnnotationTable.build(rows)
    except DataError as exc:
        raise DataError(f"{csv_path}: {exc}") from exc


def save_annotations(table: AnnotationTable, csv_path) -> None:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for patient_id, ann in table.rows:
            writer.writerow([
                patient_id, ann.timepoint_id, ann.series_id, ann.reader_id,
                ann.lesion_class.value, ann.source_label,
                repr(ann.centroid.x), repr(ann.centroid.y), repr(ann.centroid.z),
            ])


def sanitize_token(part: str) -> str:
    """Filesystem-safe identifier fragment (spaces etc. become dashes)."""
    return re.sub(r"[^A-Za-z0-9._-]+", "-", part)


def volume_filename(patient_id: str, timepoint_id: str, series_id: str) -> str:
    """Conventional header filename for one (patient, timepoint, series)."""
    return "_".join(sanitize_token(p) for p in
                    (patient_id, timepoint_id, series_id)) + ".hdr"
