"""Core domain types: points, annotations, volumes, tracks.

Physical coordinates are always millimeters. Volumes are axis-aligned: the
mapping between voxel indices and physical positions is a pure scale+offset
per axis, and any rotation lives in the rigid transforms of the registration
module.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Point3:
    """A position in physical space, millimeters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        # normalize numpy scalars so repr / JSON stay plain
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "z", float(self.z))
        for c in (self.x, self.y, self.z):
            if not math.isfinite(c):
                raise ValueError(f"non-finite coordinate in {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Point3":
        return Point3(float(a[0]), float(a[1]), float(a[2]))

    def distance_to(self, other: "Point3") -> float:
        return float(np.linalg.norm(self.as_array() - other.as_array()))


class LesionClass(enum.Enum):
    TARGET = "target"
    NON_TARGET = "non-target"

    @staticmethod
    def parse(text: str) -> "LesionClass":
        t = text.strip().lower()
        if t == "target":
            return LesionClass.TARGET
        if t in ("non-target", "nontarget", "non_target"):
            return LesionClass.NON_TARGET
        raise ValueError(f"unknown lesion class {text!r}")


@dataclass(frozen=True)
class LesionAnnotation:
    """One reader's mark on one series at one timepoint."""

    centroid: Point3
    lesion_class: LesionClass
    reader_id: str
    series_id: str
    timepoint_id: str
    source_label: str

    def __post_init__(self):
        if not self.source_label:
            raise ValueError("source_label must be non-empty")

    @property
    def key(self) -> tuple:
        """Identity of the annotation within one patient dataset."""
        return (self.reader_id, self.series_id, self.timepoint_id,
                self.source_label, self.lesion_class.value)

    @property
    def order_key(self) -> tuple:
        """Deterministic ordering used when new tracks are opened."""
        return (self.timepoint_id, self.series_id, self.reader_id, self.source_label)


_NAME_RE = re.compile(r"^(G|NG)([1-9][0-9]*)$")


def canonical_name(lesion_class: LesionClass, index: int) -> str:
    """Track name for the given class and 1-based index (G3, NG1, ...)."""
    if index < 1:
        raise ValueError("track indices start at 1")
    prefix = "G" if lesion_class is LesionClass.TARGET else "NG"
    return f"{prefix}{index}"


def parse_canonical_name(name: str) -> tuple[LesionClass, int]:
    m = _NAME_RE.match(name)
    if m is None:
        raise ValueError(f"invalid track name {name!r}")
    cls = LesionClass.TARGET if m.group(1) == "G" else LesionClass.NON_TARGET
    return cls, int(m.group(2))


@dataclass(frozen=True)
class Observation:
    """An annotation together with its centroid expressed in the track's reference frame."""

    annotation: LesionAnnotation
    mapped_centroid: Point3


@dataclass(frozen=True)
class LesionTrack:
    """A canonical lesion: one name, all observations merged into it.

    ``reference_centroid`` is the arithmetic mean of the member observations'
    mapped centroids; it is the representative position used when further
    observations are matched against the track.
    """

    name: str
    lesion_class: LesionClass
    observations: tuple[Observation, ...]
    reference_centroid: Point3

    def __post_init__(self):
        cls, _ = parse_canonical_name(self.name)
        if cls is not self.lesion_class:
            raise ValueError(f"name {self.name} does not match class {self.lesion_class}")
        seen = set()
        for obs in self.observations:
            if obs.annotation.lesion_class is not self.lesion_class:
                raise ValueError("observation class differs from track class")
            slot = (obs.annotation.reader_id, obs.annotation.series_id,
                    obs.annotation.timepoint_id)
            if slot in seen:
                raise ValueError(f"duplicate observation slot {slot} in track {self.name}")
            seen.add(slot)

    @staticmethod
    def build(name: str, lesion_class: LesionClass,
              observations: tuple[Observation, ...]) -> "LesionTrack":
        """Construct with the reference centroid recomputed from the observations."""
        pts = np.array([o.mapped_centroid.as_array() for o in observations])
        return LesionTrack(name, lesion_class, tuple(observations),
                           Point3.from_array(pts.mean(axis=0)))


@dataclass(frozen=True)
class TrackRegistry:
    """All tracks known for one patient, plus the next free name indices.

    Immutable: merging operations return new registries.
    """

    patient_id: str
    tracks: tuple[LesionTrack, ...] = ()
    next_target_index: int = 1
    next_nontarget_index: int = 1

    def __post_init__(self):
        names = [t.name for t in self.tracks]
        if len(names) != len(set(names)):
            raise ValueError("duplicate track names in registry")
        for t in self.tracks:
            _, idx = parse_canonical_name(t.name)
            limit = (self.next_target_index if t.lesion_class is LesionClass.TARGET
                     else self.next_nontarget_index)
            if idx >= limit:
                raise ValueError(f"track {t.name} exceeds next free index {limit}")

    def track_named(self, name: str) -> LesionTrack:
        for t in self.tracks:
            if t.name == name:
                return t
        raise KeyError(name)

    def track_of_annotation(self, annotation: LesionAnnotation) -> LesionTrack | None:
        for t in self.tracks:
            for obs in t.observations:
                if obs.annotation.key == annotation.key:
                    return t
        return None

    def tracks_of_class(self, lesion_class: LesionClass) -> tuple[LesionTrack, ...]:
        return tuple(t for t in self.tracks if t.lesion_class is lesion_class)

    def next_index(self, lesion_class: LesionClass) -> int:
        return (self.next_target_index if lesion_class is LesionClass.TARGET
                else self.next_nontarget_index)


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid. ``data`` has shape (nx, ny, nz), indexed data[i, j, k].

    ``origin`` is the physical position of the center of voxel (0, 0, 0);
    serialization uses x-fastest (Fortran) voxel order.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: Point3

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3-D and non-empty, got shape {data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing_array(self) -> np.ndarray:
        return np.array(self.spacing, dtype=float)

    def same_grid_as(self, other: "Volume") -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin.as_array(), other.origin.as_array()))

    def intensity_range(self) -> tuple[float, float]:
        return float(self.data.min()), float(self.data.max())


def voxel_to_physical(v: Volume, index) -> Point3:
    """Physical position of a (possibly fractional, possibly out-of-grid) index."""
    idx = np.asarray(index, dtype=float)
    return Point3.from_array(v.origin.as_array() + idx * v.spacing_array)


def physical_to_voxel(v: Volume, p: Point3) -> tuple[float, float, float]:
    """Exact inverse of :func:`voxel_to_physical`; returns fractional indices."""
    idx = (p.as_array() - v.origin.as_array()) / v.spacing_array
    return (float(idx[0]), float(idx[1]), float(idx[2]))


def voxel_to_physical_array(v: Volume, indices: np.ndarray) -> np.ndarray:
    """Vectorized mapping of an (N, 3) index array to physical coordinates."""
    return v.origin.as_array()[None, :] + np.asarray(indices, dtype=float) * v.spacing_array[None, :]


def physical_to_voxel_array(v: Volume, points: np.ndarray) -> np.ndarray:
    """Vectorized inverse mapping of an (N, 3) physical-coordinate array."""
    return (np.asarray(points, dtype=float) - v.origin.as_array()[None, :]) / v.spacing_array[None, :]


def voxel_center_extent(v: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Physical bounding box spanned by the voxel centers (lower, upper)."""
    lower = v.origin.as_array()
    upper = lower + (np.array(v.dims) - 1) * v.spacing_array
    return lower, upper


def contains_point(v: Volume, p: Point3) -> bool:
    """True if ``p`` falls within the voxel-center bounding box of ``v``."""
    idx = np.array(physical_to_voxel(v, p))
    return bool(np.all(idx >= 0) and np.all(idx <= np.array(v.dims) - 1))
