"""Deterministic synthetic volumes with known lesions and known transforms.

Phantoms are CT-like by default (air -1000, body 0, lesions +100) so the
default body threshold works unmodified. Every generator is seeded; the same
spec and seed produce byte-identical volumes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import SpecError
from .model import (
    LesionAnnotation,
    LesionClass,
    LesionTrack,
    Observation,
    Point3,
    TrackRegistry,
    Volume,
    canonical_name,
    physical_to_voxel_array,
    voxel_to_physical_array,
)
from .registration import (
    RigidTransform,
    apply_transform,
    apply_transform_array,
    identity_transform,
    invert_transform,
    resample,
)
from .volume_io import AnnotationTable


@dataclass(frozen=True)
class PhantomLesion:
    center: Point3
    radius_mm: float
    intensity: float = 100.0
    lesion_class: LesionClass = LesionClass.TARGET


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    body_semi_axes: tuple[float, float, float] = (55.0, 50.0, 45.0)
    body_intensity: float = 0.0
    background_intensity: float = -1000.0
    lesions: tuple[PhantomLesion, ...] = ()
    noise_sigma: float = 2.0
    rng_seed: int = 0
    patient_id: str = "phantom"
    timepoint_id: str = "Screening"
    series_id: str = "A"
    reader_id: str = "R1"

    def __post_init__(self):
        if any(d < 2 for d in self.dims):
            raise SpecError("phantom dims must be at least 2 per axis")
        if any(s <= 0 for s in self.spacing):
            raise SpecError("spacing must be positive")
        if any(a <= 0 for a in self.body_semi_axes):
            raise SpecError("body semi-axes must be positive")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        half_extent = (np.array(self.dims) - 1) / 2 * np.array(self.spacing)
        if np.any(np.array(self.body_semi_axes) > half_extent):
            raise SpecError("body ellipsoid does not fit inside the volume")
        axes = np.array(self.body_semi_axes)
        for lesion in self.lesions:
            if lesion.radius_mm <= max(self.spacing):
                raise SpecError(
                    f"lesion radius {lesion.radius_mm} must exceed max spacing "
                    f"{max(self.spacing)} to be resolvable")
            # Conservative containment: scaled center norm plus scaled radius.
            scaled = np.linalg.norm(lesion.center.as_array() / axes)
            if scaled + lesion.radius_mm / axes.min() > 1.0:
                raise SpecError(f"lesion at {lesion.center} pokes outside the body")

    @property
    def origin(self) -> Point3:
        # Grid centered on the physical origin; the body sits at (0, 0, 0).
        start = -(np.array(self.dims) - 1) / 2 * np.array(self.spacing)
        return Point3(*start)


def _target_then_nontarget_labels(lesions: Sequence[PhantomLesion]) -> list[str]:
    counters = {LesionClass.TARGET: 0, LesionClass.NON_TARGET: 0}
    labels = []
    for lesion in lesions:
        counters[lesion.lesion_class] += 1
        prefix = "T" if lesion.lesion_class is LesionClass.TARGET else "N"
        labels.append(f"{prefix}{counters[lesion.lesion_class]}")
    return labels


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, AnnotationTable]:
    """Render the ellipsoid body, lesion spheres, and seeded Gaussian noise."""
    origin = spec.origin.as_array()
    axes = [origin[i] + np.arange(spec.dims[i]) * spec.spacing[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    data = np.full(spec.dims, float(spec.background_intensity))
    sa = spec.body_semi_axes
    body = (gx / sa[0]) ** 2 + (gy / sa[1]) ** 2 + (gz / sa[2]) ** 2 <= 1.0
    data[body] = spec.body_intensity
    for lesion in spec.lesions:
        c = lesion.center
        blob = ((gx - c.x) ** 2 + (gy - c.y) ** 2 + (gz - c.z) ** 2
                <= lesion.radius_mm ** 2)
        data[blob] = lesion.intensity
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        data = data + rng.normal(0.0, spec.noise_sigma, spec.dims)
    volume = Volume(data=data, spacing=spec.spacing, origin=spec.origin)
    rows = []
    for lesion, label in zip(spec.lesions, _target_then_nontarget_labels(spec.lesions)):
        rows.append((spec.patient_id, LesionAnnotation(
            centroid=lesion.center, lesion_class=lesion.lesion_class,
            reader_id=spec.reader_id, series_id=spec.series_id,
            timepoint_id=spec.timepoint_id, source_label=label)))
    return volume, AnnotationTable.build(rows)


def resample_with_background(moving: Volume, transform: RigidTransform,
                             reference: Volume, background: float) -> Volume:
    """Like registration.resample but out-of-bounds voxels take ``background``.

    Plain resample fills with 0, which reads as body tissue in CT-like
    phantoms; synthetic follow-up scans need air there instead.
    """
    out = resample(moving, transform, reference)
    nx, ny, nz = reference.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(float)
    pts = voxel_to_physical_array(reference, idx)
    vox = physical_to_voxel_array(moving, apply_transform_array(transform, pts))
    mdims = np.array(moving.dims, dtype=float)
    inside = np.all((vox >= 0.0) & (vox <= mdims[None, :] - 1.0), axis=1)
    data = out.data.copy().reshape(-1)
    data[~inside] = background
    return Volume(data=data.reshape(reference.dims), spacing=reference.spacing,
                  origin=reference.origin)


def transform_phantom(v: Volume, truth: AnnotationTable, t: RigidTransform,
                      out_grid: Volume | None = None,
                      background: float = -1000.0) -> tuple[Volume, AnnotationTable]:
    """Simulate re-acquiring the phantom in a rigidly moved frame.

    The volume is resampled through ``t`` (output(p) = v(t(p)), background
    outside the source extent); annotation centroids travel through t inverse
    so they stay glued to the resampled anatomy.
    """
    reference = out_grid if out_grid is not None else v
    moved = resample_with_background(v, t, reference, background)
    inverse = invert_transform(t)
    rows = []
    for patient_id, ann in truth.rows:
        mapped = apply_transform(inverse, ann.centroid)
        rows.append((patient_id, LesionAnnotation(
            centroid=mapped, lesion_class=ann.lesion_class, reader_id=ann.reader_id,
            series_id=ann.series_id, timepoint_id=ann.timepoint_id,
            source_label=ann.source_label)))
    return moved, AnnotationTable.build(rows)


def uniform_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    """One point drawn uniformly from a solid sphere of the given radius."""
    direction = rng.normal(size=3)
    norm = np.linalg.norm(direction)
    if norm == 0:
        return np.zeros(3)
    return direction / norm * radius * rng.random() ** (1.0 / 3.0)


@dataclass(frozen=True)
class LongitudinalPhantom:
    """A full synthetic patient: volumes, reader annotations, and ground truth."""

    patient_id: str
    table: AnnotationTable
    volumes: dict[tuple[str, str], Volume]
    truth: TrackRegistry
    frame_transforms: dict[tuple[str, str], RigidTransform]
    lesion_positions: dict[str, Point3]


def build_longitudinal_phantom(seed: int = 0, *,
                               patient_id: str = "phantom-01",
                               jitter_mm: float = 4.0,
                               dims: tuple[int, int, int] = (48, 48, 32),
                               spacing: tuple[float, float, float] = (3.5, 3.5, 3.5),
                               noise_sigma: float = 2.0) -> LongitudinalPhantom:
    """Two timepoints x two series x two readers over five known lesions.

    Four lesions (three targets, one non-target) persist through both
    timepoints; a fifth target appears only at Week 8. Each (timepoint,
    series) frame is a seeded rigid move of the anatomy frame (Screening
    series A is the anatomy frame itself); readers annotate every visible
    lesion with per-reader label order and jitter bounded by ``jitter_mm``.
    """
    deg = np.pi / 180.0
    rng = np.random.default_rng([int(seed), 0xC0FFEE])
    timepoints = ("Screening", "Week 8")
    series_ids = ("A", "B")
    readers = ("R1", "R2")

    persistent = {
        "L1": PhantomLesion(Point3(-40.0, -35.0, -14.0), 8.0),
        "L2": PhantomLesion(Point3(40.0, -35.0, 10.0), 8.0),
        "L3": PhantomLesion(Point3(-35.0, 40.0, 14.0), 8.0),
        "L4": PhantomLesion(Point3(35.0, 35.0, -14.0), 8.0,
                            lesion_class=LesionClass.NON_TARGET),
    }
    week8_only = {"L5": PhantomLesion(Point3(0.0, 0.0, 26.0), 8.0)}
    lesions_at = {
        "Screening": dict(persistent),
        "Week 8": {**persistent, **week8_only},
    }

    def draw_transform(max_deg: float, max_mm: float) -> RigidTransform:
        return RigidTransform(
            angles=tuple(rng.uniform(-max_deg * deg, max_deg * deg, 3)),
            translation=tuple(rng.uniform(-max_mm, max_mm, 3)),
            center=Point3(0.0, 0.0, 0.0))

    frame_transforms = {
        ("Screening", "A"): identity_transform(Point3(0.0, 0.0, 0.0)),
        ("Screening", "B"): draw_transform(3.0, 6.0),
        ("Week 8", "A"): draw_transform(4.0, 8.0),
        ("Week 8", "B"): draw_transform(4.0, 8.0),
    }

    volumes: dict[tuple[str, str], Volume] = {}
    for fi, (tp, series) in enumerate(sorted(frame_transforms)):
        spec = PhantomSpec(
            dims=dims, spacing=spacing, body_semi_axes=(70.0, 70.0, 45.0),
            lesions=tuple(lesions_at[tp].values()), noise_sigma=noise_sigma,
            rng_seed=int(np.random.SeedSequence([seed, 1, fi]).generate_state(1)[0]),
            patient_id=patient_id, timepoint_id=tp, series_id=series)
        anatomy, _ = generate_phantom(spec)
        volumes[(tp, series)] = resample_with_background(
            anatomy, frame_transforms[(tp, series)], anatomy,
            spec.background_intensity)

    rows = []
    truth_obs: dict[str, list[Observation]] = {uid: [] for uid in
                                               list(persistent) + list(week8_only)}
    for tp in timepoints:
        visible = lesions_at[tp]
        for series in series_ids:
            to_frame = invert_transform(frame_transforms[(tp, series)])
            for reader in readers:
                target_uids = [u for u, l in visible.items()
                               if l.lesion_class is LesionClass.TARGET]
                nontarget_uids = [u for u, l in visible.items()
                                  if l.lesion_class is LesionClass.NON_TARGET]
                shuffled = list(target_uids)
                rng.shuffle(shuffled)
                labels = {uid: f"T{i + 1}" for i, uid in enumerate(shuffled)}
                labels.update({uid: f"N{i + 1}" for i, uid
                               in enumerate(nontarget_uids)})
                for uid, lesion in visible.items():
                    pos = apply_transform(to_frame, lesion.center).as_array()
                    pos = pos + uniform_ball(rng, jitter_mm)
                    ann = LesionAnnotation(
                        centroid=Point3(*pos), lesion_class=lesion.lesion_class,
                        reader_id=reader, series_id=series, timepoint_id=tp,
                        source_label=labels[uid])
                    rows.append((patient_id, ann))
                    truth_obs[uid].append(
                        Observation(annotation=ann, mapped_centroid=lesion.center))

    counters = {LesionClass.TARGET: 0, LesionClass.NON_TARGET: 0}
    tracks = []
    all_lesions = {**persistent, **week8_only}
    for uid in ("L1", "L2", "L3", "L5", "L4"):
        cls = all_lesions[uid].lesion_class
        counters[cls] += 1
        tracks.append(LesionTrack.build(
            canonical_name(cls, counters[cls]), cls, tuple(truth_obs[uid])))
    truth = TrackRegistry(
        patient_id=patient_id, tracks=tuple(tracks),
        next_target_index=counters[LesionClass.TARGET] + 1,
        next_nontarget_index=counters[LesionClass.NON_TARGET] + 1)

    return LongitudinalPhantom(
        patient_id=patient_id,
        table=AnnotationTable.build(rows),
        volumes=volumes,
        truth=truth,
        frame_transforms=frame_transforms,
        lesion_positions={uid: l.center for uid, l in all_lesions.items()},
    )
