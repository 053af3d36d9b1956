"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own code paths: the
assignment oracle enumerates injections, the rotation oracle multiplies
3x3 matrices in pure Python, and the component oracle flood-fills with a
hand-rolled BFS.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from lesiontrack.model import (LesionAnnotation, LesionClass, LesionTrack,
                               Observation, Point3, TrackRegistry, Volume)


# ---------------------------------------------------------------- oracles

def brute_force_assignment(costs: np.ndarray) -> float:
    """Minimum total cost over all maximum-cardinality matchings.

    Enumerates every injection of the smaller index set into the larger.
    Exponential; fine for sizes <= 6.
    """
    n_rows, n_cols = costs.shape
    if n_rows == 0 or n_cols == 0:
        return 0.0
    best = math.inf
    if n_rows <= n_cols:
        for cols in itertools.permutations(range(n_cols), n_rows):
            total = sum(costs[r, c] for r, c in enumerate(cols))
            best = min(best, total)
    else:
        for rows in itertools.permutations(range(n_rows), n_cols):
            total = sum(costs[r, c] for c, r in enumerate(rows))
            best = min(best, total)
    return best


def mat3_mul(a, b):
    """Plain 3x3 matrix product on nested lists."""
    return [[sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)]
            for i in range(3)]


def rotation_oracle(a1: float, a2: float, a3: float):
    """Triple-product rotation built from scratch, matching the pinned
    sign layout of each single-axis factor."""
    c1, s1 = math.cos(a1), math.sin(a1)
    c2, s2 = math.cos(a2), math.sin(a2)
    c3, s3 = math.cos(a3), math.sin(a3)
    rx = [[1, 0, 0], [0, c1, s1], [0, -s1, c1]]
    ry = [[c2, 0, -s2], [0, 1, 0], [s2, 0, c2]]
    rz = [[c3, s3, 0], [-s3, c3, 0], [0, 0, 1]]
    return mat3_mul(mat3_mul(rx, ry), rz)


def flood_fill_components(mask: np.ndarray) -> list[int]:
    """Sizes of 6-connected true components, BFS, descending order."""
    seen = np.zeros(mask.shape, dtype=bool)
    sizes = []
    nx, ny, nz = mask.shape
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        count = 0
        while stack:
            x, y, z = stack.pop()
            count += 1
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                p = (x + dx, y + dy, z + dz)
                if (0 <= p[0] < nx and 0 <= p[1] < ny and 0 <= p[2] < nz
                        and mask[p] and not seen[p]):
                    seen[p] = True
                    stack.append(p)
        sizes.append(count)
    return sorted(sizes, reverse=True)


def blob_centroids_mm(volume: Volume, threshold: float) -> list[np.ndarray]:
    """Physical centroids of above-threshold components, brightest-first
    by size. Independent of the library's mask code."""
    mask = np.asarray(volume.data) > threshold
    seen = np.zeros(mask.shape, dtype=bool)
    blobs = []
    nx, ny, nz = mask.shape
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        voxels = []
        while stack:
            v = stack.pop()
            voxels.append(v)
            x, y, z = v
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                p = (x + dx, y + dy, z + dz)
                if (0 <= p[0] < nx and 0 <= p[1] < ny and 0 <= p[2] < nz
                        and mask[p] and not seen[p]):
                    seen[p] = True
                    stack.append(p)
        idx = np.array(voxels, dtype=float)
        centroid_idx = idx.mean(axis=0)
        origin = volume.origin.as_array()
        spacing = np.array(volume.spacing)
        blobs.append((len(voxels), origin + centroid_idx * spacing))
    blobs.sort(key=lambda t: -t[0])
    return [c for _, c in blobs]


# --------------------------------------------------------- small builders

def ann(x, y, z, cls=LesionClass.TARGET, reader="R1", series="S1",
        timepoint="Screening", label="T1") -> LesionAnnotation:
    return LesionAnnotation(centroid=Point3(x, y, z), lesion_class=cls,
                            reader_id=reader, series_id=series,
                            timepoint_id=timepoint, source_label=label)


def track_of(name, annotations, cls=None) -> LesionTrack:
    cls = cls or annotations[0].lesion_class
    return LesionTrack.build(name, cls, tuple(
        Observation(annotation=a, mapped_centroid=a.centroid)
        for a in annotations))


def registry_of(patient, tracks) -> TrackRegistry:
    """Registry from prebuilt tracks; next indices derived from the names."""
    tracks = tuple(tracks)
    nt = max((int(t.name[1:]) for t in tracks
              if t.name.startswith("G")), default=0) + 1
    nn = max((int(t.name[2:]) for t in tracks
              if t.name.startswith("NG")), default=0) + 1
    return TrackRegistry(patient_id=patient, tracks=tracks,
                         next_target_index=nt, next_nontarget_index=nn)


def tiny_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume:
    arr = np.asarray(data, dtype=float)
    return Volume(data=arr, spacing=tuple(spacing),
                  origin=Point3(*origin))
