"""Rigid alignment of two volumes driven by a mutual-information metric.

The transform model is a 6-parameter rigid map about a fixed center point:

    T(p) = center + R(angles) @ (p - center) + translation

with R composed as Rx(a1) @ Ry(a2) @ Rz(a3). The metric is mutual
information over a joint intensity histogram built from a random subset of
fixed-volume voxels: the fixed intensity is hard-binned, the interpolated
moving intensity spreads over four bins through a cubic B-spline Parzen
window. Optimization is plain gradient descent with per-parameter scaling
(rotations measured by the arc they induce at the fixed-body radius) and a
step length that halves whenever a trial step fails to decrease the metric,
run over a coarse-to-fine pyramid.

Everything is deterministic: metric samples are drawn from a seeded
generator, re-drawn per pyramid level, and frozen while that level runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DivergedError,
    EmptyMask,
    GeometryError,
    InsufficientOverlap,
    InsufficientRange,
)
from .model import (
    LesionAnnotation,
    Point3,
    Volume,
    physical_to_voxel_array,
    voxel_to_physical_array,
)

_GIMBAL_EPS = 1e-9


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """3x3 rotation Rx(a1) @ Ry(a2) @ Rz(a3), angles in radians."""
    a1, a2, a3 = (float(a) for a in angles)
    ca, sa = math.cos(a1), math.sin(a1)
    cb, sb = math.cos(a2), math.sin(a2)
    cc, sc = math.cos(a3), math.sin(a3)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, sa], [0.0, -sa, ca]])
    ry = np.array([[cb, 0.0, -sb], [0.0, 1.0, 0.0], [sb, 0.0, cb]])
    rz = np.array([[cc, sc, 0.0], [-sc, cc, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def euler_angles(r: np.ndarray) -> tuple[float, float, float]:
    """Angles (a1, a2, a3) with rotation_matrix(angles) == r.

    a2 is taken in [-pi/2, pi/2]. At the gimbal singularity (|cos a2| ~ 0)
    a3 is fixed to 0 and a1 absorbs the remaining rotation.
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
        raise ValueError("matrix is not a proper rotation")
    sb = -r[0, 2]
    sb = min(1.0, max(-1.0, float(sb)))
    a2 = math.asin(sb)
    cb = math.cos(a2)
    if abs(cb) < _GIMBAL_EPS:
        sign = 1.0 if sb >= 0 else -1.0
        a1 = math.atan2(sign * r[1, 0], r[1, 1])
        return (a1, a2, 0.0)
    a1 = math.atan2(r[1, 2], r[2, 2])
    a3 = math.atan2(r[0, 1], r[0, 0])
    return (a1, a2, a3)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid map T(p) = center + R @ (p - center) + translation (mm)."""

    angles: tuple[float, float, float]
    translation: tuple[float, float, float]
    center: Point3

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        translation = tuple(float(t) for t in self.translation)
        if len(angles) != 3 or len(translation) != 3:
            raise ValueError("angles and translation must have 3 components")
        if not all(math.isfinite(v) for v in angles + translation):
            raise ValueError("transform parameters must be finite")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "translation", translation)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.angles)

    @property
    def parameters(self) -> np.ndarray:
        return np.array(self.angles + self.translation, dtype=float)


def identity_transform(center: Point3 = Point3(0.0, 0.0, 0.0)) -> RigidTransform:
    return RigidTransform((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), center)


def apply_transform(t: RigidTransform, p: Point3) -> Point3:
    r = t.rotation
    c = t.center.as_array()
    q = c + r @ (p.as_array() - c) + np.array(t.translation)
    return Point3.from_array(q)


def apply_transform_array(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply to an (N, 3) array of physical points."""
    r = t.rotation
    c = t.center.as_array()
    pts = np.asarray(points, dtype=float)
    return c[None, :] + (pts - c[None, :]) @ r.T + np.array(t.translation)[None, :]


def invert_transform(t: RigidTransform) -> RigidTransform:
    """Exact inverse about the same center: R' = R^T, t' = -R^T t."""
    r = t.rotation
    t_inv = -(r.T @ np.array(t.translation))
    return RigidTransform(euler_angles(r.T), tuple(t_inv), t.center)


def with_center(t: RigidTransform, new_center: Point3) -> RigidTransform:
    """Re-express the same point mapping about a different center."""
    r = t.rotation
    shift = t.center.as_array() - new_center.as_array()
    t_new = np.array(t.translation) + shift - r @ shift
    return RigidTransform(t.angles, tuple(t_new), new_center)


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equivalent to outer(inner(p)), expressed about outer's center."""
    ro, ri = outer.rotation, inner.rotation
    co = outer.center.as_array()
    inner_c = with_center(inner, outer.center)
    r = ro @ ri
    t = ro @ np.array(inner_c.translation) + np.array(outer.translation)
    return RigidTransform(euler_angles(r), tuple(t), Point3.from_array(co))


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid sharing the source volume's geometry."""

    mask: np.ndarray
    spacing: tuple[float, float, float]
    origin: Point3

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 3 or mask.dtype != bool:
            raise ValueError("mask must be a 3-D boolean array")
        mask = np.ascontiguousarray(mask)
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def voxel_count(self) -> int:
        return int(self.mask.sum())

    def _physical_points(self) -> np.ndarray:
        idx = np.argwhere(self.mask).astype(float)
        return self.origin.as_array()[None, :] + idx * np.array(self.spacing)[None, :]

    def centroid_mm(self) -> Point3:
        if self.voxel_count == 0:
            raise EmptyMask("mask has no voxels")
        return Point3.from_array(self._physical_points().mean(axis=0))

    def principal_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """(eigenvalues desc, eigenvector columns) of the second central moments."""
        pts = self._physical_points()
        if len(pts) == 0:
            raise EmptyMask("mask has no voxels")
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / len(pts)
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1]
        return vals[order], vecs[:, order]

    def bounding_radius_mm(self) -> float:
        """Largest distance from the centroid to any mask voxel center."""
        pts = self._physical_points()
        if len(pts) == 0:
            raise EmptyMask("mask has no voxels")
        centered = pts - pts.mean(axis=0)
        return float(np.sqrt((centered ** 2).sum(axis=1)).max())


def preprocess_mask(v: Volume, cfg: "RegistrationConfig | None" = None) -> BinaryMask:
    """Threshold at >= cfg.body_threshold, keep the largest 6-connected component."""
    threshold = (cfg.body_threshold if cfg is not None else -300.0)
    above = v.data >= threshold
    if not above.any():
        raise EmptyMask(f"no voxels at or above {threshold}")
    structure = ndimage.generate_binary_structure(3, 1)
    labels, n = ndimage.label(above, structure=structure)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    keep = int(np.argmax(counts))
    return BinaryMask(mask=labels == keep, spacing=v.spacing, origin=v.origin)


_DEGENERACY_RATIO = 1.05


def _is_degenerate(vals: np.ndarray) -> bool:
    # Near-equal eigenvalues leave the axis directions arbitrary.
    v1, v2, v3 = (float(x) for x in vals)
    tiny = max(v1, 0.0) * 1e-12 + 1e-30
    if v2 <= tiny:
        return True
    if v1 / v2 < _DEGENERACY_RATIO:
        return True
    if v3 <= tiny:
        return False
    return v2 / v3 < _DEGENERACY_RATIO


def initialize_transform(fixed_mask: BinaryMask, moving_mask: BinaryMask) -> RigidTransform:
    """Moment-based starting transform (fixed frame -> moving frame).

    Centroids set the translation; principal axes set the rotation unless
    either mask's moments are too isotropic to orient reliably, in which
    case the rotation falls back to identity.
    """
    c_f = fixed_mask.centroid_mm()
    c_m = moving_mask.centroid_mm()
    vals_f, vecs_f = fixed_mask.principal_axes()
    vals_m, vecs_m = moving_mask.principal_axes()
    if _is_degenerate(vals_f) or _is_degenerate(vals_m):
        angles = (0.0, 0.0, 0.0)
    else:
        m = vecs_m.copy()
        for k in range(3):
            if float(np.dot(m[:, k], vecs_f[:, k])) < 0:
                m[:, k] = -m[:, k]
        r = m @ vecs_f.T
        if np.linalg.det(r) < 0:
            m[:, 2] = -m[:, 2]
            r = m @ vecs_f.T
        angles = euler_angles(r)
    translation = tuple(c_m.as_array() - c_f.as_array())
    return RigidTransform(angles=angles, translation=translation, center=c_f)


# Fixed by the metric contract rather than exposed as configuration.
_MIN_VALID_SAMPLES = 25
_CONVERGENCE_WINDOW = 5
_MIN_STEP = 1e-8


@dataclass(frozen=True)
class RegistrationConfig:
    histogram_bins: int = 50
    sample_fraction: float = 0.10
    learning_rate: float = 0.1
    max_iterations: int = 1000
    convergence_tolerance: float = 1e-10
    shrink_factors: tuple[int, ...] = (2, 1, 1)
    smoothing_sigmas: tuple[float, ...] = (4.0, 2.0, 1.0)
    rng_seed: int = 0
    body_threshold: float = -300.0

    def __post_init__(self):
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be >= 2")
        if not (0 < self.sample_fraction <= 1):
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.learning_rate <= 0 or self.max_iterations < 1:
            raise ValueError("learning_rate must be positive, max_iterations >= 1")
        if self.convergence_tolerance <= 0:
            raise ValueError("convergence_tolerance must be positive")
        if len(self.shrink_factors) != len(self.smoothing_sigmas):
            raise ValueError("shrink_factors and smoothing_sigmas must pair up")
        if len(self.shrink_factors) == 0:
            raise ValueError("at least one pyramid level is required")
        if any(int(s) != s or s < 1 for s in self.shrink_factors):
            raise ValueError("shrink factors must be integers >= 1")
        if any(s < 0 for s in self.smoothing_sigmas):
            raise ValueError("smoothing sigmas must be >= 0")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be a non-negative integer")
        object.__setattr__(self, "shrink_factors", tuple(int(s) for s in self.shrink_factors))
        object.__setattr__(self, "smoothing_sigmas", tuple(float(s) for s in self.smoothing_sigmas))


def _bspline3(x: np.ndarray) -> np.ndarray:
    """Cubic B-spline kernel, support (-2, 2), partition of unity on unit shifts."""
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax < 1
    out[near] = (4.0 - 6.0 * ax[near] ** 2 + 3.0 * ax[near] ** 3) / 6.0
    far = (ax >= 1) & (ax < 2)
    out[far] = (2.0 - ax[far]) ** 3 / 6.0
    return out


class _MetricWorkspace:
    """Frozen sample set and histogram machinery for one volume pair.

    Samples are drawn once at construction from a generator seeded with
    (rng_seed, level_seed), so every evaluate() call sees the same sites and
    the metric is a deterministic function of the transform.
    """

    def __init__(self, fixed: Volume, moving: Volume, cfg: RegistrationConfig,
                 level_seed: int = 0):
        fmin, fmax = fixed.intensity_range()
        mmin, mmax = moving.intensity_range()
        if fmax <= fmin:
            raise InsufficientRange("fixed volume has a single intensity value")
        if mmax <= mmin:
            raise InsufficientRange("moving volume has a single intensity value")
        self.moving = moving
        self.bins = cfg.histogram_bins
        self.mdims = np.array(moving.dims, dtype=float)
        rng = np.random.default_rng([int(cfg.rng_seed), int(level_seed)])
        n = int(cfg.sample_fraction * fixed.data.size)
        dims = np.array(fixed.dims, dtype=float)
        idx = rng.random((n, 3)) * (dims - 1.0)[None, :]
        fixed_vals = ndimage.map_coordinates(fixed.data, idx.T, order=1, mode="nearest")
        self.points = voxel_to_physical_array(fixed, idx)
        fw = (fmax - fmin) / self.bins
        fb = np.floor((fixed_vals - fmin) / fw).astype(int)
        self.fixed_bins = np.clip(fb, 0, self.bins - 1)
        self.mmin = mmin
        self.mwidth = (mmax - mmin) / self.bins

    def evaluate(self, transform: RigidTransform) -> float:
        """Negated mutual information at the given transform."""
        q = apply_transform_array(transform, self.points)
        vox = physical_to_voxel_array(self.moving, q)
        inside = np.all((vox >= 0.0) & (vox <= self.mdims[None, :] - 1.0), axis=1)
        n_valid = int(inside.sum())
        if n_valid < _MIN_VALID_SAMPLES:
            raise InsufficientOverlap(
                f"only {n_valid} metric samples fall inside the moving volume")
        mv = ndimage.map_coordinates(self.moving.data, vox[inside].T, order=1,
                                     mode="nearest")
        fb = self.fixed_bins[inside]
        u = (mv - self.mmin) / self.mwidth - 0.5
        k0 = np.floor(u).astype(int)
        hist = np.zeros(self.bins * self.bins)
        for off in (-1, 0, 1, 2):
            k = k0 + off
            w = _bspline3(u - k)
            kc = np.clip(k, 0, self.bins - 1)
            hist += np.bincount(fb * self.bins + kc, weights=w,
                                minlength=self.bins * self.bins)
        p = hist.reshape(self.bins, self.bins) / n_valid
        pf = p.sum(axis=1)
        pm = p.sum(axis=0)
        nz = p > 0
        mi = float(np.sum(p[nz] * np.log(p[nz] / (pf[:, None] * pm[None, :])[nz])))
        return -mi


def mattes_mi(fixed: Volume, moving: Volume, transform: RigidTransform,
              cfg: RegistrationConfig = RegistrationConfig(),
              level_seed: int = 0) -> float:
    """Negated mutual information between fixed and transformed moving volume.

    Lower is better; the value is deterministic for fixed inputs and seed.
    """
    return _MetricWorkspace(fixed, moving, cfg, level_seed).evaluate(transform)


def _pyramid_level(v: Volume, shrink: int, sigma: float) -> Volume:
    """Smooth (sigma in voxels) then stride-downsample; origin is preserved."""
    data = v.data
    if sigma > 0:
        data = ndimage.gaussian_filter(data, sigma=sigma)
    if shrink > 1:
        data = data[::shrink, ::shrink, ::shrink]
    spacing = tuple(s * shrink for s in v.spacing)
    return Volume(data=np.ascontiguousarray(data), spacing=spacing, origin=v.origin)


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    final_metric: float
    iterations_per_level: tuple[int, ...]
    converged: bool
    metric_trace: tuple[float, ...]


_FD_DELTAS = np.array([1e-3, 1e-3, 1e-3, 1e-1, 1e-1, 1e-1])


def _minimize_level(objective, p0: np.ndarray, scale: np.ndarray,
                    cfg: RegistrationConfig):
    """Scaled gradient descent with step halving on non-improvement.

    The objective may raise InsufficientOverlap for trial points; those
    trials count as rejections. The step length persists across iterations
    and only ever shrinks, so descent is monotone.
    """

    def safe(params, fallback):
        try:
            return objective(params)
        except InsufficientOverlap:
            return fallback

    p = np.asarray(p0, dtype=float).copy()
    f_cur = objective(p)
    if not np.isfinite(f_cur):
        raise DivergedError("metric is not finite at the starting parameters")
    step = cfg.learning_rate
    trace: list[float] = []
    recent: list[float] = []
    converged = False
    for _ in range(cfg.max_iterations):
        grad = np.zeros(6)
        for d in range(6):
            delta = _FD_DELTAS[d]
            hi = p.copy()
            hi[d] += delta
            lo = p.copy()
            lo[d] -= delta
            grad[d] = (safe(hi, f_cur) - safe(lo, f_cur)) / (2.0 * delta)
        g_scaled = grad * scale
        g_norm = float(np.linalg.norm(g_scaled))
        improved = 0.0
        if g_norm > 0:
            direction = -g_scaled / g_norm
            while step > _MIN_STEP:
                trial = p + scale * direction * step
                f_trial = safe(trial, np.inf)
                if f_trial < f_cur:
                    if not np.isfinite(f_trial):
                        raise DivergedError("metric diverged during optimization")
                    improved = f_cur - f_trial
                    p, f_cur = trial, f_trial
                    break
                step *= 0.5
        trace.append(f_cur)
        recent.append(improved)
        if len(recent) > _CONVERGENCE_WINDOW:
            recent.pop(0)
        if len(recent) == _CONVERGENCE_WINDOW and \
                max(recent) < cfg.convergence_tolerance:
            converged = True
            break
        if g_norm == 0.0 or step <= _MIN_STEP:
            # No usable descent direction remains at this resolution.
            converged = True
            break
    return p, trace, converged


def register(fixed: Volume, moving: Volume,
             cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Estimate the rigid transform mapping fixed-frame points into the moving frame.

    Pipeline: body masks, moment-based initialization, then multi-resolution
    refinement of the mutual-information metric. The returned transform's
    center is the fixed body centroid.
    """
    fixed_mask = preprocess_mask(fixed, cfg)
    moving_mask = preprocess_mask(moving, cfg)
    init = initialize_transform(fixed_mask, moving_mask)
    center = init.center
    radius = max(fixed_mask.bounding_radius_mm(), 1.0)
    p = init.parameters
    trace_all: list[float] = []
    iterations: list[int] = []
    converged = False
    for level, (shrink, sigma) in enumerate(zip(cfg.shrink_factors,
                                                cfg.smoothing_sigmas)):
        fixed_l = _pyramid_level(fixed, shrink, sigma)
        moving_l = _pyramid_level(moving, shrink, sigma)
        workspace = _MetricWorkspace(fixed_l, moving_l, cfg, level_seed=level)
        h = float(np.mean(fixed_l.spacing))
        # One scaled unit moves every parameter by about one voxel of effect.
        scale = np.array([h / radius] * 3 + [h] * 3)

        def objective(params):
            t = RigidTransform(angles=tuple(params[:3]),
                               translation=tuple(params[3:]), center=center)
            return workspace.evaluate(t)

        p, trace, converged = _minimize_level(objective, p, scale, cfg)
        trace_all.extend(trace)
        iterations.append(len(trace))
    transform = RigidTransform(angles=tuple(p[:3]), translation=tuple(p[3:]),
                               center=center)
    return RegistrationResult(
        transform=transform,
        final_metric=float(trace_all[-1]),
        iterations_per_level=tuple(iterations),
        converged=converged,
        metric_trace=tuple(float(v) for v in trace_all),
    )


def resample(moving: Volume, transform: RigidTransform, reference: Volume) -> Volume:
    """Pull moving-volume intensities onto the reference grid.

    output(p) = moving(T(p)) by trilinear interpolation; points that map
    outside the moving voxel-center extent become 0.
    """
    nx, ny, nz = reference.dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(float)
    pts = voxel_to_physical_array(reference, idx)
    vox = physical_to_voxel_array(moving, apply_transform_array(transform, pts))
    mdims = np.array(moving.dims, dtype=float)
    inside = np.all((vox >= 0.0) & (vox <= mdims[None, :] - 1.0), axis=1)
    values = np.zeros(len(vox))
    if inside.any():
        values[inside] = ndimage.map_coordinates(
            moving.data, vox[inside].T, order=1, mode="nearest")
    return Volume(data=values.reshape(reference.dims), spacing=reference.spacing,
                  origin=reference.origin)


def map_lesion_centroids(result, annotations: Sequence[LesionAnnotation]) -> tuple[LesionAnnotation, ...]:
    """Map moving-frame annotations into the fixed frame; labels untouched.

    Accepts a RegistrationResult or a bare RigidTransform (fixed -> moving);
    centroids travel through the inverse, mirroring how resample pulls the
    moving volume into the fixed frame.
    """
    transform = result.transform if isinstance(result, RegistrationResult) else result
    inverse = invert_transform(transform)
    return tuple(replace(a, centroid=apply_transform(inverse, a.centroid))
                 for a in annotations)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice overlap of two masks on the same grid."""
    if a.mask.shape != b.mask.shape or a.spacing != b.spacing \
            or a.origin != b.origin:
        raise GeometryError("masks are on different grids")
    denom = int(a.mask.sum()) + int(b.mask.sum())
    if denom == 0:
        return 0.0
    return 2.0 * int((a.mask & b.mask).sum()) / denom
