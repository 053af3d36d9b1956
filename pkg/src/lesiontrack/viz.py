"""Static triaxial slice renderings with lesion markers.

Each figure shows the axial, sagittal, and coronal slice through a focus
point, with optional semi-transparent overlay of a second (registered)
volume and crosshair markers for lesions. Rendering is pure PIL with the
default bitmap font, so identical requests produce byte-identical files.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import OutOfBounds
from .model import (LesionClass, Point3, TrackRegistry, Volume, contains_point,
                    physical_to_voxel)
from .registration import identity_transform, resample
from .volume_io import sanitize_token

log = logging.getLogger(__name__)

_MARGIN = 8
_CAPTION_H = 14
# out-of-plane tolerance in voxels for drawing a marker on a slice
_MARKER_SLAB = 2

_CLASS_COLORS = {
    LesionClass.TARGET: (255, 0, 0),
    LesionClass.NON_TARGET: (0, 0, 0),
}


@dataclass(frozen=True)
class Marker:
    point: Point3
    label: str
    lesion_class: LesionClass


@dataclass(frozen=True)
class TriaxialRequest:
    volume: Volume
    focus: Point3
    out_path: Path
    overlay: Volume | None = None
    alpha: float = 0.5
    markers: tuple[Marker, ...] = ()
    window: tuple[float, float] | None = None

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        inside = contains_point(self.volume, self.focus) or (
            self.overlay is not None and contains_point(self.overlay, self.focus))
        if not inside:
            raise OutOfBounds(f"focus {self.focus} outside every volume")


def _window_bounds(data: np.ndarray,
                   window: tuple[float, float] | None) -> tuple[float, float]:
    if window is not None:
        lo, hi = float(window[0]), float(window[1])
    else:
        lo, hi = np.percentile(data, [1.0, 99.0])
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def _normalize(data: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip((data - lo) / (hi - lo), 0.0, 1.0)


def _zoom_factor(dims: tuple[int, int, int]) -> int:
    return max(1, 256 // max(dims))


def _panel_images(data: np.ndarray, slices: tuple[int, int, int], zoom: int):
    """Grayscale panel arrays (axial, sagittal, coronal), zoomed, row-major."""
    ix, iy, iz = slices
    panels = [data[:, :, iz].T, data[ix, :, :].T, data[:, iy, :].T]
    return [np.repeat(np.repeat(p, zoom, axis=0), zoom, axis=1) for p in panels]


def _to_pixel(value: float, zoom: int) -> int:
    return int(np.floor((value + 0.5) * zoom))


def _draw_marker(draw: ImageDraw.ImageDraw, px: int, py: int,
                 label: str, color, font) -> None:
    arm = 5
    draw.line([(px - arm, py), (px + arm, py)], fill=color, width=1)
    draw.line([(px, py - arm), (px, py + arm)], fill=color, width=1)
    if label:
        draw.text((px + 3, py + 3), label, fill=color, font=font)


def render_triaxial(req: TriaxialRequest) -> Path:
    """Render the three orthogonal slices through the focus point.

    The overlay, when present, is resampled onto the base grid (identity
    transform) if the grids differ, then alpha-blended after both volumes
    are normalized with the base volume's intensity window.
    """
    vol = req.volume
    base = np.asarray(vol.data)
    lo, hi = _window_bounds(base, req.window)
    composite = _normalize(base, lo, hi)

    if req.overlay is not None:
        ov = req.overlay
        same_grid = (ov.dims == vol.dims and ov.spacing == vol.spacing
                     and ov.origin == vol.origin)
        if not same_grid:
            ov = resample(ov, identity_transform(), vol)
        composite = ((1.0 - req.alpha) * composite
                     + req.alpha * _normalize(np.asarray(ov.data), lo, hi))

    focus_idx = physical_to_voxel(vol, req.focus)
    dims = vol.dims
    slices = tuple(int(np.clip(np.round(focus_idx[a]), 0, dims[a] - 1))
                   for a in range(3))
    zoom = _zoom_factor(dims)
    panels = _panel_images(composite, slices, zoom)
    captions = (f"axial z={slices[2]}", f"sagittal x={slices[0]}",
                f"coronal y={slices[1]}")
    # panel k displays these two voxel axes as (image x, image y)
    panel_axes = ((0, 1), (1, 2), (0, 2))
    normal_axis = (2, 0, 1)

    widths = [p.shape[1] for p in panels]
    heights = [p.shape[0] for p in panels]
    total_w = _MARGIN + sum(w + _MARGIN for w in widths)
    total_h = _MARGIN + _CAPTION_H + max(heights) + _MARGIN
    canvas = Image.new("RGB", (total_w, total_h), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()

    marker_voxels = []
    for m in req.markers:
        marker_voxels.append((physical_to_voxel(vol, m.point), m))

    x_cursor = _MARGIN
    for k, panel in enumerate(panels):
        gray = np.rint(panel * 255.0).astype(np.uint8)
        img = Image.fromarray(gray, mode="L").convert("RGB")
        draw.text((x_cursor, _MARGIN), captions[k], fill=(0, 0, 0), font=font)
        y0 = _MARGIN + _CAPTION_H
        canvas.paste(img, (x_cursor, y0))
        pdraw = ImageDraw.Draw(canvas)
        ax_x, ax_y = panel_axes[k]
        for idx, m in marker_voxels:
            if abs(round(idx[normal_axis[k]]) - slices[normal_axis[k]]) > _MARKER_SLAB:
                continue
            px = x_cursor + _to_pixel(idx[ax_x], zoom)
            py = y0 + _to_pixel(idx[ax_y], zoom)
            color = _CLASS_COLORS[m.lesion_class]
            _draw_marker(pdraw, px, py, m.label, color, font)
        x_cursor += panel.shape[1] + _MARGIN

    out = Path(req.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out, format=_format_for(out))
    return out


def _format_for(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    return {"png": "PNG", "bmp": "BMP", "tif": "TIFF", "tiff": "TIFF"} \
        .get(suffix, "PNG")


def render_track_sheet(registry: TrackRegistry,
                       volumes: Mapping[tuple[str, str], Volume],
                       out_dir, ext: str = "png") -> list[Path]:
    """One triaxial figure per observation, centered on its own centroid.

    Files are named <patient>_<track>_<timepoint>_<series>_<reader>.<ext>.
    Observations whose (timepoint, series) volume is missing are skipped
    with a log entry.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for track in registry.tracks:
        for obs in track.observations:
            a = obs.annotation
            vol = volumes.get((a.timepoint_id, a.series_id))
            if vol is None:
                log.warning("no volume for timepoint=%r series=%r; skipping %s",
                            a.timepoint_id, a.series_id, track.name)
                continue
            name = "_".join(sanitize_token(p) for p in (
                registry.patient_id, track.name, a.timepoint_id,
                a.series_id, a.reader_id)) + f".{ext}"
            req = TriaxialRequest(
                volume=vol, focus=a.centroid, out_path=out_dir / name,
                markers=(Marker(point=a.centroid, label=track.name,
                                lesion_class=track.lesion_class),))
            written.append(render_triaxial(req))
    return written
