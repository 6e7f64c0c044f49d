"""Object velocity estimation from masks and metric point maps.

For each object and frame, the pixels selected by the object's mask are
looked up in that frame's point map; their mean is the object's metric
centroid. Consecutive centroids give displacement and instantaneous speed:

    d[l] = ||c[l+1] - c[l]||_2        v[l] = d[l] * fps

An empty or fully-invalid mask yields an absent centroid; displacement and
speed next to an absent centroid are undefined rather than interpolated.
All arithmetic is float64 regardless of storage precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .trace import PointMap, VideoTrace, rle_decode


@dataclass
class VelocityTrack:
    """Per-object centroid/velocity sequences; None marks undefined entries."""

    object_id: str
    centroids: list[Optional[np.ndarray]]       # L entries, each (3,)
    displacements: list[Optional[float]]        # L-1 entries, meters
    velocities: list[Optional[float]]           # L-1 entries, m/s
    velocity_vectors: list[Optional[np.ndarray]]  # L-1 entries, m/s, unused downstream
    visible: list[bool]                         # L entries
    mass_kg: Optional[float] = None


def inverse_project(mask: np.ndarray, pmap: PointMap) -> np.ndarray:
    """World points at pixels where mask=1 and validity=1, as (n, 3) float64."""
    mask = np.asarray(mask)
    if mask.shape != pmap.shape:
        raise ValidationError(
            f"mask dimensions {mask.shape} do not match point map {pmap.shape}"
        )
    selected = (mask != 0) & pmap.validity
    return pmap.points[selected].astype(np.float64, copy=False)


def centroid(points: np.ndarray, use_median: bool = False) -> Optional[np.ndarray]:
    """Mean (or per-coordinate median) of a point set; None for the empty set."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return None
    if use_median:
        return np.median(points, axis=0)
    return points.mean(axis=0)


@dataclass
class VelocityFragments:
    displacements: list[Optional[float]]
    velocities: list[Optional[float]]
    velocity_vectors: list[Optional[np.ndarray]]


def velocity_sequence(
    centroids: Sequence[Optional[np.ndarray]], fps: float
) -> VelocityFragments:
    """Displacements and speeds between consecutive defined centroids."""
    if not fps > 0:
        raise ValidationError("fps: must be positive")
    if len(centroids) < 2:
        raise ValidationError("centroids: need at least 2 frames")
    displacements: list[Optional[float]] = []
    velocities: list[Optional[float]] = []
    vectors: list[Optional[np.ndarray]] = []
    for a, b in zip(centroids[:-1], centroids[1:]):
        if a is None or b is None:
            displacements.append(None)
            velocities.append(None)
            vectors.append(None)
            continue
        delta = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
        d = float(np.linalg.norm(delta))
        displacements.append(d)
        velocities.append(d * fps)
        vectors.append(delta * fps)
    return VelocityFragments(displacements, velocities, vectors)


def estimate_tracks(trace: VideoTrace, use_median: bool = False) -> list[VelocityTrack]:
    """One VelocityTrack per object, in object order."""
    tracks = []
    for obj in trace.objects:
        centroids: list[Optional[np.ndarray]] = []
        for mask_rle, pmap in zip(obj.masks, trace.point_maps):
            grid = rle_decode(mask_rle, trace.height, trace.width)
            points = inverse_project(grid, pmap)
            centroids.append(centroid(points, use_median=use_median))
        frag = velocity_sequence(centroids, trace.fps)
        tracks.append(
            VelocityTrack(
                object_id=obj.object_id,
                centroids=centroids,
                displacements=frag.displacements,
                velocities=frag.velocities,
                velocity_vectors=frag.velocity_vectors,
                visible=[c is not None for c in centroids],
                mass_kg=obj.mass_kg,
            )
        )
    return tracks


def tracks_to_payload(trace: VideoTrace, tracks: list[VelocityTrack]) -> dict:
    """JSON-ready structure mirroring VelocityTrack, null for undefined."""

    def opt_vec(v):
        return None if v is None else [float(x) for x in v]

    return {
        "video_id": trace.video_id,
        "fps": trace.fps,
        "tracks": [
            {
                "object_id": t.object_id,
                "mass_kg": t.mass_kg,
                "centroids": [opt_vec(c) for c in t.centroids],
                "displacements": [None if d is None else float(d) for d in t.displacements],
                "velocities": [None if v is None else float(v) for v in t.velocities],
                "velocity_vectors": [opt_vec(v) for v in t.velocity_vectors],
                "visible": list(t.visible),
            }
            for t in tracks
        ],
    }


def track_from_payload(entry: dict) -> VelocityTrack:
    """Rebuild a VelocityTrack from the JSON structure above."""

    def opt_arr(v):
        return None if v is None else np.asarray(v, dtype=np.float64)

    return VelocityTrack(
        object_id=entry["object_id"],
        centroids=[opt_arr(c) for c in entry["centroids"]],
        displacements=[None if d is None else float(d) for d in entry["displacements"]],
        velocities=[None if v is None else float(v) for v in entry["velocities"]],
        velocity_vectors=[opt_arr(v) for v in entry.get("velocity_vectors", [])],
        visible=list(entry["visible"]),
        mass_kg=entry.get("mass_kg"),
    )
