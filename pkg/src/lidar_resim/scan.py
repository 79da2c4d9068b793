"""Scan container and sensor beam-grid geometry.

A scan stores one measurement tuple per emitted beam: origin, direction,
range, intensity, drop flag, timestamp and the (beam, azimuth) grid index.
Dropped rays carry the sentinel range -1 and intensity 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, PoseTrack, interpolate_track

__all__ = ["DROPPED_RANGE", "Scan", "SensorConfig", "beam_grid"]

DROPPED_RANGE = -1.0


@dataclass(frozen=True)
class SensorConfig:
    """Spinning-sensor layout: one beam per (elevation, azimuth) pair."""

    elevations: np.ndarray  # radians, strictly increasing
    azimuth_count: int
    track: PoseTrack
    max_range: float = 120.0

    def __post_init__(self):
        elev = np.asarray(self.elevations, dtype=np.float64).reshape(-1)
        if elev.size == 0:
            raise ValueError("sensor needs at least one beam")
        if elev.size > 1 and not np.all(np.diff(elev) > 0):
            raise ValueError("elevations strictly increasing")
        if self.azimuth_count < 1:
            raise ValueError("azimuth count >= 1")
        object.__setattr__(self, "elevations", elev)
        elev.setflags(write=False)

    @property
    def n_beams(self) -> int:
        return int(self.elevations.size)

    def pose_at(self, t: float) -> Pose:
        return interpolate_track(self.track, t)


def beam_grid(sensor: SensorConfig, t: float):
    """World-frame ray origins/directions for every beam at time ``t``.

    Rays are ordered beam-major: flat index = beam * azimuth_count + azimuth.
    Returns (origins, directions, beam_idx, azimuth_idx).
    """
    pose = sensor.pose_at(t)
    az = 2.0 * np.pi * np.arange(sensor.azimuth_count) / sensor.azimuth_count
    elev = sensor.elevations
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(az), np.sin(az)
    dirs = np.empty((elev.size, az.size, 3))
    dirs[..., 0] = ce[:, None] * ca[None, :]
    dirs[..., 1] = ce[:, None] * sa[None, :]
    dirs[..., 2] = se[:, None] * np.ones_like(ca)[None, :]
    dirs = dirs.reshape(-1, 3) @ pose.rotation_matrix().T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    beam_idx = np.repeat(np.arange(elev.size), az.size)
    azimuth_idx = np.tile(np.arange(az.size), elev.size)
    return origins, dirs, beam_idx, azimuth_idx


@dataclass
class Scan:
    """One frame of LiDAR measurements on a fixed beam grid."""

    origins: np.ndarray      # (N, 3) m
    directions: np.ndarray   # (N, 3) unit
    ranges: np.ndarray       # (N,) m, DROPPED_RANGE where dropped
    intensities: np.ndarray  # (N,) in [0, 1]
    dropped: np.ndarray      # (N,) bool
    timestamps: np.ndarray   # (N,) s
    beam_idx: np.ndarray     # (N,)
    azimuth_idx: np.ndarray  # (N,)
    n_beams: int
    n_azimuths: int

    def __post_init__(self):
        n = self.ranges.shape[0]
        for name in ("origins", "directions", "intensities", "dropped",
                     "timestamps", "beam_idx", "azimuth_idx"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"scan field {name} length mismatch")
        if n != self.n_beams * self.n_azimuths:
            raise ValueError("ray count does not match beam grid")
        if np.any(~np.isfinite(self.ranges)):
            raise ValueError("scan contains non-finite ranges")
        if np.any(self.ranges[~self.dropped] <= 0):
            raise ValueError("non-dropped rays need positive range")

    def __len__(self) -> int:
        return int(self.ranges.shape[0])

    @property
    def time(self) -> float:
        return float(self.timestamps[0])

    def points(self, mask=None) -> np.ndarray:
        """World-space hit points of the returned (non-dropped) rays."""
        keep = ~self.dropped if mask is None else (~self.dropped & mask)
        return (self.origins[keep]
                + self.ranges[keep, None] * self.directions[keep])

    def range_grid(self) -> np.ndarray:
        return self.ranges.reshape(self.n_beams, self.n_azimuths)

    def intensity_grid(self) -> np.ndarray:
        return self.intensities.reshape(self.n_beams, self.n_azimuths)

    def drop_grid(self) -> np.ndarray:
        return self.dropped.reshape(self.n_beams, self.n_azimuths)

    @staticmethod
    def assemble(origins, directions, ranges, intensities, dropped, t,
                 beam_idx, azimuth_idx, n_beams, n_azimuths) -> "Scan":
        n = ranges.shape[0]
        ranges = np.where(dropped, DROPPED_RANGE, ranges)
        intensities = np.where(dropped, 0.0, intensities)
        return Scan(
            origins=np.asarray(origins, dtype=np.float64),
            directions=np.asarray(directions, dtype=np.float64),
            ranges=np.asarray(ranges, dtype=np.float64),
            intensities=np.asarray(intensities, dtype=np.float64),
            dropped=np.asarray(dropped, dtype=bool),
            timestamps=np.full(n, float(t)),
            beam_idx=np.asarray(beam_idx, dtype=np.int32),
            azimuth_idx=np.asarray(azimuth_idx, dtype=np.int32),
            n_beams=int(n_beams),
            n_azimuths=int(n_azimuths),
        )
