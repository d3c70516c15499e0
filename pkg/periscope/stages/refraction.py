"""
Apparent pupil size seen through the cornea.

The cornea is a single spherical refracting surface of radius R with the
pupil a flat disc H behind its apex. The trace runs in the meridional plane
(the plane holding the optical axis and the viewing direction). For a viewer
far away at angle θ to the optical axis, each of the two pupil edge points
in that plane is seen along the exit ray that leaves the cornea parallel to
the viewing direction. The edge appears on that line of sight, behind the
exit point by the reduced distance (in-eye path length over n). The observed
size is the separation of the two apparent edge points, calibrated so the
frontal view reads the true size.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.optimize import brentq

from periscope.errors import RefractionError
from periscope.models.pipeline import RefractionRow

logger = logging.getLogger(__name__)

CORNEA_RADIUS_MM = 8.0
CHAMBER_DEPTH_MM = 2.7
AQUEOUS_INDEX = 1.35
PUPIL_DIAMETER_MM = 4.0
MAX_ANGLE_DEG = 60.0

_SCAN_STEPS = 256
_MAX_SURFACE_ANGLE = 1.4     # rad from the apex, as seen from the centre of curvature


def refract(direction: np.ndarray, normal: np.ndarray, eta: float) -> np.ndarray:
    """Vector Snell refraction, `normal` facing the incoming ray; eta = n_in / n_out."""
    cos_i = -float(direction @ normal)
    sin2_t = eta * eta * (1.0 - cos_i * cos_i)
    if sin2_t > 1.0:
        raise RefractionError("total internal reflection at the corneal surface")
    cos_t = math.sqrt(1.0 - sin2_t)
    return eta * direction + (eta * cos_i - cos_t) * normal


class _EdgeTrace:
    """Rays from one pupil edge point out through the cornea, by surface angle φ.

    Coordinates: x lateral in the meridional plane, z outward along the
    optical axis, apex at the origin, centre of curvature at (0, -R).
    """

    def __init__(self, edge: np.ndarray, radius: float, index: float):
        self.edge = edge
        self.radius = radius
        self.index = index

    def exit_ray(self, phi: float) -> tuple[np.ndarray, np.ndarray, float]:
        """(surface point, exit direction, in-eye path length) for surface angle φ."""
        normal = np.array([math.sin(phi), math.cos(phi)])
        surface = np.array([0.0, -self.radius]) + self.radius * normal
        inside = surface - self.edge
        path = float(np.linalg.norm(inside))
        # the outward normal faces away from the incoming ray
        out = refract(inside / path, -normal, self.index)
        return surface, out, path

    def exit_angle(self, phi: float) -> float:
        try:
            _, out, _ = self.exit_ray(phi)
        except RefractionError:
            return math.nan
        return math.atan2(out[0], out[1])

    def surface_angle_for(self, theta: float, angle_deg: float) -> float:
        """Surface angle whose exit ray leaves along the viewing direction θ."""
        grid = np.linspace(-_MAX_SURFACE_ANGLE, _MAX_SURFACE_ANGLE, _SCAN_STEPS)
        misses = np.array([self.exit_angle(phi) - theta for phi in grid])
        for i in range(1, len(grid)):
            lo, hi = misses[i - 1], misses[i]
            if np.isfinite(lo) and np.isfinite(hi) and (lo < 0) != (hi < 0):
                return brentq(lambda phi: self.exit_angle(phi) - theta, grid[i - 1], grid[i], xtol=1e-14)
        raise RefractionError(f"no ray through the cornea leaves the pupil edge towards {angle_deg} deg")

    def apparent_point(self, theta: float, angle_deg: float) -> np.ndarray:
        surface, out, path = self.exit_ray(self.surface_angle_for(theta, angle_deg))
        return surface - (path / self.index) * out


def apparent_edge_separation(
    angle_deg: float, radius: float, depth: float, index: float, true_diameter: float,
) -> float:
    """Distance between the apparent positions of the two meridional pupil edges."""
    theta = math.radians(angle_deg)
    rho = true_diameter / 2
    near, far = (
        _EdgeTrace(np.array([side * rho, -depth]), radius, index).apparent_point(theta, angle_deg)
        for side in (1.0, -1.0)
    )
    return float(np.linalg.norm(near - far))


def refraction_apparent_size(
    view_angle_deg: float,
    radius: float = CORNEA_RADIUS_MM,
    depth: float = CHAMBER_DEPTH_MM,
    index: float = AQUEOUS_INDEX,
    true_diameter: float = PUPIL_DIAMETER_MM,
) -> tuple[float, float]:
    """(observed diameter in mm, error in percent of the true diameter)."""
    if not 0.0 <= view_angle_deg <= MAX_ANGLE_DEG:
        raise RefractionError(f"view angle must lie in [0, {MAX_ANGLE_DEG}] degrees, got {view_angle_deg}")
    if not 0 < depth < radius:
        raise RefractionError(f"chamber depth {depth} must lie inside the corneal radius {radius}")
    if (true_diameter / 2) ** 2 + (radius - depth) ** 2 >= radius * radius:
        raise RefractionError("pupil does not fit inside the corneal sphere")
    ratio = (
        apparent_edge_separation(view_angle_deg, radius, depth, index, true_diameter)
        / apparent_edge_separation(0.0, radius, depth, index, true_diameter)
    )
    observed = true_diameter * ratio
    return observed, (observed - true_diameter) / true_diameter * 100.0


def refraction_table(angles_deg: list[float], **optics: float) -> list[RefractionRow]:
    true_diameter = optics.get("true_diameter", PUPIL_DIAMETER_MM)
    rows = []
    for angle in angles_deg:
        observed, error = refraction_apparent_size(angle, **optics)
        rows.append(RefractionRow(angle_deg=angle, actual_mm=true_diameter, observed_mm=observed, error_pct=error))
    logger.info("Refraction table: %d angles", len(rows))
    return rows


def parse_angle_range(text: str) -> list[float]:
    """'start:stop:step' inclusive of stop, or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [start + i * step for i in range(count)]
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise RefractionError(f"cannot parse angle range {text!r}: {exc}") from exc
