"""
Range geometry shared by every algorithm module.

Sensor frame: x forward, y left, z up. The azimuth theta is measured
counterclockwise from the x axis and the vertical angle phi upwards from the
horizontal plane. Angles are degrees at the interface and radians only inside
the trigonometry.
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

import numpy as np


class GroundLabel(IntEnum):
    """Per-point label carried through ground segmentation"""

    INVALID = 0
    UNLABELED = 1
    GROUND = 2
    CHANGE = 3
    CHANGE_FOLLOW = 4
    UNCERTAIN = 5
    OBSTACLE = 6


PROVISIONAL_LABELS = (GroundLabel.CHANGE, GroundLabel.CHANGE_FOLLOW, GroundLabel.UNCERTAIN)


def to_cartesian(rho: float, phi: float, theta: float) -> Tuple[float, float, float, float]:
    """
    Convert one spherical return to Cartesian coordinates.

    Args:
        rho: range measure in meters (0 means no return)
        phi: vertical angle in degrees
        theta: azimuth in degrees

    Returns:
        (x, y, z, rho_xy)
    """
    phi_rad = np.radians(phi)
    theta_rad = np.radians(theta)
    rho_xy = rho * np.cos(phi_rad)
    z = rho * np.sin(phi_rad)
    x = rho_xy * np.cos(theta_rad)
    y = rho_xy * np.sin(theta_rad)
    return float(x), float(y), float(z), float(rho_xy)


def to_cartesian_arrays(rho, phi, theta):
    """Vectorised to_cartesian; inputs broadcast against each other"""
    rho = np.asarray(rho, dtype=np.float64)
    phi_rad = np.radians(np.asarray(phi, dtype=np.float64))
    theta_rad = np.radians(np.asarray(theta, dtype=np.float64))
    rho_xy = rho * np.cos(phi_rad)
    z = rho * np.sin(phi_rad)
    x = rho_xy * np.cos(theta_rad)
    y = rho_xy * np.sin(theta_rad)
    return x, y, z, rho_xy


@dataclass(slots=True)
class SphericalPoint:
    """One laser return at range-image cell (row, col)"""

    rho: float
    phi: float
    theta: float
    row: int
    col: int
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    rho_xy: float = 0.0
    label: GroundLabel = GroundLabel.UNLABELED

    def __post_init__(self):
        if self.rho <= 0.0:
            self.rho = 0.0
            self.label = GroundLabel.INVALID
        self.x, self.y, self.z, self.rho_xy = to_cartesian(self.rho, self.phi, self.theta)

    @property
    def is_valid(self):
        return self.rho > 0.0

    @property
    def xyz(self):
        return (self.x, self.y, self.z)


def wrap_degrees(angle):
    """Map any angle (scalar or array) into [0, 360)"""
    return np.mod(angle, 360.0)
