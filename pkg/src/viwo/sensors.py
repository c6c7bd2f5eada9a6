"""Camera and vehicle measurement models.

Camera frame convention matches the body frame style (x forward along the
optical axis, y left, z up).  Normalized image coordinates are

    r_x = -p_y / p_x,   r_y = -p_z / p_x

so u grows to the right and v grows downward in the image.  The forward
distortion is radial (two coefficients):

    [u, v] = [cx + fx * rx * s,  cy + fy * ry * s],  s = 1 + k1 r^2 + k2 r^4

The vehicle velocity measurement stacks wheel-encoder longitudinal speed, a
model-based lateral velocity and a zero vertical pseudo-measurement.  Both
the measured vector and the predicted-measurement function are defined here;
the measurement Jacobian is the derivative of the latter, so residual and
linearization cannot get out of sync.
"""

from dataclasses import dataclass

import numpy as np

from . import geom
from .features import FeatureState
from .image import Image, PatchSet, intensity_residual


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


class ProjectionError(ValueError):
    pass


def _distort(rx, ry, intr):
    r2 = rx * rx + ry * ry
    s = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return rx * s, ry * s, s, r2


def project(bearing: np.ndarray, intr: CameraIntrinsics,
            require_in_image: bool = True):
    """Pixel position of a bearing plus the 2x2 bearing-tangent Jacobian.

    Returns ((u, v), J) with J = d[u,v]/d(bearing tangent).  Raises
    ProjectionError behind the camera or (optionally) outside the image.
    """
    p = geom.bearing_dir(bearing)
    if p[0] <= 1e-9:
        raise ProjectionError("bearing behind the camera")
    rx = -p[1] / p[0]
    ry = -p[2] / p[0]
    dx, dy, s, r2 = _distort(rx, ry, intr)
    u = intr.cx + intr.fx * dx
    v = intr.cy + intr.fy * dy
    if require_in_image and not (0.0 <= u <= intr.width - 1 and 0.0 <= v <= intr.height - 1):
        raise ProjectionError(f"projection ({u:.1f}, {v:.1f}) outside image")

    ds_dr2 = intr.k1 + 2.0 * intr.k2 * r2
    j_dist = np.array([
        [s + 2.0 * rx * rx * ds_dr2, 2.0 * rx * ry * ds_dr2],
        [2.0 * rx * ry * ds_dr2, s + 2.0 * ry * ry * ds_dr2],
    ])
    j_pix = np.array([[intr.fx, 0.0], [0.0, intr.fy]]) @ j_dist
    j_norm = np.array([
        [p[1] / p[0] ** 2, -1.0 / p[0], 0.0],
        [p[2] / p[0] ** 2, 0.0, -1.0 / p[0]],
    ])
    dp_dtan = -geom.skew(p) @ geom.projection_n(bearing)
    return (u, v), j_pix @ j_norm @ dp_dtan


def unproject(u: float, v: float, intr: CameraIntrinsics,
              max_iter: int = 20, tol: float = 1e-10) -> np.ndarray:
    """Bearing quaternion of a pixel (iterative distortion inversion)."""
    if not (0.0 <= u <= intr.width - 1 and 0.0 <= v <= intr.height - 1):
        raise ProjectionError("pixel outside image")
    dx = (u - intr.cx) / intr.fx
    dy = (v - intr.cy) / intr.fy
    rx, ry = dx, dy
    for _ in range(max_iter):
        ex, ey, s, r2 = _distort(rx, ry, intr)
        ex -= dx
        ey -= dy
        if ex * ex + ey * ey < tol * tol:
            break
        # Newton step with the exact forward-distortion Jacobian
        ds = intr.k1 + 2.0 * intr.k2 * r2
        j00 = s + 2.0 * rx * rx * ds
        j01 = 2.0 * rx * ry * ds
        j11 = s + 2.0 * ry * ry * ds
        det = j00 * j11 - j01 * j01
        if abs(det) < 1e-12:
            raise ProjectionError("distortion inversion singular")
        rx -= (j11 * ex - j01 * ey) / det
        ry -= (j00 * ey - j01 * ex) / det
    else:
        raise ProjectionError("distortion inversion did not converge")
    p = np.array([1.0, -rx, -ry])
    return geom.bearing_from_dir(p)


def camera_measurement_jacobian(f: FeatureState, patch: PatchSet,
                                pyramid: list[Image], intr: CameraIntrinsics,
                                level: int = 0):
    """Intensity residual rows and their bearing-tangent Jacobian for one feature.

    Chain: d(residual)/d[u,v] from patch gradients, then the projection chain
    d[u,v]/d(bearing tangent).  The inverse-depth column of the measurement is
    structurally zero and is not represented.  Returns (residual, H) or None
    when the feature is not measurable this frame.
    """
    try:
        (u, v), j_proj = project(f.bearing, intr)
    except ProjectionError:
        return None
    res = intensity_residual(patch, pyramid, (u, v), level)
    if res is None:
        return None
    residual, grad = res
    return residual, grad @ j_proj


def bearing_measurement(f: FeatureState, observed: np.ndarray):
    """Direct-bearing residual (2-vector) with identity tangent Jacobian."""
    residual = geom.s2_boxminus(observed, f.bearing)
    return residual, np.eye(2)


# --- vehicle velocity --------------------------------------------------------

@dataclass
class VehicleVelocityMeasurement:
    t: float
    v_x_m: float      # wheel-derived longitudinal speed [m/s]
    a_y_m: float      # lateral accelerometer channel [m/s^2]


@dataclass
class SideSlipGradient:
    rho_sg: float = 0.0   # [s^2/m]

    def __post_init__(self):
        if self.rho_sg < 0.0:
            raise ValueError("side-slip gradient must be non-negative")


def vehicle_velocity_measurement(v_x_m: float, a_y_m: float,
                                 rho_sg: float) -> np.ndarray:
    """Measured velocity vector: wheel speed, model lateral velocity, zero up."""
    return np.array([v_x_m, -rho_sg * a_y_m * v_x_m, 0.0])


def vehicle_predicted_measurement(vel: np.ndarray, v_x_m: float, a_y_m: float,
                                  rho_sg: float) -> np.ndarray:
    """Predicted measurement as a function of the body velocity state.

    The lateral component is anchored at the wheel measurement so the
    residual reduces to -(v_y + rho_sg a_y v_x), the single-track relation.
    """
    c = rho_sg * a_y_m
    return np.array([vel[0], vel[1] + c * (vel[0] - v_x_m), vel[2]])


def vehicle_measurement_jacobian(rho_sg: float, a_y_m: float) -> np.ndarray:
    """3x3 derivative of the predicted measurement w.r.t. body velocity."""
    h = np.eye(3)
    h[1, 0] = rho_sg * a_y_m
    return h
