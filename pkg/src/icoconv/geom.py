"""Rotation geometry on the unit sphere.

Rotations are parameterized in ZYZ Euler form, R = Z(alpha) Y(beta) Z(gamma),
where Z rotates about the z-axis and Y about the y-axis.  Every unit vector p
has a canonical frame (coset representative) Pbar = Z(alpha) Y(beta) with
Pbar @ n = p for the north pole n = (0, 0, 1); the residual Z(gamma) is the
in-plane rotation about p.  The frame defines a tangent-plane chart: chart
coordinates (x1, x2) with |x| < 1 map to Pbar @ (x1, x2, sqrt(1 - |x|^2)).

Angle conventions: alpha, gamma in [0, 2*pi), beta in [0, pi].  At the poles
(beta in {0, pi}) the alpha/gamma split is degenerate; we fix alpha = 0 and
put the whole residual angle into gamma.

All geometry is computed in 64-bit floats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORTH_POLE = np.array([0.0, 0.0, 1.0])
TWO_PI = 2.0 * np.pi

_UNIT_TOL = 1e-9
_ROT_TOL = 1e-9


def zrot(angle: float) -> np.ndarray:
    """Rotation by `angle` about the z-axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yrot(angle: float) -> np.ndarray:
    """Rotation by `angle` about the y-axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def inplane_rotation(gamma: float) -> np.ndarray:
    """2x2 rotation by `gamma` (the upper-left block of Z(gamma))."""
    c, s = np.cos(gamma), np.sin(gamma)
    return np.array([[c, -s], [s, c]])


def is_rotation(r: np.ndarray, tol: float = _ROT_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        return False
    return (
        np.allclose(r @ r.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) < tol
    )


def _check_unit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    if abs(p @ p - 1.0) > _UNIT_TOL:
        raise ValueError(f"point is not on the unit sphere: |p|^2 = {p @ p!r}")
    return p


def euler_angles_of_point(p: np.ndarray) -> tuple[float, float]:
    """ZYZ angles (alpha, beta) with Z(alpha) Y(beta) n = p.

    alpha in [0, 2*pi), beta in [0, pi].  Both poles get alpha = 0.
    Uses atan2 internally, which reproduces the arccos-based convention
    (alpha = arccos(p1 / hypot(p1, p2)) mirrored into the lower half plane)
    and is stable near p2 = 0.
    """
    p = _check_unit(p)
    alpha = float(np.arctan2(p[1], p[0])) % TWO_PI
    beta = float(np.arccos(np.clip(p[2], -1.0, 1.0)))
    if p[0] == 0.0 and p[1] == 0.0:
        alpha = 0.0
    return alpha, beta


@dataclass(frozen=True)
class ChartFrame:
    """Canonical frame of a sphere point: pbar = Z(alpha) Y(beta), pbar @ n = base."""

    base: np.ndarray
    pbar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "pbar", np.asarray(self.pbar, dtype=float))


@dataclass(frozen=True)
class RotDecomp:
    """A rotation split as (point, in-plane rotation): R = Pbar(point) Z(gamma)."""

    point: np.ndarray
    gamma: float
    inplane: np.ndarray


def frame_of_point(p: np.ndarray) -> ChartFrame:
    """Canonical frame at p, assembled algebraically (no trig round-trip).

    With sb = hypot(p1, p2), cb = p3, (ca, sa) = (p1, p2) / sb the product
    Z(alpha) Y(beta) is exactly
        [[cb*ca, -sa, sb*ca],
         [cb*sa,  ca, sb*sa],
         [ -sb,   0,   cb ]].
    At the poles sb = 0 and we take (ca, sa) = (1, 0), matching alpha = 0.
    """
    p = _check_unit(p)
    sb = float(np.hypot(p[0], p[1]))
    cb = float(p[2])
    if sb == 0.0:
        ca, sa = 1.0, 0.0
    else:
        ca, sa = p[0] / sb, p[1] / sb
    pbar = np.array(
        [
            [cb * ca, -sa, sb * ca],
            [cb * sa, ca, sb * sa],
            [-sb, 0.0, cb],
        ]
    )
    return ChartFrame(base=p, pbar=pbar)


def frames_of_points(points: np.ndarray) -> np.ndarray:
    """Batched frame_of_point: (n, 3) unit vectors -> (n, 3, 3) frames."""
    points = np.asarray(points, dtype=float)
    sb = np.hypot(points[:, 0], points[:, 1])
    cb = points[:, 2]
    safe = sb > 0.0
    ca = np.where(safe, points[:, 0] / np.where(safe, sb, 1.0), 1.0)
    sa = np.where(safe, points[:, 1] / np.where(safe, sb, 1.0), 0.0)
    out = np.zeros((len(points), 3, 3))
    out[:, 0, 0] = cb * ca
    out[:, 0, 1] = -sa
    out[:, 0, 2] = sb * ca
    out[:, 1, 0] = cb * sa
    out[:, 1, 1] = ca
    out[:, 1, 2] = sb * sa
    out[:, 2, 0] = -sb
    out[:, 2, 2] = cb
    return out


def compose(point: np.ndarray, gamma: float) -> np.ndarray:
    """Rotation with canonical frame at `point` and in-plane angle `gamma`."""
    return frame_of_point(point).pbar @ zrot(gamma)


def decompose(r: np.ndarray) -> RotDecomp:
    """Split r as Pbar(point) Z(gamma).

    point = r @ n.  gamma is read off Z(gamma) = Pbar^T r; at the poles the
    frame has alpha = 0, so the whole residual angle lands in gamma.
    """
    r = np.asarray(r, dtype=float)
    if not is_rotation(r):
        raise ValueError("decompose expects a rotation matrix")
    point = r @ NORTH_POLE
    frame = frame_of_point(point)
    zg = frame.pbar.T @ r
    gamma = float(np.arctan2(zg[1, 0], zg[0, 0])) % TWO_PI
    return RotDecomp(point=point, gamma=gamma, inplane=inplane_rotation(gamma))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed rotation: alpha, gamma uniform, cos(beta) uniform."""
    alpha = rng.uniform(0.0, TWO_PI)
    gamma = rng.uniform(0.0, TWO_PI)
    beta = np.arccos(rng.uniform(-1.0, 1.0))
    return zrot(alpha) @ yrot(beta) @ zrot(gamma)


def chart_inverse(frame: ChartFrame, x: np.ndarray) -> np.ndarray:
    """Map chart coordinates x (|x| < 1) to the sphere: pbar @ (x1, x2, sqrt(1-|x|^2))."""
    x = np.asarray(x, dtype=float)
    r2 = float(x @ x)
    if r2 >= 1.0:
        raise ValueError(f"chart coordinates outside the open unit disk: |x|^2 = {r2}")
    return frame.pbar @ np.array([x[0], x[1], np.sqrt(1.0 - r2)])


def chart_forward(frame: ChartFrame, q: np.ndarray) -> np.ndarray:
    """Chart coordinates of q in `frame`; q must lie in the frame's open upper hemisphere."""
    q = _check_unit(q)
    y = frame.pbar.T @ q
    if y[2] <= 0.0:
        raise ValueError("point is outside the chart domain (non-positive third component)")
    return y[:2]
