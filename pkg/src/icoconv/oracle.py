"""Closed-form reference values for chart derivatives and the continuous layers.

Every test function is a smooth function on R^3 with exact gradient and
Hessian, restricted to the unit sphere.  Chart derivatives at a rotation R
(base point P = R e3, in-plane angle gamma) follow the closed forms

    grad_i  = (R^T grad f(P))_i                       i = 1, 2
    hess_ij = (R^T Hess f(P) R)_ij - delta_ij (R^T grad f(P))_3

which are what the ring stencils estimate numerically.  On top of these sit
`exact_psi` (the orientation-lifting operator) and `exact_phi` (the
orientation-circle average of offset-weighted operators), evaluated without
any mesh so the discrete layers can be measured against them.

The catalog is closed under rotation: rotating a polynomial yields a
polynomial of the same degree with explicitly recomputed coefficients, and
the exponential / bump families rotate by moving their direction or center.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geom
from .ops import CyclicGroup, coefficient_matrix, orientation_coefficients, rotate_coefficients

TWO_PI = 2.0 * np.pi

Monomial = tuple[int, int, int]


def _poly_mul(p: dict, q: dict) -> dict:
    out: dict = {}
    for ea, ca in p.items():
        for eb, cb in q.items():
            key = (ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2])
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def _poly_pow(p: dict, k: int) -> dict:
    out = {(0, 0, 0): 1.0}
    for _ in range(k):
        out = _poly_mul(out, p)
    return out


class PolynomialField:
    """Trivariate polynomial; coeffs maps exponent triples to coefficients."""

    def __init__(self, coeffs: dict):
        self.coeffs = {e: float(c) for e, c in coeffs.items() if c != 0.0}
        if not self.coeffs:
            self.coeffs = {(0, 0, 0): 0.0}

    def value(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        out = np.zeros(pts.shape[:-1])
        for (i, j, k), c in self.coeffs.items():
            out += c * x**i * y**j * z**k
        return out

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        out = np.zeros(pts.shape)
        for (i, j, k), c in self.coeffs.items():
            if i:
                out[..., 0] += c * i * x ** (i - 1) * y**j * z**k
            if j:
                out[..., 1] += c * j * x**i * y ** (j - 1) * z**k
            if k:
                out[..., 2] += c * k * x**i * y**j * z ** (k - 1)
        return out

    def hessian(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        out = np.zeros(pts.shape + (3,))
        for (i, j, k), c in self.coeffs.items():
            if i >= 2:
                out[..., 0, 0] += c * i * (i - 1) * x ** (i - 2) * y**j * z**k
            if j >= 2:
                out[..., 1, 1] += c * j * (j - 1) * x**i * y ** (j - 2) * z**k
            if k >= 2:
                out[..., 2, 2] += c * k * (k - 1) * x**i * y**j * z ** (k - 2)
            if i and j:
                out[..., 0, 1] += c * i * j * x ** (i - 1) * y ** (j - 1) * z**k
            if i and k:
                out[..., 0, 2] += c * i * k * x ** (i - 1) * y**j * z ** (k - 1)
            if j and k:
                out[..., 1, 2] += c * j * k * x**i * y ** (j - 1) * z ** (k - 1)
        out[..., 1, 0] = out[..., 0, 1]
        out[..., 2, 0] = out[..., 0, 2]
        out[..., 2, 1] = out[..., 1, 2]
        return out

    def rotated(self, w: np.ndarray) -> "PolynomialField":
        # substitute x -> w^-1 x: variable l becomes the linear form column l of w
        w = np.asarray(w, dtype=float)
        forms = [
            {(1, 0, 0): w[0, l], (0, 1, 0): w[1, l], (0, 0, 1): w[2, l]} for l in range(3)
        ]
        out: dict = {}
        for (i, j, k), c in self.coeffs.items():
            term = _poly_mul(_poly_pow(forms[0], i), _poly_pow(forms[1], j))
            term = _poly_mul(term, _poly_pow(forms[2], k))
            for e, v in term.items():
                out[e] = out.get(e, 0.0) + c * v
        return PolynomialField(out)

    def scaled(self, factor: float) -> "PolynomialField":
        return PolynomialField({e: factor * c for e, c in self.coeffs.items()})


class ExpLinearField:
    """scale * exp(a . x)."""

    def __init__(self, a, scale: float = 1.0):
        self.a = np.asarray(a, dtype=float)
        self.scale = float(scale)

    def value(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.scale * np.exp(pts @ self.a)

    def gradient(self, pts):
        return self.value(pts)[..., None] * self.a

    def hessian(self, pts):
        return self.value(pts)[..., None, None] * np.outer(self.a, self.a)

    def rotated(self, w):
        return ExpLinearField(np.asarray(w, dtype=float) @ self.a, self.scale)

    def scaled(self, factor):
        return ExpLinearField(self.a, self.scale * factor)


class GaussianBumpField:
    """scale * exp(-kappa |x - center|^2)."""

    def __init__(self, center, kappa: float, scale: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.kappa = float(kappa)
        self.scale = float(scale)

    def value(self, pts):
        pts = np.asarray(pts, dtype=float)
        d = pts - self.center
        return self.scale * np.exp(-self.kappa * np.sum(d * d, axis=-1))

    def gradient(self, pts):
        pts = np.asarray(pts, dtype=float)
        d = pts - self.center
        return -2.0 * self.kappa * d * self.value(pts)[..., None]

    def hessian(self, pts):
        pts = np.asarray(pts, dtype=float)
        d = pts - self.center
        outer = d[..., :, None] * d[..., None, :]
        core = 4.0 * self.kappa**2 * outer - 2.0 * self.kappa * np.eye(3)
        return core * self.value(pts)[..., None, None]

    def rotated(self, w):
        return GaussianBumpField(np.asarray(w, dtype=float) @ self.center, self.kappa, self.scale)

    def scaled(self, factor):
        return GaussianBumpField(self.center, self.kappa, self.scale * factor)


class SumField:
    def __init__(self, fields: list):
        self.fields = list(fields)

    def value(self, pts):
        out = self.fields[0].value(pts)
        for f in self.fields[1:]:
            out = out + f.value(pts)
        return out

    def gradient(self, pts):
        out = self.fields[0].gradient(pts)
        for f in self.fields[1:]:
            out = out + f.gradient(pts)
        return out

    def hessian(self, pts):
        out = self.fields[0].hessian(pts)
        for f in self.fields[1:]:
            out = out + f.hessian(pts)
        return out

    def rotated(self, w):
        return SumField([f.rotated(w) for f in self.fields])

    def scaled(self, factor):
        return SumField([f.scaled(factor) for f in self.fields])


def rotate_fn(field, w: np.ndarray):
    """The field x -> field(w^-1 x): the rotation w acting on a spherical function."""
    return field.rotated(w)


def standard_catalog() -> list[tuple[str, object]]:
    """Named smooth test functions: monomials to degree 4, exponentials, bumps."""
    third = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
    return [
        ("one", PolynomialField({(0, 0, 0): 1.0})),
        ("x1", PolynomialField({(1, 0, 0): 1.0})),
        ("x3", PolynomialField({(0, 0, 1): 1.0})),
        ("x1x2", PolynomialField({(1, 1, 0): 1.0})),
        ("x3_sq", PolynomialField({(0, 0, 2): 1.0})),
        ("deg3", PolynomialField({(1, 1, 1): 1.0, (3, 0, 0): 0.5, (0, 2, 1): -0.4})),
        ("deg4", PolynomialField({(2, 0, 2): 1.0, (0, 1, 3): -0.7, (4, 0, 0): 0.3})),
        ("exp_z", ExpLinearField([0.0, 0.0, 1.0])),
        ("exp_mix", ExpLinearField([0.3, -0.5, 0.8])),
        ("bump_pole", GaussianBumpField([0.0, 0.0, 1.0], 2.0)),
        ("bump_tilted", GaussianBumpField(third, 3.0, 1.2)),
    ]


# ---------------------------------------------------------------------------
# chart derivatives

def _grad3(field, rot: np.ndarray) -> np.ndarray:
    return rot.T @ field.gradient(rot[:, 2])


def chart_grad(field, rot: np.ndarray) -> np.ndarray:
    """Exact first chart derivatives of the field at rotation rot (2-vector)."""
    rot = np.asarray(rot, dtype=float)
    return _grad3(field, rot)[:2]


def chart_hess(field, rot: np.ndarray) -> np.ndarray:
    """Exact second chart derivatives at rot: symmetric 2x2 with curvature correction."""
    rot = np.asarray(rot, dtype=float)
    p = rot[:, 2]
    g = _grad3(field, rot)
    m = rot.T @ field.hessian(p) @ rot
    return m[:2, :2] - g[2] * np.eye(2)


def chart_derivatives(field, rot: np.ndarray) -> np.ndarray:
    """(value, d1, d2, d11, d12, d22) of the field in the chart at rot."""
    rot = np.asarray(rot, dtype=float)
    g = chart_grad(field, rot)
    h = chart_hess(field, rot)
    v = field.value(rot[:, 2])
    return np.array([v, g[0], g[1], h[0, 0], h[0, 1], h[1, 1]])


def canonical_derivatives_grid(field, frames: np.ndarray) -> np.ndarray:
    """chart_derivatives in every canonical frame at once: (V, 3, 3) -> (V, 6)."""
    frames = np.asarray(frames, dtype=float)
    pts = frames[:, :, 2]
    vals = field.value(pts)
    g = np.einsum("vji,vj->vi", frames, field.gradient(pts))
    m = np.einsum("vji,vjk,vkl->vil", frames, field.hessian(pts), frames)
    out = np.empty((frames.shape[0], 6))
    out[:, 0] = vals
    out[:, 1] = g[:, 0]
    out[:, 2] = g[:, 1]
    out[:, 3] = m[:, 0, 0] - g[:, 2]
    out[:, 4] = m[:, 0, 1]
    out[:, 5] = m[:, 1, 1] - g[:, 2]
    return out


# ---------------------------------------------------------------------------
# finite-difference cross checks (tie the closed forms to the actual charts)

def fd_gradient(field, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    out = np.zeros(pts.shape)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        out[..., i] = (field.value(pts + e) - field.value(pts - e)) / (2.0 * h)
    return out


def fd_hessian(field, pts: np.ndarray, h: float = 1e-4) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    out = np.zeros(pts.shape + (3,))
    for i in range(3):
        for j in range(3):
            ei, ej = np.zeros(3), np.zeros(3)
            ei[i] = h
            ej[j] = h
            out[..., i, j] = (
                field.value(pts + ei + ej)
                - field.value(pts + ei - ej)
                - field.value(pts - ei + ej)
                + field.value(pts - ei - ej)
            ) / (4.0 * h * h)
    return out


def _chart_eval(field, frame: geom.ChartFrame, inplane: np.ndarray, x2: np.ndarray) -> float:
    return float(field.value(geom.chart_inverse(frame, inplane @ x2)))


def chart_fd_grad(field, rot: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """2D central differences of the chart representative built from geom's maps."""
    dec = geom.decompose(np.asarray(rot, dtype=float))
    frame = geom.frame_of_point(dec.point)
    a = dec.inplane
    out = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        out[i] = (_chart_eval(field, frame, a, e) - _chart_eval(field, frame, a, -e)) / (2.0 * h)
    return out


def chart_fd_hess(field, rot: np.ndarray, h: float = 1e-4) -> np.ndarray:
    dec = geom.decompose(np.asarray(rot, dtype=float))
    frame = geom.frame_of_point(dec.point)
    a = dec.inplane
    f0 = _chart_eval(field, frame, a, np.zeros(2))
    out = np.zeros((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        out[i, i] = (
            _chart_eval(field, frame, a, e) - 2.0 * f0 + _chart_eval(field, frame, a, -e)
        ) / (h * h)
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    out[0, 1] = out[1, 0] = (
        _chart_eval(field, frame, a, ex + ey)
        - _chart_eval(field, frame, a, ex - ey)
        - _chart_eval(field, frame, a, -ex + ey)
        + _chart_eval(field, frame, a, -ex - ey)
    ) / (4.0 * h * h)
    return out


# ---------------------------------------------------------------------------
# exact layer values

def exact_psi(field, w: np.ndarray, rot: np.ndarray) -> float:
    """Orientation-lifted operator value at rot: rotated 6-vector applied to
    the canonical-frame chart derivatives at the base point of rot."""
    dec = geom.decompose(np.asarray(rot, dtype=float))
    c = rotate_coefficients(np.asarray(w, dtype=float), dec.inplane)
    d = chart_derivatives(field, geom.frame_of_point(dec.point).pbar)
    return float(c @ d)


def exact_psi_grid(field, w: np.ndarray, frames: np.ndarray, group: CyclicGroup) -> np.ndarray:
    """exact_psi on the grid of canonical frames x group orientations: (V, n)."""
    d = canonical_derivatives_grid(field, frames)
    table = orientation_coefficients(np.asarray(w, dtype=float), group)  # (n, 6)
    return d @ table.T


@dataclass
class OrientationFamily:
    """Feature map on rotations: sum of angular profile x spatial field terms.

    terms: list of (profile, field) where profile maps in-plane angle arrays
    to arrays.  The value at a rotation with base point P and angle gamma is
    sum_k profile_k(gamma) * field_k(P).
    """

    terms: list[tuple[Callable, object]]

    def slice_at(self, psi: float):
        """The spherical function obtained by freezing the angle argument."""
        return SumField([f.scaled(float(t(np.array(psi)))) for t, f in self.terms])

    def terms_at(self, rot: np.ndarray) -> list[tuple[Callable, object]]:
        return self.terms

    def value(self, rot: np.ndarray) -> float:
        dec = geom.decompose(np.asarray(rot, dtype=float))
        return float(
            sum(float(t(np.array(dec.gamma))) * f.value(dec.point) for t, f in self.terms)
        )

    def sample_grid(self, frames: np.ndarray, group: CyclicGroup) -> np.ndarray:
        """Values on the (vertex, orientation) grid: (V, n)."""
        pts = np.asarray(frames, dtype=float)[:, :, 2]
        out = np.zeros((pts.shape[0], group.n))
        for t, f in self.terms:
            out += np.outer(f.value(pts), t(group.angles))
        return out


class RotatedFamily:
    """A rotation acting on an orientation family, in the convention the layer
    analysis uses: every angular slice is rotated as a spherical function and
    the slice labels are shifted by the in-plane angle the rotation induces at
    the evaluation point (the shift is held fixed while differentiating)."""

    def __init__(self, base: OrientationFamily, w: np.ndarray):
        self.base = base
        self.w = np.asarray(w, dtype=float)
        self.w_inv = self.w.T

    def terms_at(self, rot: np.ndarray) -> list[tuple[Callable, object]]:
        rot = np.asarray(rot, dtype=float)
        delta = geom.decompose(self.w_inv @ rot).gamma - geom.decompose(rot).gamma
        return [
            (lambda t, _p=profile, _d=delta: _p(t + _d), f.rotated(self.w))
            for profile, f in self.base.terms
        ]

    def value(self, rot: np.ndarray) -> float:
        return self.base.value(self.w_inv @ np.asarray(rot, dtype=float))


def exact_phi(weight_fn: Callable, fam, rot: np.ndarray, n_quad: int = 512) -> float:
    """Offset-circle average of rotated operators applied to the family slices.

    weight_fn maps an array of offset angles (n,) to weight 6-vectors (n, 6).
    The rectangle rule on the circle is spectrally accurate for smooth
    profiles; n_quad = 512 is far past convergence for the catalog families.
    The angular sums are folded into one effective 6-vector per spatial term,
    which is exact (pure reordering of the quadrature sum).
    """
    rot = np.asarray(rot, dtype=float)
    dec = geom.decompose(rot)
    frame = geom.frame_of_point(dec.point).pbar
    theta = TWO_PI * np.arange(n_quad) / n_quad
    wmat = np.asarray(weight_fn(theta), dtype=float)
    if wmat.shape != (n_quad, 6):
        raise ValueError(f"weight_fn must return shape ({n_quad}, 6), got {wmat.shape}")
    total = 0.0
    for profile, f in fam.terms_at(rot):
        b = (profile(dec.gamma + theta) @ wmat) / n_quad
        c = rotate_coefficients(b, dec.inplane)
        total += float(c @ chart_derivatives(f, frame))
    return total


def exact_phi_grid(
    weight_fn: Callable,
    fam: OrientationFamily,
    frames: np.ndarray,
    group: CyclicGroup,
    n_quad: int = 512,
) -> np.ndarray:
    """exact_phi on the (vertex, orientation) grid for a plain family: (V, n)."""
    theta = TWO_PI * np.arange(n_quad) / n_quad
    wmat = np.asarray(weight_fn(theta), dtype=float)
    if wmat.shape != (n_quad, 6):
        raise ValueError(f"weight_fn must return shape ({n_quad}, 6), got {wmat.shape}")
    tmats = coefficient_matrix(group.angles)  # (n, 6, 6)
    out = np.zeros((frames.shape[0], group.n))
    for profile, f in fam.terms:
        prof = profile(group.angles[:, None] + theta[None, :])  # (n, n_quad)
        b = prof @ wmat / n_quad  # (n, 6)
        c = np.einsum("ikl,il->ik", tmats, b)
        out += canonical_derivatives_grid(f, frames) @ c.T
    return out
