"""Discrete rotation-equivariant layers on icosahedral sphere meshes.

A feature map is an array indexed (vertex, orientation, channel).  Raw
spherical signals enter with a single orientation channel and are lifted by
`psi_layer` to N orientations, one per element of a cyclic group of in-plane
rotations.  Hidden layers (`phi_layer`, `one_by_one`) map N-orientation
feature maps to N-orientation feature maps.  Derivatives come from the
least-squares ring stencils in `stencil`; orientation is handled purely by
rotating operator coefficient 6-vectors, never by resampling the mesh.

Kernel functions (`psi_kernel`, `phi_kernel`, ...) accept arrays with
arbitrary leading batch axes; the FeatureMap wrappers are strict about shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .stencil import StencilSet

TWO_PI = 2.0 * np.pi


class CyclicGroup:
    """The cyclic group of n in-plane rotations A_i by angle 2*pi*i/n."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"cyclic group order must be >= 1, got {n}")
        self.n = int(n)
        self.angles = TWO_PI * np.arange(self.n) / self.n
        c, s = np.cos(self.angles), np.sin(self.angles)
        self.elements = np.zeros((self.n, 2, 2))
        self.elements[:, 0, 0] = c
        self.elements[:, 0, 1] = -s
        self.elements[:, 1, 0] = s
        self.elements[:, 1, 1] = c

    def add(self, i: int, j: int) -> int:
        return (i + j) % self.n

    def __repr__(self):
        return f"CyclicGroup(n={self.n})"


def coefficient_matrix(angle) -> np.ndarray:
    """6x6 matrix T(A) sending operator weights w to their A-rotated coefficients.

    Block structure: identity on w1, the 2x2 rotation on (w2, w3), and the
    conjugation A [[w4, w5/2], [w5/2, w6]] A^-1 re-flattened on (w4, w5, w6).
    Accepts scalar or batched angles: (...,) -> (..., 6, 6).
    """
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    t = np.zeros(angle.shape + (6, 6))
    t[..., 0, 0] = 1.0
    t[..., 1, 1] = c
    t[..., 1, 2] = -s
    t[..., 2, 1] = s
    t[..., 2, 2] = c
    t[..., 3, 3] = c * c
    t[..., 3, 4] = -c * s
    t[..., 3, 5] = s * s
    t[..., 4, 3] = 2.0 * c * s
    t[..., 4, 4] = c * c - s * s
    t[..., 4, 5] = -2.0 * c * s
    t[..., 5, 3] = s * s
    t[..., 5, 4] = c * s
    t[..., 5, 5] = c * c
    return t


def rotate_coefficients(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Coefficients of the operator whose derivative directions are pre-rotated by a.

    w: (..., 6) weight vectors, a: 2x2 rotation matrix.  Composition law:
    rotate(rotate(w, a), b) = rotate(w, b @ a).
    """
    a = np.asarray(a, dtype=float)
    angle = np.arctan2(a[1, 0], a[0, 0])
    w = np.asarray(w, dtype=float)
    return np.einsum("kl,...l->...k", coefficient_matrix(angle), w)


def orientation_coefficients(w: np.ndarray, group: CyclicGroup) -> np.ndarray:
    """Rotated coefficient table over all group elements: (..., 6) -> (n, ..., 6)."""
    t = coefficient_matrix(group.angles)  # (n, 6, 6)
    return np.einsum("ikl,...l->i...k", t, np.asarray(w, dtype=float))


def offset_gathered_table(table: np.ndarray, n: int) -> np.ndarray:
    """Re-index an (n, C_out, C_in, n, 6) offset table for the fused sum.

    Output t2[i, m, o, c, k] = table[i, o, c, (m - i) mod n, k], so the
    orientation-offset average collapses into one contraction over the
    input-orientation axis m instead of a roll per offset.
    """
    ii = np.arange(n)[:, None]
    mm = np.arange(n)[None, :]
    # advanced axes (0 and 3) land in front: result is (i, m, C_out, C_in, 6)
    return table[ii, :, :, (mm - ii) % n, :]


@dataclass
class FeatureMap:
    """Discrete feature map: values indexed (vertex, orientation, channel)."""

    values: np.ndarray
    mesh_level: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(
                f"feature map values must be (vertex, orientation, channel), got shape {self.values.shape}"
            )

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def n_orientations(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


def _check_level(fm: FeatureMap, stencils: StencilSet) -> None:
    if fm.mesh_level != stencils.mesh_level:
        raise ValueError(
            f"mesh level mismatch: feature map at {fm.mesh_level}, stencils at {stencils.mesh_level}"
        )


def psi_kernel(x: np.ndarray, w: np.ndarray, group: CyclicGroup, stencils: StencilSet) -> np.ndarray:
    """Lift spherical signals to oriented feature maps.

    x: (..., V, C_in), w: (C_out, C_in, 6) -> (..., V, n, C_out) where
    out[..., v, i, o] applies the A_i-rotated 6-vector w[o, c] to the value
    and stencil-estimated chart derivatives of channel c at vertex v.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 3 or w.shape[2] != 6:
        raise ValueError(f"psi weights must be (C_out, C_in, 6), got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} channels, weights expect {w.shape[1]}")
    g = stencils.features(x)  # (..., V, 6, C_in)
    table = orientation_coefficients(w, group)  # (n, C_out, C_in, 6)
    return np.einsum("...vkc,iock->...vio", g, table, optimize=True)


def phi_kernel(x: np.ndarray, w: np.ndarray, group: CyclicGroup, stencils: StencilSet) -> np.ndarray:
    """Oriented feature maps to oriented feature maps.

    x: (..., V, n, C_in), w: (C_out, C_in, n, 6).  Output entry (v, i, o)
    averages over orientation offsets j: the A_i-rotated 6-vector w[o, c, j]
    applied to the derivative stack of input slice (., (i+j) mod n, c),
    divided by n (unit total measure on the offset circle).
    """
    w = np.asarray(w, dtype=float)
    n = group.n
    if w.ndim != 4 or w.shape[2] != n or w.shape[3] != 6:
        raise ValueError(f"phi weights must be (C_out, C_in, {n}, 6), got {w.shape}")
    if x.shape[-2] != n:
        raise ValueError(f"input has {x.shape[-2]} orientations, group has {n}")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} channels, weights expect {w.shape[1]}")
    lead = x.shape[:-3]
    v = x.shape[-3]
    flat = x.reshape(lead + (v, n * x.shape[-1]))
    g = stencils.features(flat)  # (..., V, 6, n*C_in)
    g = g.reshape(lead + (v, 6, n, x.shape[-1]))
    table = orientation_coefficients(w, group)  # (i, C_out, C_in, j, 6)
    # one fused contraction over (component, input orientation, channel)
    t2 = offset_gathered_table(table, n)
    return np.einsum("...vkmc,imock->...vio", g, t2, optimize=True) / n


def one_hot_phi_weights(mix: np.ndarray, n: int) -> np.ndarray:
    """Weights under which phi_kernel degenerates to one_by_one_kernel.

    Each 6-vector is one-hot on the value component (no derivatives), and the
    offset profile is the point mass at offset zero; its weight n cancels the
    1/n of the normalized offset average, so orientations pass through
    untouched and only channels mix.
    """
    mix = np.asarray(mix, dtype=float)
    if mix.ndim != 2:
        raise ValueError(f"mix must be (C_out, C_in), got {mix.shape}")
    w = np.zeros(mix.shape + (n, 6))
    w[:, :, 0, 0] = n * mix
    return w


def one_by_one_kernel(x: np.ndarray, mix: np.ndarray) -> np.ndarray:
    """Stencil-free channel mixing; with a 3-axis mix also mixes orientation offsets.

    x: (..., V, n, C_in).  mix (C_out, C_in): per-orientation channel mixing.
    mix (C_out, C_in, n): out[..., i, o] = sum_{c,j} mix[o, c, j] x[..., (i+j) mod n, c].
    """
    mix = np.asarray(mix, dtype=float)
    if mix.ndim == 2:
        if x.shape[-1] != mix.shape[1]:
            raise ValueError(f"input has {x.shape[-1]} channels, mix expects {mix.shape[1]}")
        return np.einsum("...ic,oc->...io", x, mix)
    if mix.ndim == 3:
        n = x.shape[-2]
        if mix.shape[2] != n:
            raise ValueError(f"mix offset axis {mix.shape[2]} != {n} orientations")
        if x.shape[-1] != mix.shape[1]:
            raise ValueError(f"input has {x.shape[-1]} channels, mix expects {mix.shape[1]}")
        shifted = np.stack([np.roll(x, -j, axis=-2) for j in range(n)], axis=-1)
        return np.einsum("...icj,ocj->...io", shifted, mix)
    raise ValueError(f"mix must have 2 or 3 axes, got shape {mix.shape}")


def psi_layer(fm: FeatureMap, w: np.ndarray, group: CyclicGroup, stencils: StencilSet) -> FeatureMap:
    _check_level(fm, stencils)
    if fm.n_orientations != 1:
        raise ValueError(f"psi_layer expects a raw spherical input (1 orientation), got {fm.n_orientations}")
    out = psi_kernel(fm.values[:, 0, :], w, group, stencils)
    return FeatureMap(out, fm.mesh_level)


def phi_layer(fm: FeatureMap, w: np.ndarray, group: CyclicGroup, stencils: StencilSet) -> FeatureMap:
    _check_level(fm, stencils)
    if fm.n_orientations != group.n:
        raise ValueError(f"feature map has {fm.n_orientations} orientations, group has {group.n}")
    return FeatureMap(phi_kernel(fm.values, w, group, stencils), fm.mesh_level)


def one_by_one(fm: FeatureMap, mix: np.ndarray) -> FeatureMap:
    return FeatureMap(one_by_one_kernel(fm.values, mix), fm.mesh_level)


def relu(fm: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(fm.values, 0.0), fm.mesh_level)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (biased) variance pooled over every other axis."""
    axes = tuple(range(x.ndim - 1))
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_apply(x, mean, var, scale, bias, eps: float = 1e-5):
    return scale * (x - mean) / np.sqrt(var + eps) + bias


def orientation_batchnorm(
    fm: FeatureMap,
    scale: np.ndarray,
    bias: np.ndarray,
    *,
    training: bool,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[FeatureMap, np.ndarray, np.ndarray]:
    """Single scale and bias per channel; statistics pooled over vertex and orientation.

    Pooling the statistics over the orientation axis keeps the normalization
    independent of orientation relabelling.  Returns the normalized map and
    the updated running statistics (unchanged copies in inference mode).
    """
    c = fm.n_channels
    if running_mean is None:
        running_mean = np.zeros(c)
    if running_var is None:
        running_var = np.ones(c)
    if training:
        mean, var = channel_stats(fm.values)
        running_mean = (1.0 - momentum) * running_mean + momentum * mean
        running_var = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
    out = batchnorm_apply(fm.values, mean, var, scale, bias, eps)
    return FeatureMap(out, fm.mesh_level), np.array(running_mean), np.array(running_var)


def pool_matrix(pmap: list[np.ndarray], n_fine: int) -> sp.csr_matrix:
    """Sparse (V_coarse, V_fine) averaging matrix from an icomesh pool map."""
    rows, cols, vals = [], [], []
    for c, members in enumerate(pmap):
        rows.extend([c] * len(members))
        cols.extend(int(m) for m in members)
        vals.extend([1.0 / len(members)] * len(members))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pmap), n_fine))


def unpool_matrix(umap: list[list[tuple[int, float]]], n_coarse: int) -> sp.csr_matrix:
    """Sparse (V_fine, V_coarse) interpolation matrix from an icomesh unpool map."""
    rows, cols, vals = [], [], []
    for f, sources in enumerate(umap):
        for c, wgt in sources:
            rows.append(f)
            cols.append(int(c))
            vals.append(float(wgt))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(umap), n_coarse))


def apply_vertex_matrix(mat: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    """Apply a sparse (V_out, V_in) matrix along the vertex axis of (..., V_in, n, C)."""
    lead = x.shape[:-3]
    v_in, n, c = x.shape[-3:]
    out = mat @ x.reshape(-1, v_in, n * c).transpose(1, 0, 2).reshape(v_in, -1)
    out = out.reshape(mat.shape[0], -1, n * c).transpose(1, 0, 2)
    return out.reshape(lead + (mat.shape[0], n, c))


def avg_pool(fm: FeatureMap, mat: sp.csr_matrix, coarse_level: int) -> FeatureMap:
    if mat.shape[1] != fm.n_vertices:
        raise ValueError(f"pool matrix expects {mat.shape[1]} fine vertices, got {fm.n_vertices}")
    return FeatureMap(apply_vertex_matrix(mat, fm.values), coarse_level)


def unpool(fm: FeatureMap, mat: sp.csr_matrix, fine_level: int) -> FeatureMap:
    if mat.shape[1] != fm.n_vertices:
        raise ValueError(f"unpool matrix expects {mat.shape[1]} coarse vertices, got {fm.n_vertices}")
    return FeatureMap(apply_vertex_matrix(mat, fm.values), fine_level)
