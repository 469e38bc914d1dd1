"""Least-squares derivative stencils on mesh charts.

For a vertex P with chart frame Pbar, every ring neighbor Q_i has chart
coordinates (x_i1, x_i2).  A smooth signal s pulled into the chart,
f_P = s o chart_inverse, admits the Taylor model

    f_P(x_i) - f_P(0) ~ x_i1 d1 + x_i2 d2
                        + x_i1^2/2 d11 + x_i1 x_i2 d12 + x_i2^2/2 d22,

so stacking one row (x_i1, x_i2, x_i1^2/2, x_i1*x_i2, x_i2^2/2) per neighbor
gives a design matrix V_P whose least-squares solution against the neighbor
differences estimates the derivative 5-vector (d1, d2, d11, d12, d22).  The
pseudo-inverse is taken through an SVD with relative cutoff 1e-10 rather than
normal equations: V_P mixes O(rho) and O(rho^2) columns and the normal
equations would square that imbalance.  Degree-5 rings make V_P square and
the "least squares" solve exact; the code path is identical.

Only the 1-ring is used, so first-derivative estimates carry O(rho^2) error
and second-derivative estimates O(rho) on smooth signals.

A StencilSet also exposes the stencils as sparse vertex-to-vertex operators
(`features` / `features_adjoint`) used by the layer arithmetic and its
backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import STENCIL_FORMAT_VERSION
from . import geom
from .icomesh import IcoMesh
from .ioutil import atomic_write_bytes, pack_header, unpack_header

SVD_RCOND = 1e-10
_IDENTITY_TOL = 1e-8

STENCIL_MAGIC = b"ICOSTNCL"

#: number of rows produced per vertex by `features`: value + 5 derivatives
N_FEATURES = 6


@dataclass
class VertexStencil:
    vertex: int
    neighbor_idx: np.ndarray
    pinv: np.ndarray  # (5, m)
    chart_xy: np.ndarray | None = None  # (m, 2); not stored in the disk cache


@dataclass
class StencilSet:
    mesh_level: int
    stencils: list[VertexStencil]
    _ops: list[sp.csr_matrix] | None = field(default=None, repr=False)
    _ops_t: list[sp.csr_matrix] | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.stencils)

    def _operators(self) -> list[sp.csr_matrix]:
        if self._ops is None:
            nv = self.n_vertices
            rows, cols, vals = [], [], []
            for st in self.stencils:
                m = len(st.neighbor_idx)
                rows.append(np.repeat(st.vertex, m + 1))
                cols.append(np.concatenate([st.neighbor_idx, [st.vertex]]))
                vals.append(np.concatenate([st.pinv, -st.pinv.sum(axis=1, keepdims=True)], axis=1))
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.stack([np.concatenate([v[k] for v in vals]) for k in range(5)])
            self._ops = [
                sp.csr_matrix((vals[k], (rows, cols)), shape=(nv, nv)) for k in range(5)
            ]
        return self._ops

    def features(self, x: np.ndarray) -> np.ndarray:
        """Stack the signal and its 5 estimated derivatives.

        x: (..., V, C) -> (..., V, 6, C) ordered (value, d1, d2, d11, d12, d22).
        """
        ops = self._operators()
        shape = x.shape
        nv = self.n_vertices
        flat = np.moveaxis(x.reshape(-1, nv, shape[-1]), 1, 0).reshape(nv, -1)
        stacked = np.stack([flat] + [op @ flat for op in ops])  # (6, V, B*C)
        out = stacked.reshape(N_FEATURES, nv, -1, shape[-1])
        return np.moveaxis(out, (0, 1), (2, 1)).reshape(*shape[:-1], N_FEATURES, shape[-1])

    def features_adjoint(self, g: np.ndarray) -> np.ndarray:
        """Transpose of `features`: (..., V, 6, C) -> (..., V, C)."""
        if self._ops_t is None:
            self._ops_t = [op.T.tocsr() for op in self._operators()]
        nv = self.n_vertices
        shape = g.shape
        flat = np.moveaxis(g.reshape(-1, nv, N_FEATURES, shape[-1]), 1, 0)
        flat = flat.reshape(nv, -1, N_FEATURES, shape[-1])
        out = flat[:, :, 0, :].reshape(nv, -1).copy()
        for k, op in enumerate(self._ops_t):
            out += op @ flat[:, :, k + 1, :].reshape(nv, -1)
        out = out.reshape(nv, -1, shape[-1])
        return np.moveaxis(out, 0, 1).reshape(*shape[:-2], shape[-1])


def design_matrix(chart_xy: np.ndarray) -> np.ndarray:
    """Taylor design matrix rows (x1, x2, x1^2/2, x1*x2, x2^2/2)."""
    x1, x2 = chart_xy[..., 0], chart_xy[..., 1]
    return np.stack([x1, x2, 0.5 * x1 * x1, x1 * x2, 0.5 * x2 * x2], axis=-1)


def build_stencils(mesh: IcoMesh) -> StencilSet:
    frames = geom.frames_of_points(mesh.vertices)
    degrees = np.array([len(r) for r in mesh.neighbors])
    pinvs: list[np.ndarray | None] = [None] * mesh.n_vertices
    charts: list[np.ndarray | None] = [None] * mesh.n_vertices

    for deg in np.unique(degrees):
        (vs,) = np.nonzero(degrees == deg)
        idx = np.stack([mesh.neighbors[v] for v in vs])
        local = np.einsum("vji,vnj->vni", frames[vs], mesh.vertices[idx])
        if np.any(local[:, :, 2] <= 0.0):
            bad = vs[np.argmin(local[:, :, 2].min(axis=1))]
            raise ValueError(f"neighbor outside chart domain at vertex {bad}")
        xy = local[:, :, :2]
        vmats = design_matrix(xy)  # (n, deg, 5)
        pinv = np.linalg.pinv(vmats, rcond=SVD_RCOND)  # (n, 5, deg)
        resid = np.abs(pinv @ vmats - np.eye(5)).max(axis=(1, 2))
        if np.any(resid > _IDENTITY_TOL):
            bad = vs[int(np.argmax(resid))]
            raise ValueError(f"rank-deficient stencil design matrix at vertex {bad}")
        for row, v in enumerate(vs):
            pinvs[v] = pinv[row]
            charts[v] = xy[row]

    stencils = [
        VertexStencil(vertex=v, neighbor_idx=np.asarray(mesh.neighbors[v]),
                      pinv=pinvs[v], chart_xy=charts[v])
        for v in range(mesh.n_vertices)
    ]
    return StencilSet(mesh_level=mesh.level, stencils=stencils)


def apply_stencil(st: VertexStencil, values: np.ndarray) -> np.ndarray:
    """Derivative 5-vector from (center value, then ring values in stencil order)."""
    values = np.asarray(values, dtype=float)
    m = st.pinv.shape[1]
    if values.shape != (m + 1,):
        raise ValueError(f"expected {m + 1} values (center first), got shape {values.shape}")
    return st.pinv @ (values[1:] - values[0])


def save_stencils(sset: StencilSet, path: str, seed: int | None = None) -> None:
    head = pack_header(
        {
            "format_version": STENCIL_FORMAT_VERSION,
            "tool_version": __import__("icoconv").__version__,
            "seed": seed,
            "mesh_level": sset.mesh_level,
            "n_vertices": sset.n_vertices,
        },
        STENCIL_MAGIC,
    )
    chunks = [head]
    for st in sset.stencils:
        m = len(st.neighbor_idx)
        chunks.append(np.uint32(m).tobytes())
        chunks.append(st.neighbor_idx.astype("<u4").tobytes())
        chunks.append(st.pinv.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_stencils(path: str) -> StencilSet:
    with open(path, "rb") as fh:
        payload = fh.read()
    head, off = unpack_header(payload, STENCIL_MAGIC)
    if head.get("format_version") != STENCIL_FORMAT_VERSION:
        raise ValueError(f"unsupported stencil format version: {head.get('format_version')}")
    stencils = []
    for v in range(head["n_vertices"]):
        m = int(np.frombuffer(payload, "<u4", count=1, offset=off)[0])
        off += 4
        idx = np.frombuffer(payload, "<u4", count=m, offset=off).astype(np.int64)
        off += 4 * m
        pinv = np.frombuffer(payload, "<f8", count=5 * m, offset=off).reshape(5, m).copy()
        off += 40 * m
        stencils.append(VertexStencil(vertex=v, neighbor_idx=idx, pinv=pinv))
    if off != len(payload):
        raise ValueError("trailing bytes in stencil cache")
    return StencilSet(mesh_level=head["mesh_level"], stencils=stencils)
