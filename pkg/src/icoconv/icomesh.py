"""Subdivided icosahedral meshes on the unit sphere.

Level 0 is the unit icosahedron built from golden-ratio rectangles with a
frozen vertex ordering (12 vertices, 20 faces).  Each subdivision splits every
face into four by inserting normalized edge midpoints, so level L has
10*4^L + 2 vertices, 20*4^L faces and 30*4^L edges.  The 12 original vertices
keep degree 5, all others have degree 6.  Vertex indices are stable across
levels: vertex i of level L-1 is vertex i of level L, and midpoints are
appended in lexicographic coarse-edge order, which makes the whole hierarchy
bit-for-bit reproducible.

Neighbor lists are ordered counterclockwise as seen from outside the sphere,
starting from the smallest neighbor index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import MESH_FORMAT_VERSION
from . import geom
from .ioutil import atomic_write_text, fmt17, header_dict

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_COORDS = np.array(
    [
        [-1.0, _GOLDEN, 0.0],
        [1.0, _GOLDEN, 0.0],
        [-1.0, -_GOLDEN, 0.0],
        [1.0, -_GOLDEN, 0.0],
        [0.0, -1.0, _GOLDEN],
        [0.0, 1.0, _GOLDEN],
        [0.0, -1.0, -_GOLDEN],
        [0.0, 1.0, -_GOLDEN],
        [_GOLDEN, 0.0, -1.0],
        [_GOLDEN, 0.0, 1.0],
        [-_GOLDEN, 0.0, -1.0],
        [-_GOLDEN, 0.0, 1.0],
    ]
)

_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)

MAX_LEVEL = 8


@dataclass
class IcoMesh:
    level: int
    vertices: np.ndarray  # (V, 3) unit vectors
    faces: np.ndarray  # (F, 3) vertex indices, outward counterclockwise
    neighbors: list[np.ndarray]  # per vertex, ordered ring

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def degree(self, v: int) -> int:
        return len(self.neighbors[v])


def _orient_faces_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip any face whose winding is clockwise when viewed from outside."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    det = np.einsum("ij,ij->i", np.cross(b - a, c - a), (a + b + c) / 3.0)
    out = faces.copy()
    flip = det < 0
    out[flip] = out[flip][:, [0, 2, 1]]
    return out


def _edge_keys(pairs: np.ndarray) -> np.ndarray:
    lo = np.minimum(pairs[:, 0], pairs[:, 1]).astype(np.int64)
    hi = np.maximum(pairs[:, 0], pairs[:, 1]).astype(np.int64)
    return (lo << 32) | hi


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Undirected edges as (min, max) rows in lexicographic order."""
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    keys = np.unique(_edge_keys(pairs))
    return np.stack([keys >> 32, keys & 0xFFFFFFFF], axis=1)


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One refinement step.  Returns (vertices, faces, midpoint_parents)."""
    edges = unique_edges(faces)
    edge_keys = _edge_keys(edges)
    nv = len(vertices)

    mids = vertices[edges[:, 0]] + vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_vertices = np.concatenate([vertices, mids])

    def midpoint_index(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return nv + np.searchsorted(edge_keys, _edge_keys(np.stack([u, v], axis=1)))

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab = midpoint_index(a, b)
    mbc = midpoint_index(b, c)
    mca = midpoint_index(c, a)
    children = np.stack(
        [
            np.stack([a, mab, mca], axis=1),
            np.stack([b, mbc, mab], axis=1),
            np.stack([c, mca, mbc], axis=1),
            np.stack([mab, mbc, mca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return new_vertices, children, edges


def _ring_neighbors(vertices: np.ndarray, faces: np.ndarray) -> list[np.ndarray]:
    """Ordered 1-rings from consistently wound faces.

    Each directed face edge (u -> v) appears exactly once, so the directed
    out-edges of a vertex enumerate its ring once.  Rings are then sorted by
    chart angle (counterclockwise from outside) and rotated to start at the
    smallest index.
    """
    nv = len(vertices)
    src = faces.reshape(-1)
    dst = faces[:, [1, 2, 0]].reshape(-1)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.bincount(src, minlength=nv)
    starts = np.concatenate([[0], np.cumsum(counts)])

    frames = geom.frames_of_points(vertices)
    rings: list[np.ndarray] = [None] * nv  # type: ignore[list-item]
    for deg in np.unique(counts):
        (vs,) = np.nonzero(counts == deg)
        idx = np.stack([dst[starts[v] : starts[v] + deg] for v in vs])
        coords = vertices[idx]  # (len(vs), deg, 3)
        local = np.einsum("vji,vnj->vni", frames[vs], coords)
        angles = np.arctan2(local[:, :, 1], local[:, :, 0])
        by_angle = np.take_along_axis(idx, np.argsort(angles, axis=1), axis=1)
        shift = np.argmin(by_angle, axis=1)
        pos = (shift[:, None] + np.arange(deg)[None, :]) % deg
        ring = np.take_along_axis(by_angle, pos, axis=1)
        for row, v in enumerate(vs):
            rings[v] = ring[row]
    return rings


def build_mesh(level: int) -> IcoMesh:
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"mesh level must be in [0, {MAX_LEVEL}], got {level}")
    vertices = _ICO_COORDS / np.linalg.norm(_ICO_COORDS, axis=1, keepdims=True)
    faces = _orient_faces_outward(vertices, _ICO_FACES)
    for _ in range(level):
        vertices, faces, _ = _subdivide(vertices, faces)
    mesh = IcoMesh(level=level, vertices=vertices, faces=faces,
                   neighbors=_ring_neighbors(vertices, faces))
    _validate(mesh)
    return mesh


def _validate(mesh: IcoMesh) -> None:
    nv, nf = mesh.n_vertices, len(mesh.faces)
    ne = len(unique_edges(mesh.faces))
    scale = 4 ** mesh.level
    if nv != 10 * scale + 2 or nf != 20 * scale or ne != 30 * scale:
        raise ValueError(f"mesh combinatorics broken at level {mesh.level}: V={nv} E={ne} F={nf}")
    degrees = np.array([len(r) for r in mesh.neighbors])
    if np.count_nonzero(degrees == 5) != 12 or not np.all((degrees == 5) | (degrees == 6)):
        raise ValueError("vertex degrees must be 5 (twelve vertices) or 6")


def edge_count(mesh: IcoMesh) -> int:
    return len(unique_edges(mesh.faces))


def vertex_areas(mesh: IcoMesh) -> np.ndarray:
    """Spherical area owned by each vertex, summing to 4*pi exactly.

    Each face contributes one third of its solid angle to each corner.  The
    solid angle of a spherical triangle (a, b, c) comes from the Van
    Oosterom-Strackee formula, which is exact for unit vectors.
    """
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    omega = 2.0 * np.arctan2(num, den)
    areas = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(areas, mesh.faces[:, k], omega / 3.0)
    return areas


def grid_scale(mesh: IcoMesh) -> float:
    """Mean over vertices of the mean chart radius of their neighbors."""
    return chart_radius_stats(mesh)[0]


def chart_radius_stats(mesh: IcoMesh) -> tuple[float, float]:
    """(mean, max) chart radius over all vertex/neighbor pairs."""
    frames = geom.frames_of_points(mesh.vertices)
    per_vertex = np.empty(mesh.n_vertices)
    worst = 0.0
    for v, ring in enumerate(mesh.neighbors):
        local = mesh.vertices[ring] @ frames[v]  # rows Q^T Pbar = (Pbar^T Q)^T
        radii = np.hypot(local[:, 0], local[:, 1])
        per_vertex[v] = radii.mean()
        worst = max(worst, radii.max())
    return float(per_vertex.mean()), float(worst)


def _check_levels(fine: IcoMesh, coarse: IcoMesh) -> None:
    if fine.level != coarse.level + 1:
        raise ValueError(
            f"expected consecutive levels, got fine={fine.level} coarse={coarse.level}"
        )


def pool_map(fine: IcoMesh, coarse: IcoMesh) -> list[np.ndarray]:
    """Per coarse vertex: its identical fine vertex followed by that vertex's fine ring."""
    _check_levels(fine, coarse)
    return [
        np.concatenate([[c], fine.neighbors[c]]) for c in range(coarse.n_vertices)
    ]


def unpool_map(coarse: IcoMesh, fine: IcoMesh) -> list[list[tuple[int, float]]]:
    """Per fine vertex: (coarse index, weight) interpolation sources.

    Inherited vertices copy their coarse value; midpoint vertices average the
    two endpoints of the coarse edge that spawned them.  The midpoint-to-edge
    assignment is reconstructed from the coarse faces (it is deterministic),
    then verified against the fine vertex positions.
    """
    _check_levels(fine, coarse)
    edges = unique_edges(coarse.faces)
    mids = coarse.vertices[edges[:, 0]] + coarse.vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    if not np.allclose(mids, fine.vertices[coarse.n_vertices :], atol=1e-12):
        raise ValueError("fine mesh is not the subdivision of the given coarse mesh")
    sources: list[list[tuple[int, float]]] = [
        [(c, 1.0)] for c in range(coarse.n_vertices)
    ]
    for a, b in edges:
        sources.append([(int(a), 0.5), (int(b), 0.5)])
    return sources


def to_json(mesh: IcoMesh, seed: int | None = None) -> str:
    doc = header_dict(MESH_FORMAT_VERSION, seed)
    vertex_rows = ",\n".join(
        "      [" + ", ".join(fmt17(x) for x in row) + "]" for row in mesh.vertices
    )
    neighbor_rows = ",\n".join(
        "      " + json.dumps([int(i) for i in ring]) for ring in mesh.neighbors
    )
    face_rows = ",\n".join("      " + json.dumps([int(i) for i in f]) for f in mesh.faces)
    return (
        "{\n"
        f'  "format_version": {doc["format_version"]},\n'
        f'  "tool_version": {json.dumps(doc["tool_version"])},\n'
        f'  "seed": {json.dumps(doc["seed"])},\n'
        f'  "level": {mesh.level},\n'
        '  "vertices": [\n' + vertex_rows + "\n  ],\n"
        '  "neighbors": [\n' + neighbor_rows + "\n  ],\n"
        '  "faces": [\n' + face_rows + "\n  ]\n"
        "}\n"
    )


def save_mesh(mesh: IcoMesh, path: str, seed: int | None = None) -> None:
    atomic_write_text(path, to_json(mesh, seed=seed))


def load_mesh(path: str) -> IcoMesh:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MESH_FORMAT_VERSION:
        raise ValueError(f"unsupported mesh format version: {doc.get('format_version')}")
    mesh = IcoMesh(
        level=int(doc["level"]),
        vertices=np.array(doc["vertices"], dtype=float),
        faces=np.array(doc["faces"], dtype=np.int64),
        neighbors=[np.array(r, dtype=np.int64) for r in doc["neighbors"]],
    )
    _validate(mesh)
    return mesh
