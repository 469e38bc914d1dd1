"""Datasets: analytic bump constellations and spherical digit projection.

The synthetic task is the self-contained workhorse: each class is a fixed
constellation of three Gaussian bumps whose relative geometry (separations,
sharpness, amplitudes) identifies the class, so membership survives arbitrary
rotation.  Samples are evaluated analytically at mesh vertices; the rotated
variant applies an independent Haar-random rotation per sample.

Digit ingestion reads standard IDX files and maps each 28x28 image onto the
sphere: the image is pasted on the tangent plane at the north pole with an
angular half-width of 60 degrees per side, pulled back by inverse gnomonic
projection, and bilinearly sampled at the (optionally pre-rotated) vertex
positions.  Pixel rows run top to bottom along -y, columns left to right
along +x.  This projection is a documented stand-in, not a byte-compatible
clone of any prior pipeline.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import DATASET_FORMAT_VERSION, __version__, geom, oracle
from .icomesh import build_mesh
from .ioutil import atomic_write_bytes, pack_header, unpack_header

DATASET_MAGIC = b"ICODSET\x00"
HALF_WIDTH = np.tan(np.deg2rad(60.0))  # tangent-plane half-extent of the image square


@dataclass
class LabeledSphereDataset:
    signals: np.ndarray  # (n, V, C)
    labels: np.ndarray  # (n,)
    mesh_level: int
    split: str = ""
    rotations: np.ndarray | None = None  # (n, 3, 3) when samples were pre-rotated

    def __post_init__(self):
        self.signals = np.asarray(self.signals)
        self.labels = np.asarray(self.labels)
        if self.signals.ndim == 2:
            self.signals = self.signals[..., None]
        if self.signals.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.signals.shape[0]} signals but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("dataset contains non-finite signal values")

    @property
    def n(self) -> int:
        return self.signals.shape[0]


# ---------------------------------------------------------------------------
# synthetic bump constellations

# class geometry: polar angles of bumps 2 and 3, azimuth of bump 3,
# concentrations, amplitudes.  Bump 1 sits at the pole of the canonical frame.
_CONSTELLATIONS = (
    {"t1": 0.35, "t2": 0.35, "az": 2.0944, "kappa": (8.0, 8.0, 8.0), "amp": (1.0, 1.0, 1.0)},
    {"t1": 0.90, "t2": 0.90, "az": 2.0944, "kappa": (8.0, 8.0, 8.0), "amp": (1.0, 1.0, 1.0)},
    {"t1": 0.50, "t2": 1.00, "az": 0.0, "kappa": (8.0, 8.0, 8.0), "amp": (1.0, 1.0, 1.0)},
    {"t1": 0.35, "t2": 0.35, "az": 2.0944, "kappa": (12.0, 5.0, 2.0), "amp": (1.0, 1.0, 1.0)},
    {"t1": 0.60, "t2": 1.20, "az": 1.5708, "kappa": (8.0, 8.0, 8.0), "amp": (1.0, 1.0, 1.0)},
    {"t1": 0.90, "t2": 0.90, "az": 2.0944, "kappa": (8.0, 8.0, 8.0), "amp": (1.0, 0.55, 0.3)},
    {"t1": 0.35, "t2": 2.60, "az": 1.0, "kappa": (8.0, 8.0, 8.0), "amp": (1.0, 1.0, 1.0)},
    {"t1": 1.10, "t2": 1.10, "az": 2.0944, "kappa": (2.0, 2.0, 2.0), "amp": (1.0, 1.0, 1.0)},
)

MIN_CLASS_SEPARATION = 0.2


def bump_class_field(cls: int):
    """Canonical (unrotated) three-bump field of class cls."""
    p = _CONSTELLATIONS[cls]
    centers = [
        np.array([0.0, 0.0, 1.0]),
        np.array([np.sin(p["t1"]), 0.0, np.cos(p["t1"])]),
        np.array(
            [
                np.sin(p["t2"]) * np.cos(p["az"]),
                np.sin(p["t2"]) * np.sin(p["az"]),
                np.cos(p["t2"]),
            ]
        ),
    ]
    return oracle.SumField(
        [
            oracle.GaussianBumpField(c, k, a)
            for c, k, a in zip(centers, p["kappa"], p["amp"])
        ]
    )


def class_separations(level: int, n_classes: int) -> np.ndarray:
    """Pairwise chordal distance between unit-normalized canonical class signals."""
    verts = build_mesh(level).vertices
    sigs = np.stack([bump_class_field(c).value(verts) for c in range(n_classes)])
    sigs = sigs / np.linalg.norm(sigs, axis=1, keepdims=True)
    out = np.zeros((n_classes, n_classes))
    for a in range(n_classes):
        for b in range(a + 1, n_classes):
            out[a, b] = out[b, a] = np.linalg.norm(sigs[a] - sigs[b])
    return out


def synth_bumps(level: int, n_classes: int, n_per_class: int, rotated: bool, seed: int,
                split: str = "") -> LabeledSphereDataset:
    """Analytic bump-constellation classification task.

    Every sample of a class is the same canonical field, optionally under an
    independent Haar-random rotation (the rotated regime).  At generation the
    canonical class signals are checked to be mutually separated by more than
    MIN_CLASS_SEPARATION in chordal distance at level 3, so no two classes
    are near-duplicates.
    """
    if not 1 <= n_classes <= len(_CONSTELLATIONS):
        raise ValueError(f"n_classes must be in [1, {len(_CONSTELLATIONS)}], got {n_classes}")
    sep = class_separations(3, n_classes)
    bad = sep[np.triu_indices(n_classes, 1)]
    if n_classes > 1 and bad.min() <= MIN_CLASS_SEPARATION:
        raise AssertionError(
            f"class constellations too close: min chordal separation {bad.min():.3f}"
        )
    verts = build_mesh(level).vertices
    rng = np.random.default_rng(seed)
    n = n_classes * n_per_class
    signals = np.empty((n, verts.shape[0]))
    labels = np.empty(n, dtype=np.int64)
    rots = np.tile(np.eye(3), (n, 1, 1))
    i = 0
    for cls in range(n_classes):
        canon = bump_class_field(cls)
        plain = None if rotated else canon.value(verts)
        for _ in range(n_per_class):
            if rotated:
                w = geom.random_rotation(rng)
                rots[i] = w
                signals[i] = oracle.rotate_fn(canon, w).value(verts)
            else:
                signals[i] = plain
            labels[i] = cls
            i += 1
    return LabeledSphereDataset(signals, labels, level, split, rots if rotated else None)


def standardize(signals: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Zero-mean unit-variance per channel; returns (normalized, (mean, std)).

    Compute stats on the training split, then pass them in for other splits.
    """
    x = np.asarray(signals)
    if x.ndim == 2:
        x = x[..., None]
    if stats is None:
        mean = x.mean(axis=(0, 1))
        std = x.std(axis=(0, 1))
        std = np.where(std > 1e-12, std, 1.0)
        stats = (mean, std)
    return (x - stats[0]) / stats[1], stats


# ---------------------------------------------------------------------------
# IDX digit files

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        magic, n, rows, cols = struct.unpack(">iiii", head)
        if magic != _IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
        body = fh.read(n * rows * cols + 1)
    if len(body) < n * rows * cols:
        raise IdxFormatError(f"{path}: truncated image data")
    if len(body) > n * rows * cols:
        raise IdxFormatError(f"{path}: trailing bytes after image data")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, n = struct.unpack(">ii", head)
        if magic != _IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
        body = fh.read(n + 1)
    if len(body) < n:
        raise IdxFormatError(f"{path}: truncated label data")
    if len(body) > n:
        raise IdxFormatError(f"{path}: trailing bytes after label data")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Standard IDX pair -> (images in [0,1] as (n, 28, 28), labels)."""
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images.astype(np.float64) / 255.0, labels


# ---------------------------------------------------------------------------
# gnomonic projection


def project_to_sphere(images: np.ndarray, level: int, rotations: np.ndarray | None = None) -> np.ndarray:
    """Paste 28x28 images onto the sphere around the north pole.

    images: (28, 28) or (n, 28, 28); rotations: optional (3, 3) or (n, 3, 3)
    applied to each sample (a vertex P reads the image at R^-1 P, matching
    function rotation).  Returns (V,) or (n, V).

    A vertex with direction (x, y, z), z > 0, sees tangent-plane coordinates
    (x/z, y/z); the image square spans +-tan(60 deg) in both, row 0 at +y,
    column 0 at -x.  Values are bilinear in the pixel grid and zero outside
    the square or on the far hemisphere.
    """
    imgs = np.asarray(images, dtype=float)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    if imgs.shape[-2:] != (28, 28):
        raise ValueError(f"expected 28x28 images, got {imgs.shape[-2:]}")
    n = imgs.shape[0]
    verts = build_mesh(level).vertices
    if rotations is None:
        rot = np.tile(np.eye(3), (n, 1, 1))
    else:
        rot = np.asarray(rotations, dtype=float)
        if rot.ndim == 2:
            rot = np.tile(rot, (n, 1, 1))
    out = np.zeros((n, verts.shape[0]))
    for i in range(n):
        p = verts @ rot[i]  # rows R^-1 P for orthogonal R
        z = p[:, 2]
        ok = z > 1e-9
        u = np.where(ok, p[:, 0] / np.where(ok, z, 1.0), 0.0)
        v = np.where(ok, p[:, 1] / np.where(ok, z, 1.0), 0.0)
        ok &= (np.abs(u) <= HALF_WIDTH) & (np.abs(v) <= HALF_WIDTH)
        # pixel-center coordinates: u in [-W, W] -> col in [0, 27]
        col = (u + HALF_WIDTH) / (2.0 * HALF_WIDTH) * 27.0
        row = (HALF_WIDTH - v) / (2.0 * HALF_WIDTH) * 27.0
        r0 = np.clip(np.floor(row).astype(int), 0, 26)
        c0 = np.clip(np.floor(col).astype(int), 0, 26)
        fr = np.clip(row - r0, 0.0, 1.0)
        fc = np.clip(col - c0, 0.0, 1.0)
        img = imgs[i]
        val = (
            img[r0, c0] * (1 - fr) * (1 - fc)
            + img[r0, c0 + 1] * (1 - fr) * fc
            + img[r0 + 1, c0] * fr * (1 - fc)
            + img[r0 + 1, c0 + 1] * fr * fc
        )
        out[i] = np.where(ok, val, 0.0)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# dataset cache


def save_dataset(path: str, ds: LabeledSphereDataset, seed: int | None = None) -> None:
    """Binary cache: JSON header, little-endian f32 signals, little-endian i32 labels."""
    sig = np.ascontiguousarray(ds.signals, dtype="<f4")
    lab = np.ascontiguousarray(ds.labels, dtype="<i4")
    head = {
        "format_version": DATASET_FORMAT_VERSION,
        "tool_version": __version__,
        "seed": seed,
        "mesh_level": ds.mesh_level,
        "split": ds.split,
        "n": int(sig.shape[0]),
        "n_vertices": int(sig.shape[1]),
        "channels": int(sig.shape[2]),
    }
    atomic_write_bytes(path, pack_header(head, DATASET_MAGIC) + sig.tobytes() + lab.tobytes())


def load_dataset(path: str) -> LabeledSphereDataset:
    with open(path, "rb") as fh:
        payload = fh.read()
    head, off = unpack_header(payload, DATASET_MAGIC)
    if head["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"dataset format {head['format_version']} not supported")
    n, v, c = head["n"], head["n_vertices"], head["channels"]
    sig_bytes = n * v * c * 4
    lab_bytes = n * 4
    if len(payload) != off + sig_bytes + lab_bytes:
        raise ValueError(f"dataset payload size mismatch in {path}")
    signals = np.frombuffer(payload[off : off + sig_bytes], dtype="<f4").reshape(n, v, c)
    labels = np.frombuffer(payload[off + sig_bytes :], dtype="<i4").astype(np.int64)
    return LabeledSphereDataset(signals.astype(np.float64), labels, head["mesh_level"], head["split"])
