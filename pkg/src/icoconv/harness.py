"""Measurement harness: discretization and equivariance error studies.

Every study compares discrete computations against the closed forms in
`oracle`; no curve ever uses a finer mesh of the same discrete method as its
own reference.  Results are collected in ConvergenceReport objects that
serialize to commented CSV (columns level_or_n, max_err, mean_err, ratio) and
render to PNG via `plots`.

The equivariance defect is always measured against the exact continuous
target: rotating a discrete feature map would land between mesh vertices and
between orientation channels, and interpolating there would add an error
source of its own.  By the triangle inequality the usual two-sided defect
(transform-then-apply vs apply-then-transform, both discrete) is at most
twice what we report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import REPORT_FORMAT_VERSION, geom, oracle
from .icomesh import IcoMesh, build_mesh, vertex_areas
from .ioutil import atomic_write_text, csv_header_lines, fmt17
from .ops import CyclicGroup, one_by_one_kernel, phi_kernel, psi_kernel
from .stencil import StencilSet, build_stencils


@dataclass
class ConvergenceReport:
    """Error curve over mesh levels or orientation counts."""

    quantity: str
    axis_name: str  # "level" or "n"
    axis: list[int]
    max_err: list[float]
    mean_err: list[float]

    def __post_init__(self):
        if len(self.axis) != len(self.max_err) or len(self.axis) != len(self.mean_err):
            raise ValueError("axis and error columns must have equal length")
        if any(b <= a for a, b in zip(self.axis, self.axis[1:])):
            raise ValueError(f"axis must be strictly increasing, got {self.axis}")
        if any(e < 0 for e in self.max_err) or any(e < 0 for e in self.mean_err):
            raise ValueError("errors must be nonnegative")

    @property
    def ratios(self) -> list[float]:
        """Successive max-error ratios err[k-1]/err[k] (length len(axis)-1)."""
        return [
            self.max_err[k - 1] / self.max_err[k] if self.max_err[k] > 0 else float("inf")
            for k in range(1, len(self.axis))
        ]

    @property
    def slope(self) -> float:
        """Least-squares slope of log2(max_err) against log2-spaced axis steps.

        For a level axis the step is the level itself (each level halves the
        spacing); for an n axis the step is log2(n)."""
        err = np.array(self.max_err)
        if np.any(err <= 0) or len(err) < 2:
            return float("nan")
        x = np.array(self.axis, dtype=float)
        if self.axis_name == "n":
            x = np.log2(x)
        return float(np.polyfit(x, np.log2(err), 1)[0])

    def to_csv(self, seed=None) -> str:
        lines = csv_header_lines(
            REPORT_FORMAT_VERSION,
            seed,
            quantity=self.quantity,
            axis=self.axis_name,
            slope_log2=fmt17(self.slope),
        )
        lines.append("level_or_n,max_err,mean_err,ratio")
        ratios = [""] + [fmt17(r) for r in self.ratios]
        for k, a in enumerate(self.axis):
            lines.append(f"{a},{fmt17(self.max_err[k])},{fmt17(self.mean_err[k])},{ratios[k]}")
        return "\n".join(lines) + "\n"

    def save(self, path: str, seed=None) -> None:
        atomic_write_text(path, self.to_csv(seed))

    def table(self) -> str:
        head = f"{self.quantity}  (slope_log2 = {self.slope:.3f})"
        lines = [head, f"{self.axis_name:>10}  {'max_err':>12}  {'mean_err':>12}  {'ratio':>8}"]
        ratios = [None] + self.ratios
        for k, a in enumerate(self.axis):
            r = f"{ratios[k]:8.3f}" if ratios[k] is not None else " " * 8
            lines.append(f"{a:>10}  {self.max_err[k]:12.4e}  {self.mean_err[k]:12.4e}  {r}")
        return "\n".join(lines)


@dataclass
class MeshContext:
    """Mesh, canonical frames, stencils, and area weights for one level, built once."""

    mesh: IcoMesh
    frames: np.ndarray
    stencils: StencilSet
    area_weights: np.ndarray  # vertex areas normalized to sum 1


_CTX_CACHE: dict[int, MeshContext] = {}


def mesh_context(level: int) -> MeshContext:
    if level not in _CTX_CACHE:
        mesh = build_mesh(level)
        areas = vertex_areas(mesh)
        _CTX_CACHE[level] = MeshContext(
            mesh, geom.frames_of_points(mesh.vertices), build_stencils(mesh), areas / areas.sum()
        )
    return _CTX_CACHE[level]


def _default_fields() -> list:
    cat = dict(oracle.standard_catalog())
    return [cat["bump_pole"], cat["bump_tilted"]]


def stencil_consistency(levels, fields=None) -> tuple[ConvergenceReport, ConvergenceReport]:
    """Stencil derivative error against exact chart derivatives, per order.

    Returns (first_order, second_order) reports: max/mean over vertices and
    fields of the absolute error in the (d1, d2) rows and the (d11, d12, d22)
    rows of the derivative stack.
    """
    if fields is None:
        fields = [dict(oracle.standard_catalog())["exp_z"]]
    levels = list(levels)
    stats = {1: ([], []), 2: ([], [])}
    for level in levels:
        ctx = mesh_context(level)
        err1, err2 = [], []
        for f in fields:
            exact = oracle.canonical_derivatives_grid(f, ctx.frames)
            got = ctx.stencils.features(f.value(ctx.mesh.vertices)[:, None])[:, :, 0]
            diff = np.abs(got - exact)
            err1.append(diff[:, 1:3])
            err2.append(diff[:, 3:6])
        for order, block in ((1, np.concatenate(err1)), (2, np.concatenate(err2))):
            stats[order][0].append(float(block.max()))
            stats[order][1].append(float(block.mean()))
    first = ConvergenceReport("stencil_first_order", "level", levels, *stats[1])
    second = ConvergenceReport("stencil_second_order", "level", levels, *stats[2])
    return first, second


DEFAULT_PSI_WEIGHTS = np.array([0.3, 1.0, -0.7, 0.8, 0.5, -0.6])


def psi_equivariance_error(
    levels,
    group_n: int = 16,
    trials: int = 20,
    seed: int = 0,
    w: np.ndarray | None = None,
    fields=None,
) -> ConvergenceReport:
    """Defect of the discrete lifting layer on rotated inputs vs the exact layer.

    Per trial: draw a random rotation, rotate a catalog field, sample it on
    the mesh, run the discrete layer, and compare on the whole
    (vertex, orientation) grid against the exact value for the rotated field
    (which equals the rotated exact feature map of the unrotated field).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    w = DEFAULT_PSI_WEIGHTS if w is None else np.asarray(w, dtype=float)
    fields = _default_fields() if fields is None else list(fields)
    group = CyclicGroup(group_n)
    levels = list(levels)
    max_col, mean_col = [], []
    for level in levels:
        ctx = mesh_context(level)
        rng = np.random.default_rng(seed)  # same rotation draw across levels
        worst, means = 0.0, []
        for t in range(trials):
            rot = geom.random_rotation(rng)
            f = fields[t % len(fields)].rotated(rot)
            samples = f.value(ctx.mesh.vertices)[:, None]
            got = psi_kernel(samples, w.reshape(1, 1, 6), group, ctx.stencils)[:, :, 0]
            exact = oracle.exact_psi_grid(f, w, ctx.frames, group)
            diff = np.abs(got - exact)
            worst = max(worst, float(diff.max()))
            means.append(float(diff.mean()))
        max_col.append(worst)
        mean_col.append(float(np.mean(means)))
    return ConvergenceReport("psi_equivariance_defect", "level", levels, max_col, mean_col)


def heavy_tail_profile(decay: float = 1.1):
    """Smooth orientation profile with slowly decaying Fourier tail: 1/(decay - cos)."""
    if decay <= 1.0:
        raise ValueError("decay must exceed 1 for smoothness")
    return lambda t: 1.0 / (decay - np.cos(t))


def default_phi_family(band_limited: bool = False) -> oracle.OrientationFamily:
    cat = dict(oracle.standard_catalog())
    if band_limited:
        profile = np.cos
    else:
        profile = heavy_tail_profile()
    return oracle.OrientationFamily(
        [(profile, cat["bump_tilted"]), (lambda t: np.ones_like(t), cat["x1x2"])]
    )


def _constant_weight_fn(w: np.ndarray):
    w = np.asarray(w, dtype=float)
    return lambda theta: np.tile(w, (len(theta), 1))


REFERENCE_QUADRATURE = 1024


def phi_quadrature_error(
    level: int,
    n_values,
    trials: int = 5,
    seed: int = 0,
    fam: oracle.OrientationFamily | None = None,
) -> ConvergenceReport:
    """Orientation-quadrature component of the hidden-layer defect.

    Evaluates the exact layer with n offset points against the converged
    reference quadrature, on the full grid, so the stencil error cancels and
    only the circle-rule error remains.  Weight 6-vectors are held constant
    across offsets (trials draws them at random)."""
    fam = default_phi_family() if fam is None else fam
    ctx = mesh_context(level)
    n_values = list(n_values)
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal(6) for _ in range(trials)]
    max_col, mean_col = [], []
    for n in n_values:
        group = CyclicGroup(n)
        worst, means = 0.0, []
        for w in ws:
            wfn = _constant_weight_fn(w)
            coarse = oracle.exact_phi_grid(wfn, fam, ctx.frames, group, n_quad=n)
            ref = oracle.exact_phi_grid(wfn, fam, ctx.frames, group, n_quad=REFERENCE_QUADRATURE)
            diff = np.abs(coarse - ref)
            worst = max(worst, float(diff.max()))
            means.append(float(diff.mean()))
        max_col.append(worst)
        mean_col.append(float(np.mean(means)))
    return ConvergenceReport("phi_quadrature_defect", "n", n_values, max_col, mean_col)


def phi_stencil_error(
    levels,
    group_n: int = 8,
    trials: int = 5,
    seed: int = 0,
    fam: oracle.OrientationFamily | None = None,
) -> ConvergenceReport:
    """Stencil component of the hidden-layer defect over mesh levels.

    Runs the discrete layer on the exactly sampled family and compares with
    the exact layer evaluated at the same n offset points, so the quadrature
    error cancels and only the derivative-estimation error remains."""
    fam = default_phi_family() if fam is None else fam
    group = CyclicGroup(group_n)
    levels = list(levels)
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal(6) for _ in range(trials)]
    max_col, mean_col = [], []
    for level in levels:
        ctx = mesh_context(level)
        samples = fam.sample_grid(ctx.frames, group)[:, :, None]
        worst, means = 0.0, []
        for w in ws:
            wfn = _constant_weight_fn(w)
            wlayer = np.tile(w, (1, 1, group.n, 1))
            got = phi_kernel(samples, wlayer, group, ctx.stencils)[:, :, 0]
            ref = oracle.exact_phi_grid(wfn, fam, ctx.frames, group, n_quad=group.n)
            diff = np.abs(got - ref)
            worst = max(worst, float(diff.max()))
            means.append(float(diff.mean()))
        max_col.append(worst)
        mean_col.append(float(np.mean(means)))
    return ConvergenceReport("phi_stencil_defect", "level", levels, max_col, mean_col)


def phi_equivariance_error(
    level: int,
    n_values,
    trials: int = 5,
    seed: int = 0,
    levels=None,
    group_n: int = 8,
) -> tuple[ConvergenceReport, ConvergenceReport]:
    """Both components of the hidden-layer defect: (quadrature vs n, stencil vs level)."""
    if levels is None:
        levels = [max(2, level - 2), max(2, level - 2) + 1, max(2, level - 2) + 2]
    quad = phi_quadrature_error(level, n_values, trials, seed)
    sten = phi_stencil_error(levels, group_n, trials, seed)
    return quad, sten


# ---------------------------------------------------------------------------
# whole-network smoke test


def _orientation_invariant_summary(x: np.ndarray, area_weights: np.ndarray) -> np.ndarray:
    """Rotation-invariant observable of a feature map: per channel, the
    area-weighted vertex mean of the orientation mean.

    Area weighting matters: vertex density on a subdivided icosahedron varies
    by about 1.5x across the sphere, so an equal-weight mean of a rotated
    field differs from the unrotated one at first order no matter how fine
    the mesh.  With true area weights both sides converge to the same
    integral and the comparison measures the layers, not the mesh.
    """
    return area_weights @ x.mean(axis=1)


def run_stack(layers, values: np.ndarray, group: CyclicGroup, stencils: StencilSet) -> list[np.ndarray]:
    """Apply a (kind, params) layer stack, returning the activation after each layer.

    Kinds: psi {w}, phi {w}, one_by_one {mix}, relu {}.
    """
    acts = []
    x = values
    for kind, params in layers:
        if kind == "psi":
            x = psi_kernel(x[:, 0, :], params["w"], group, stencils)
        elif kind == "phi":
            x = phi_kernel(x, params["w"], group, stencils)
        elif kind == "one_by_one":
            x = one_by_one_kernel(x, params["mix"])
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        else:
            raise ValueError(f"unknown smoke-test layer kind: {kind}")
        acts.append(x)
    return acts


def network_equivariance_smoke(
    layers,
    level: int,
    trials: int = 5,
    seed: int = 0,
    group_n: int = 8,
    fields=None,
) -> list[dict]:
    """End-to-end equivariance smoke test for a small layer stack.

    Three regimes, chosen per prefix depth:
      * pointwise prefixes (only 1x1 mixing layers) are compared entry by
        entry against the directly composed channel map of the rotated input
        samples; any defect would be a bookkeeping bug, not discretization;
      * a leading lifting layer is compared against its exact counterpart on
        the rotated field (strongest available reference);
      * deeper prefixes are summarized by a rotation-invariant observable
        (area-weighted vertex mean of the orientation mean, per channel) and
        compared between rotated and unrotated runs; with nonlinearities
        present this is observational, no order is asserted.

    Returns one row per prefix depth: {depth, kind, mode, max_err, mean_err}.
    """
    ctx = mesh_context(level)
    group = CyclicGroup(group_n)
    fields = _default_fields() if fields is None else list(fields)
    rng = np.random.default_rng(seed)
    rows = [
        {"depth": d + 1, "kind": kind, "mode": "", "max": 0.0, "mean": [], }
        for d, (kind, _) in enumerate(layers)
    ]
    pointwise_prefix = []
    for kind, params in layers:
        if kind != "one_by_one":
            break
        pointwise_prefix.append(params["mix"])

    for t in range(trials):
        rot = geom.random_rotation(rng)
        base = fields[t % len(fields)]
        f_rot = base.rotated(rot)
        n_in = layers[0][1]["w"].shape[1] if layers[0][0] == "psi" else (
            layers[0][1]["mix"].shape[1]
        )
        sig = np.stack([f_rot.scaled(1.0 + 0.1 * c).value(ctx.mesh.vertices) for c in range(n_in)], axis=-1)
        sig_plain = np.stack(
            [base.scaled(1.0 + 0.1 * c).value(ctx.mesh.vertices) for c in range(n_in)], axis=-1
        )
        acts_rot = run_stack(layers, sig[:, None, :], group, ctx.stencils)
        acts_plain = run_stack(layers, sig_plain[:, None, :], group, ctx.stencils)
        for d, (kind, params) in enumerate(layers):
            if d < len(pointwise_prefix):
                mixed = sig[:, None, :]
                for mix in pointwise_prefix[: d + 1]:
                    mixed = one_by_one_kernel(mixed, mix)
                diff = np.abs(acts_rot[d] - mixed)
                rows[d]["mode"] = "pointwise_exact"
            elif d == 0 and kind == "psi":
                w = params["w"]
                exact = np.stack(
                    [
                        sum(
                            oracle.exact_psi_grid(f_rot.scaled(1.0 + 0.1 * c), w[o, c], ctx.frames, group)
                            for c in range(w.shape[1])
                        )
                        for o in range(w.shape[0])
                    ],
                    axis=-1,
                )
                diff = np.abs(acts_rot[d] - exact)
                rows[d]["mode"] = "exact_oracle"
            else:
                s_rot = _orientation_invariant_summary(acts_rot[d], ctx.area_weights)
                s_plain = _orientation_invariant_summary(acts_plain[d], ctx.area_weights)
                diff = np.abs(s_rot - s_plain)
                rows[d]["mode"] = "invariant_summary"
            rows[d]["max"] = max(rows[d]["max"], float(diff.max()))
            rows[d]["mean"].append(float(diff.mean()))

    return [
        {
            "depth": r["depth"],
            "kind": r["kind"],
            "mode": r["mode"],
            "max_err": r["max"],
            "mean_err": float(np.mean(r["mean"])),
        }
        for r in rows
    ]


def smoke_linear_stack(group_n: int, seed: int = 5) -> list:
    """Two-layer linear stack (lift then oriented conv) with orientation-shared
    second-layer weights.

    Sharing one 6-vector across all orientation offsets makes the second
    layer's orientation average an exact rotation-invariant operator in the
    continuum, so the invariant-summary defect of this stack decays with
    refinement just like the single-layer case.  Independently varying
    offsets leave a residual that refinement does not remove: the offset
    labels are tied to the canonical tangent frames, and no continuous frame
    choice covers the whole sphere, so label-dependent weights see the frame
    seam.  The shared case is the one worth asserting on.
    """
    rng = np.random.default_rng(seed)
    w_psi = rng.standard_normal((3, 2, 6))
    w_phi = np.repeat(rng.standard_normal((2, 3, 1, 6)) * 0.5, group_n, axis=2)
    return [("psi", {"w": w_psi}), ("phi", {"w": w_phi})]


def smoke_relu_stack(group_n: int, seed: int = 5) -> list:
    """Lift, ReLU, channel mix, oriented conv: the observational deep stack."""
    rng = np.random.default_rng(seed)
    w_psi = rng.standard_normal((3, 2, 6))
    mix = rng.standard_normal((3, 3))
    w_phi = np.repeat(rng.standard_normal((2, 3, 1, 6)) * 0.5, group_n, axis=2)
    return [("psi", {"w": w_psi}), ("relu", {}), ("one_by_one", {"mix": mix}), ("phi", {"w": w_phi})]
