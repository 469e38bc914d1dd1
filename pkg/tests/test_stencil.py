import numpy as np
import pytest

from icoconv import geom, oracle
from icoconv.icomesh import build_mesh, grid_scale
from icoconv.stencil import apply_stencil, build_stencils, design_matrix, load_stencils, save_stencils


def chart_poly_samples(ctx, vertex, coeffs, const):
    """Sample the chart polynomial of `vertex` at the vertex and its ring."""
    sset = ctx.stencils
    st = sset.stencils[vertex]
    frame = geom.frame_of_point(ctx.mesh.vertices[vertex])
    xs = np.stack([geom.chart_forward(frame, ctx.mesh.vertices[u]) for u in st.neighbor_idx])
    return design_matrix(xs) @ coeffs + const, st


def test_degree_two_polynomials_exact(ctx3, rng):
    # basis (x1, x2, x1^2/2, x1x2, x2^2/2): the stencil must read coefficients back
    for vertex in rng.choice(ctx3.mesh.n_vertices, size=40, replace=False):
        coeffs = rng.standard_normal(5)
        const = rng.standard_normal()
        ring_vals, st = chart_poly_samples(ctx3, int(vertex), coeffs, const)
        got = st.pinv @ (ring_vals - const)
        assert np.allclose(got, coeffs, atol=1e-10)


def test_constant_signal_has_zero_derivatives(ctx3):
    feats = ctx3.stencils.features(np.ones((ctx3.mesh.n_vertices, 1)))
    assert np.allclose(feats[:, 0, 0], 1.0, atol=0)
    assert np.abs(feats[:, 1:, 0]).max() < 1e-12


def test_north_pole_height_derivatives(ctx4):
    # signal p3 in the pole chart is sqrt(1-|x|^2): gradient 0, Hessian -I
    pole = int(np.argmax(ctx4.mesh.vertices[:, 2]))
    assert ctx4.mesh.vertices[pole, 2] > 1.0 - 1e-12
    feats = ctx4.stencils.features(ctx4.mesh.vertices[:, 2:3])
    d = feats[pole, :, 0]
    rho = grid_scale(ctx4.mesh)
    assert np.isclose(d[0], 1.0, atol=1e-12)
    assert abs(d[1]) < 10 * rho**2 and abs(d[2]) < 10 * rho**2
    assert abs(d[3] + 1.0) < 10 * rho and abs(d[5] + 1.0) < 10 * rho
    assert abs(d[4]) < 10 * rho


def test_x1x2_matches_oracle_to_first_order(ctx3):
    field = dict(oracle.standard_catalog())["x1x2"]
    feats = ctx3.stencils.features(field.value(ctx3.mesh.vertices)[:, None])[:, :, 0]
    exact = oracle.canonical_derivatives_grid(field, ctx3.frames)
    rho = grid_scale(ctx3.mesh)
    err = np.abs(feats - exact)
    assert err[:, :3].max() < 2 * rho**2  # value exact, first order O(rho^2)
    assert err[:, 3:].max() < 2 * rho


def test_features_match_per_vertex_apply(ctx2, rng):
    x = rng.standard_normal(ctx2.mesh.n_vertices)
    feats = ctx2.stencils.features(x[:, None])[:, :, 0]
    for v in rng.choice(ctx2.mesh.n_vertices, size=10, replace=False):
        st = ctx2.stencils.stencils[v]
        local = np.concatenate([[x[v]], x[st.neighbor_idx]])
        assert np.allclose(apply_stencil(st, local), feats[v, 1:], atol=1e-14)
        assert feats[v, 0] == x[v]


def test_features_adjoint_is_adjoint(ctx2, rng):
    nv = ctx2.mesh.n_vertices
    x = rng.standard_normal((3, nv, 2))
    g = rng.standard_normal((3, nv, 6, 2))
    lhs = float(np.sum(ctx2.stencils.features(x) * g))
    rhs = float(np.sum(x * ctx2.stencils.features_adjoint(g)))
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_feature_shapes(ctx2, rng):
    x = rng.standard_normal((2, 5, ctx2.mesh.n_vertices, 3))
    feats = ctx2.stencils.features(x)
    assert feats.shape == (2, 5, ctx2.mesh.n_vertices, 6, 3)


def test_save_load_round_trip(tmp_path, ctx2, rng):
    path = str(tmp_path / "stencils.bin")
    save_stencils(ctx2.stencils, path, seed=11)
    back = load_stencils(path)
    assert back.mesh_level == ctx2.stencils.mesh_level
    x = rng.standard_normal((ctx2.mesh.n_vertices, 2))
    assert np.array_equal(back.features(x), ctx2.stencils.features(x))


def test_load_rejects_truncation(tmp_path, ctx2):
    path = str(tmp_path / "stencils.bin")
    save_stencils(ctx2.stencils, path)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[: len(raw) - 7])
    with pytest.raises(ValueError):
        load_stencils(path)


def test_build_covers_both_degrees():
    sset = build_stencils(build_mesh(2))
    degs = {len(st.neighbor_idx) for st in sset.stencils}
    assert degs == {5, 6}
    for st in sset.stencils:
        assert st.pinv.shape == (5, len(st.neighbor_idx))
        assert np.all(np.isfinite(st.pinv))
