import numpy as np
import pytest

from icoconv import oracle, ops
from icoconv.ops import (
    CyclicGroup,
    FeatureMap,
    apply_vertex_matrix,
    coefficient_matrix,
    one_by_one_kernel,
    one_hot_phi_weights,
    orientation_coefficients,
    phi_kernel,
    pool_matrix,
    psi_kernel,
    rotate_coefficients,
    unpool_matrix,
)
from icoconv.icomesh import build_mesh, pool_map, unpool_map


def test_cyclic_group_basics():
    g = CyclicGroup(6)
    assert np.allclose(g.angles, 2 * np.pi * np.arange(6) / 6)
    assert g.add(4, 5) == 3
    with pytest.raises(ValueError):
        CyclicGroup(0)


def test_quarter_turn_coefficient_map(rng):
    from icoconv.geom import inplane_rotation

    w = rng.standard_normal(6)
    got = rotate_coefficients(w, inplane_rotation(np.pi / 2))
    expect = np.array([w[0], -w[2], w[1], w[5], -w[4], w[3]])
    assert np.allclose(got, expect, atol=1e-14)


def test_coefficient_matrices_compose(rng):
    for _ in range(20):
        a, b = rng.uniform(-np.pi, np.pi, size=2)
        lhs = coefficient_matrix(a + b)
        rhs = coefficient_matrix(a) @ coefficient_matrix(b)
        assert np.allclose(lhs, rhs, atol=1e-13)
    assert np.allclose(coefficient_matrix(0.0), np.eye(6), atol=1e-15)


def test_coefficient_matrix_batch(rng):
    angles = rng.uniform(-np.pi, np.pi, size=7)
    batch = coefficient_matrix(angles)
    for k, a in enumerate(angles):
        assert np.allclose(batch[k], coefficient_matrix(a), atol=0)


def test_orientation_coefficients_table(rng):
    group = CyclicGroup(5)
    w = rng.standard_normal((3, 2, 6))
    table = orientation_coefficients(w, group)
    assert table.shape == (5, 3, 2, 6)
    for i in range(5):
        assert np.allclose(table[i], w @ coefficient_matrix(group.angles[i]).T, atol=1e-14)


def test_psi_kernel_vanishes_at_pole_for_height_gradient(ctx3, ctx4):
    # d/dx1 of sqrt(1 - |x|^2) is zero at the origin of the pole chart
    w = np.array([[[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]]])
    group = CyclicGroup(8)
    for ctx, bound in ((ctx3, 0.02), (ctx4, 0.005)):
        pole = int(np.argmax(ctx.mesh.vertices[:, 2]))
        out = psi_kernel(ctx.mesh.vertices[:, 2:3], w, group, ctx.stencils)
        assert np.abs(out[pole]).max() < bound


def test_psi_kernel_shapes_and_validation(ctx2, rng):
    group = CyclicGroup(4)
    x = rng.standard_normal((3, ctx2.mesh.n_vertices, 2))
    out = psi_kernel(x, rng.standard_normal((5, 2, 6)), group, ctx2.stencils)
    assert out.shape == (3, ctx2.mesh.n_vertices, 4, 5)
    with pytest.raises(ValueError):
        psi_kernel(x, rng.standard_normal((5, 3, 6)), group, ctx2.stencils)
    with pytest.raises(ValueError):
        psi_kernel(x, rng.standard_normal((5, 2, 5)), group, ctx2.stencils)


def test_phi_kernel_validation(ctx2, rng):
    group = CyclicGroup(4)
    x = rng.standard_normal((ctx2.mesh.n_vertices, 4, 2))
    with pytest.raises(ValueError):
        phi_kernel(x, rng.standard_normal((3, 2, 5, 6)), group, ctx2.stencils)
    with pytest.raises(ValueError):
        phi_kernel(x[:, :3], rng.standard_normal((3, 2, 4, 6)), group, ctx2.stencils)


def test_phi_one_hot_equals_one_by_one(ctx2, rng):
    group = CyclicGroup(4)
    x = rng.standard_normal((ctx2.mesh.n_vertices, 4, 3))
    mix = rng.standard_normal((5, 3))
    a = phi_kernel(x, one_hot_phi_weights(mix, 4), group, ctx2.stencils)
    b = one_by_one_kernel(x, mix)
    assert np.abs(a - b).max() < 1e-12


def test_phi_offset_roll_identity(ctx2, rng):
    # rolling the offset axis of the weights shifts which input slice each
    # output orientation reads: out(w rolled by k) == phi with slices i+j+k
    group = CyclicGroup(4)
    x = rng.standard_normal((ctx2.mesh.n_vertices, 4, 2))
    w = rng.standard_normal((3, 2, 4, 6))
    rolled = phi_kernel(x, np.roll(w, -1, axis=2), group, ctx2.stencils)
    shifted_in = phi_kernel(np.roll(x, 1, axis=-2), w, group, ctx2.stencils)
    assert np.allclose(rolled, shifted_in, atol=1e-12)


def test_one_by_one_kernel_orientation_mix(rng):
    x = rng.standard_normal((7, 4, 3))
    mix = rng.standard_normal((2, 3))
    out = one_by_one_kernel(x, mix)
    assert out.shape == (7, 4, 2)
    assert np.allclose(out, x @ mix.T, atol=1e-14)
    mix3 = rng.standard_normal((2, 3, 4))
    out3 = one_by_one_kernel(x, mix3)
    expect = np.zeros((7, 4, 2))
    for i in range(4):
        for j in range(4):
            expect[:, i, :] += x[:, (i + j) % 4, :] @ mix3[:, :, j].T
    assert np.allclose(out3, expect, atol=1e-13)


def test_channel_stats_and_batchnorm(rng):
    x = rng.standard_normal((50, 4, 3)) * 2.0 + 1.0
    mean, var = ops.channel_stats(x)
    normed = ops.batchnorm_apply(x, mean, var, np.ones(3), np.zeros(3))
    m2, v2 = ops.channel_stats(normed)
    assert np.abs(m2).max() < 1e-12
    assert np.abs(v2 - 1.0).max() < 1e-4


def test_orientation_batchnorm_shift_invariant(rng):
    vals = rng.standard_normal((30, 6, 2))
    fm = FeatureMap(vals, mesh_level=0)
    fm_shift = FeatureMap(np.roll(vals, 2, axis=1), mesh_level=0)
    scale, bias = np.ones(2), np.zeros(2)
    out, m1, v1 = ops.orientation_batchnorm(fm, scale, bias, training=True)
    out2, m2, v2 = ops.orientation_batchnorm(fm_shift, scale, bias, training=True)
    assert np.allclose(m1, m2, atol=1e-14)
    assert np.allclose(v1, v2, atol=1e-14)
    assert np.allclose(out2.values, np.roll(out.values, 2, axis=1), atol=1e-13)


def test_pool_preserves_weighted_mean(rng):
    fine = build_mesh(2)
    coarse = build_mesh(1)
    pmap = pool_map(fine, coarse)
    mat = pool_matrix(pmap, fine.n_vertices)
    x = rng.standard_normal((fine.n_vertices, 1, 1))
    pooled = apply_vertex_matrix(mat, x)[:, 0, 0]
    # size-weighted coarse total equals the multiplicity-weighted fine total
    sizes = np.array([len(m) for m in pmap], dtype=float)
    counts = np.zeros(fine.n_vertices)
    for m in pmap:
        counts[m] += 1
    assert np.isclose((sizes * pooled).sum(), (counts * x[:, 0, 0]).sum(), rtol=1e-12)
    row_sums = np.asarray(mat.sum(axis=1)).ravel()
    assert np.allclose(row_sums, 1.0, atol=1e-12)


def test_unpool_pool_round_trip_error():
    fine = build_mesh(4)
    coarse = build_mesh(3)
    pmat = pool_matrix(pool_map(fine, coarse), fine.n_vertices)
    umat = unpool_matrix(unpool_map(coarse, fine), coarse.n_vertices)
    # smooth band-limited signal: a low-degree spherical polynomial
    x = fine.vertices[:, 2] * fine.vertices[:, 0] + 0.3 * fine.vertices[:, 1]
    x = x[:, None, None]
    back = apply_vertex_matrix(umat, apply_vertex_matrix(pmat, x))
    rel = np.linalg.norm(back - x) / np.linalg.norm(x)
    assert rel <= 0.1


def test_apply_vertex_matrix_requires_three_axes(rng):
    fine = build_mesh(1)
    coarse = build_mesh(0)
    mat = pool_matrix(pool_map(fine, coarse), fine.n_vertices)
    x = rng.standard_normal((4, fine.n_vertices, 3, 2))
    out = apply_vertex_matrix(mat, x)
    assert out.shape == (4, coarse.n_vertices, 3, 2)


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((5,)), mesh_level=0)
