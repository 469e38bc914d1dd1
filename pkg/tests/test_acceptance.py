"""End-to-end acceptance checks, one test per shipping criterion.

Each test prints a single summary line (visible with -s or on failure) and
asserts the stated tolerance, so `pytest -v tests/test_acceptance.py` yields
one pass/fail line per criterion.  The digit-classification check needs IDX
files on disk and is skipped unless ICOCONV_MNIST_DIR points at them; it is
advisory and not part of the gate.
"""
import os
import time

import numpy as np
import pytest

from icoconv import cli, data, geom, harness, oracle, train
from icoconv.ops import CyclicGroup, one_by_one_kernel, one_hot_phi_weights, phi_kernel
from icoconv.stencil import design_matrix


def report(n: int, passed: bool, detail: str) -> None:
    print(f"[criterion {n}] {'PASS' if passed else 'FAIL'} {detail}")


def test_criterion_01_stencil_exactness_levels_2_to_5():
    """Degree-<=2 chart polynomials are differentiated exactly on every vertex."""
    worst = 0.0
    eye = np.eye(5)
    for level in (2, 3, 4, 5):
        ctx = harness.mesh_context(level)
        for st in ctx.stencils.stencils:
            resid = np.abs(st.pinv @ design_matrix(st.chart_xy) - eye).max()
            worst = max(worst, float(resid))
    ok = worst < 1e-9
    report(1, ok, f"stencil exactness levels 2-5: max |P V - I| = {worst:.3e} (tol 1e-9)")
    assert ok


def test_criterion_02_consistency_order_on_exponential():
    """First derivatives converge at ratio >= 3.0 per level, second at >= 1.7."""
    first, second = harness.stencil_consistency([3, 4, 5, 6])
    r1, r2 = first.ratios, second.ratios
    ok = all(r >= 3.0 for r in r1) and all(r >= 1.7 for r in r2)
    report(2, ok, "consistency order exp(x3) levels 3-6: "
                  f"first ratios {[f'{r:.2f}' for r in r1]} (>=3.0), "
                  f"second ratios {[f'{r:.2f}' for r in r2]} (>=1.7)")
    assert ok, (r1, r2)


def test_criterion_03_oracle_identities_100_rotation_pairs():
    """Closed-form layer values commute with rotations to near machine precision."""
    rng = np.random.default_rng(42)
    catalog = oracle.standard_catalog()
    worst_psi = 0.0
    for k in range(100):
        _, f = catalog[k % len(catalog)]
        w = rng.standard_normal(6)
        rtil = geom.random_rotation(rng)
        rot = geom.random_rotation(rng)
        a = oracle.exact_psi(oracle.rotate_fn(f, rtil), w, rot)
        b = oracle.exact_psi(f, w, rtil.T @ rot)
        worst_psi = max(worst_psi, abs(a - b))

    fam = harness.default_phi_family(band_limited=True)
    wfn = lambda theta: np.stack([np.cos(theta), np.sin(theta), np.cos(2 * theta),
                                  np.ones_like(theta), np.zeros_like(theta),
                                  np.sin(3 * theta)], axis=1)
    worst_phi = 0.0
    for _ in range(100):
        rtil = geom.random_rotation(rng)
        rot = geom.random_rotation(rng)
        a = oracle.exact_phi(wfn, oracle.RotatedFamily(fam, rtil), rot)
        b = oracle.exact_phi(wfn, fam, rtil.T @ rot)
        worst_phi = max(worst_phi, abs(a - b))

    ok = worst_psi < 1e-9 and worst_phi < 1e-9
    report(3, ok, f"oracle identities, 100 Haar pairs: lift {worst_psi:.3e}, "
                  f"oriented conv {worst_phi:.3e} (tol 1e-9)")
    assert ok


def test_criterion_04_lift_defect_halves_per_level():
    """Discrete lifting-layer defect vs the exact oracle, N=16, bump inputs."""
    rep = harness.psi_equivariance_error([3, 4, 5, 6], group_n=16, trials=20, seed=0)
    ratios = rep.ratios
    ok = all(1.5 <= r <= 3.0 for r in ratios)
    report(4, ok, f"lift defect levels 3-6 (N=16, 20 rotations): max errs "
                  f"{[f'{e:.2e}' for e in rep.max_err]}, ratios "
                  f"{[f'{r:.2f}' for r in ratios]} (each in [1.5, 3.0])")
    assert ok, ratios


def test_criterion_05_quadrature_defect_vs_orientation_count():
    """Strictly decreasing for smooth families; zero for offset-constant ones."""
    rep = harness.phi_quadrature_error(5, [2, 4, 8, 16, 32], trials=5, seed=0)
    decreasing = all(b < a for a, b in zip(rep.max_err, rep.max_err[1:]))

    cat = dict(oracle.standard_catalog())
    const_fam = oracle.OrientationFamily([(lambda t: np.ones_like(t), cat["bump_tilted"]),
                                          (lambda t: np.ones_like(t), cat["x1x2"])])
    const_rep = harness.phi_quadrature_error(5, [2, 4, 8], trials=2, seed=0, fam=const_fam)
    const_max = max(const_rep.max_err)
    ok = decreasing and const_max < 1e-12
    report(5, ok, f"quadrature defect at level 5: N 2->32 errs "
                  f"{[f'{e:.2e}' for e in rep.max_err]} strictly decreasing={decreasing}; "
                  f"offset-constant family max {const_max:.2e} (< 1e-12)")
    assert ok


def test_criterion_06_one_hot_weights_reduce_to_channel_mixing():
    ctx = harness.mesh_context(2)
    group = CyclicGroup(8)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, ctx.mesh.n_vertices, 8, 3))
    mix = rng.standard_normal((4, 3))
    w = one_hot_phi_weights(mix, group.n)
    a = phi_kernel(x, w, group, ctx.stencils)
    b = one_by_one_kernel(x, mix)
    worst = float(np.abs(a - b).max())
    ok = worst < 1e-12
    report(6, ok, f"one-hot oriented conv equals channel mixing: max diff {worst:.3e} (tol 1e-12)")
    assert ok


def test_criterion_07_gradients_match_finite_differences():
    model = train.Model(train.small_bump_classifier())
    worst, rows = train.gradcheck(model, n_params=5, seed=0)
    ok = worst < 1e-5
    report(7, ok, f"backprop vs central differences, small model, 64-bit: "
                  f"max rel err {worst:.3e} over {len(rows)} probes (tol 1e-5)")
    assert ok, rows


def test_criterion_08_rotated_bump_classification():
    """4-class rotated bump task, train/test 1000/250 per class, <30k params."""
    t0 = time.process_time()
    train_ds = data.synth_bumps(3, 4, 1000, rotated=True, seed=100, split="train")
    test_ds = data.synth_bumps(3, 4, 250, rotated=True, seed=101, split="test")
    x, stats = data.standardize(train_ds.signals)
    tx, _ = data.standardize(test_ds.signals, stats)

    model = train.Model(train.small_bump_classifier(level=3, n_classes=4))
    n_params = train.parameter_count(model, train.init_weights(model, 0))
    assert n_params < 30000, n_params

    cfg = {"lr": 0.003, "batch": 64, "epochs": 3, "seed": 0, "dtype": "float32",
           "decay_every": 4}
    weights, metrics = train.train_classifier(model, x, train_ds.labels, cfg)
    _, acc = train.evaluate(model, weights, tx.astype(np.float32), test_ds.labels)
    cpu = time.process_time() - t0
    ok = acc >= 0.95 and cpu < 600.0
    report(8, ok, f"rotated 4-class bumps at level 3: test acc {acc:.4f} (>=0.95) "
                  f"with {n_params} params in {cpu:.0f}s CPU (<600s)")
    assert ok, (acc, cpu)


@pytest.mark.skipif("ICOCONV_MNIST_DIR" not in os.environ,
                    reason="advisory digit benchmark: set ICOCONV_MNIST_DIR to IDX files")
def test_criterion_09_digit_projection_benchmark():
    """Advisory (not gating): 10k-digit subset through the documented projection."""
    d = os.environ["ICOCONV_MNIST_DIR"]
    images, labels = data.load_mnist_idx(os.path.join(d, "train-images-idx3-ubyte"),
                                         os.path.join(d, "train-labels-idx1-ubyte"))
    test_images, test_labels = data.load_mnist_idx(os.path.join(d, "t10k-images-idx3-ubyte"),
                                                   os.path.join(d, "t10k-labels-idx1-ubyte"))
    rng = np.random.default_rng(0)
    keep = rng.choice(images.shape[0], size=10000, replace=False)
    x = data.project_to_sphere(images[keep], 4)
    tx = data.project_to_sphere(test_images, 4)
    x, stats = data.standardize(x)
    tx, _ = data.standardize(tx, stats)
    model = train.Model(train.digit_classifier())
    cfg = {"lr": 0.003, "batch": 64, "epochs": 12, "seed": 0, "dtype": "float32",
           "decay_every": 6}
    weights, _ = train.train_classifier(model, x, labels[keep], cfg)
    _, acc = train.evaluate(model, weights, tx.astype(np.float32), test_labels)
    report(9, acc >= 0.95, f"upright digit benchmark: test acc {acc:.4f} (advisory >=0.95)")
    assert acc >= 0.95


def test_criterion_10_cli_runs_are_byte_identical(tmp_path):
    def twice(argv_fn):
        outs = []
        for tag in ("a", "b"):
            d = tmp_path / tag
            d.mkdir(exist_ok=True)
            assert cli.main(argv_fn(str(d))) == 0
            outs.append(d)
        return outs

    checked = []
    a, b = twice(lambda d: ["mesh-gen", "--level", "3", "--seed", "2", "--out", f"{d}/mesh.bin"])
    checked.append(("mesh.bin", (a / "mesh.bin").read_bytes() == (b / "mesh.bin").read_bytes()))

    a, b = twice(lambda d: ["synth-data", "--level", "2", "--classes", "2", "--per-class", "4",
                            "--rotated", "--seed", "5", "--out", f"{d}/ds.bin"])
    checked.append(("ds.bin", (a / "ds.bin").read_bytes() == (b / "ds.bin").read_bytes()))

    a, b = twice(lambda d: ["equivariance-report", "--levels", "2,3", "--n", "4",
                            "--trials", "2", "--out-dir", d])
    for name in ("psi_equivariance.csv", "psi_equivariance.png"):
        checked.append((name, (a / name).read_bytes() == (b / name).read_bytes()))

    ds = str(tmp_path / "a" / "ds.bin")
    a, b = twice(lambda d: ["train", "--data", ds, "--model", "small", "--epochs", "1",
                            "--batch", "4", "--seed", "1", "--out-dir", f"{d}/run"])
    for name in ("final.ckpt", "metrics.csv", "training.png"):
        checked.append((name, (a / "run" / name).read_bytes() == (b / "run" / name).read_bytes()))

    bad = [name for name, same in checked if not same]
    ok = not bad
    report(10, ok, f"same-seed CLI reruns byte-identical across {len(checked)} artifacts"
                   + (f"; mismatches: {bad}" if bad else ""))
    assert ok, bad
