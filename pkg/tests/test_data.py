import struct

import numpy as np
import pytest

from icoconv import DATASET_FORMAT_VERSION, data, geom, oracle
from icoconv.data import DATASET_MAGIC, IdxFormatError, LabeledSphereDataset
from icoconv.icomesh import build_mesh
from icoconv.ioutil import pack_header


class TestLabeledSphereDataset:
    def test_promotes_two_axis_signals(self):
        ds = LabeledSphereDataset(np.zeros((3, 12)), np.zeros(3, dtype=int), 1)
        assert ds.signals.shape == (3, 12, 1)
        assert ds.n == 3

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            LabeledSphereDataset(np.zeros((3, 12)), np.zeros(2, dtype=int), 1)

    def test_non_finite_rejected(self):
        bad = np.zeros((2, 12))
        bad[1, 3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            LabeledSphereDataset(bad, np.zeros(2, dtype=int), 1)


def test_all_classes_well_separated():
    sep = data.class_separations(3, 8)
    off = sep[np.triu_indices(8, 1)]
    assert off.min() > data.MIN_CLASS_SEPARATION


def test_synth_bumps_deterministic():
    a = data.synth_bumps(2, 3, 4, rotated=True, seed=9)
    b = data.synth_bumps(2, 3, 4, rotated=True, seed=9)
    assert np.array_equal(a.signals, b.signals)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.rotations, b.rotations)
    c = data.synth_bumps(2, 3, 4, rotated=True, seed=10)
    assert not np.array_equal(a.signals, c.signals)


def test_synth_bumps_unrotated_constant_per_class():
    ds = data.synth_bumps(2, 2, 5, rotated=False, seed=0)
    assert ds.rotations is None
    for cls in range(2):
        block = ds.signals[ds.labels == cls, :, 0]
        assert np.array_equal(block, np.tile(block[0], (5, 1)))
    assert not np.allclose(ds.signals[0], ds.signals[-1])


def test_synth_bumps_rotated_samples_match_stored_rotation():
    ds = data.synth_bumps(2, 2, 3, rotated=True, seed=4)
    verts = build_mesh(2).vertices
    for i in range(ds.n):
        canon = data.bump_class_field(int(ds.labels[i]))
        expect = oracle.rotate_fn(canon, ds.rotations[i]).value(verts)
        assert np.allclose(ds.signals[i, :, 0], expect, atol=1e-12)


def test_synth_bumps_class_count_bounds():
    with pytest.raises(ValueError, match="n_classes"):
        data.synth_bumps(2, 0, 1, rotated=False, seed=0)
    with pytest.raises(ValueError, match="n_classes"):
        data.synth_bumps(2, 9, 1, rotated=False, seed=0)


def test_synth_bumps_split_tag():
    ds = data.synth_bumps(2, 2, 1, rotated=False, seed=0, split="val")
    assert ds.split == "val"


def test_standardize_train_then_reuse(rng):
    x = rng.standard_normal((20, 42, 2)) * 3.0 + 1.5
    xn, stats = data.standardize(x)
    assert np.allclose(xn.mean(axis=(0, 1)), 0.0, atol=1e-12)
    assert np.allclose(xn.std(axis=(0, 1)), 1.0, atol=1e-12)
    y = rng.standard_normal((5, 42, 2))
    yn, stats2 = data.standardize(y, stats)
    assert stats2 is stats
    assert np.allclose(yn, (y - stats[0]) / stats[1], atol=0)


def test_standardize_constant_channel_guard():
    x = np.ones((4, 10, 1))
    xn, (mean, std) = data.standardize(x)
    assert np.allclose(xn, 0.0, atol=0)
    assert std[0] == 1.0


# ---------------------------------------------------------------------------
# IDX files


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray):
    n, rows, cols = images.shape
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    ip.write_bytes(struct.pack(">iiii", 0x00000803, n, rows, cols) + images.tobytes())
    lp.write_bytes(struct.pack(">ii", 0x00000801, len(labels)) + labels.tobytes())
    return str(ip), str(lp)


def test_idx_roundtrip(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    got_imgs, got_labels = data.load_mnist_idx(ip, lp)
    assert np.allclose(got_imgs, images / 255.0, atol=0)
    assert got_imgs.min() >= 0.0 and got_imgs.max() <= 1.0
    assert np.array_equal(got_labels, labels.astype(np.int64))


def test_idx_bad_magic(tmp_path):
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    blob = bytearray(open(ip, "rb").read())
    blob[3] = 0x99
    open(ip, "wb").write(bytes(blob))
    with pytest.raises(IdxFormatError, match="magic"):
        data.load_mnist_idx(ip, lp)


def test_idx_truncated(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    blob = open(ip, "rb").read()
    open(ip, "wb").write(blob[:-10])
    with pytest.raises(IdxFormatError, match="truncated"):
        data.load_mnist_idx(ip, lp)


def test_idx_trailing_bytes(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    with open(lp, "ab") as fh:
        fh.write(b"\x07")
    with pytest.raises(IdxFormatError, match="trailing"):
        data.load_mnist_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    images = np.zeros((3, 28, 28), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    with pytest.raises(IdxFormatError, match="count mismatch"):
        data.load_mnist_idx(ip, lp)


# ---------------------------------------------------------------------------
# projection


def test_projection_rejects_wrong_size():
    with pytest.raises(ValueError, match="28x28"):
        data.project_to_sphere(np.zeros((10, 10)), 2)


def test_projection_zero_image_is_zero():
    out = data.project_to_sphere(np.zeros((28, 28)), 3)
    assert out.shape == (build_mesh(3).vertices.shape[0],)
    assert np.all(out == 0.0)


def test_projection_constant_inside_zero_outside():
    out = data.project_to_sphere(np.ones((28, 28)), 3)
    verts = build_mesh(3).vertices
    z = verts[:, 2]
    behind = z <= 1e-9
    assert np.all(out[behind] == 0.0)
    inside = ~behind & (np.abs(np.divide(verts[:, 0], z, where=~behind)) <= data.HALF_WIDTH * 0.99) \
        & (np.abs(np.divide(verts[:, 1], z, where=~behind)) <= data.HALF_WIDTH * 0.99)
    assert np.all(np.isclose(out[inside], 1.0, atol=1e-12))
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_projection_linear_in_image(rng):
    a = rng.random((28, 28))
    b = rng.random((28, 28))
    pa = data.project_to_sphere(a, 2)
    pb = data.project_to_sphere(b, 2)
    pab = data.project_to_sphere(2.0 * a + 0.5 * b, 2)
    assert np.allclose(pab, 2.0 * pa + 0.5 * pb, atol=1e-12)


def test_projection_center_block_hits_pole():
    img = np.zeros((28, 28))
    img[13:15, 13:15] = 1.0  # the four pixels around the image center
    out = data.project_to_sphere(img, 4)
    verts = build_mesh(4).vertices
    pole = int(np.argmax(verts[:, 2]))
    assert np.isclose(verts[pole, 2], 1.0, atol=1e-12)  # level-4 mesh keeps the pole vertex
    assert np.isclose(out[pole], 1.0, atol=1e-12)
    assert out.max() <= 1.0 + 1e-12


def test_projection_batch_and_shared_rotation(rng):
    imgs = rng.random((3, 28, 28))
    rot = geom.random_rotation(rng)
    batch = data.project_to_sphere(imgs, 2, rotations=rot)
    for i in range(3):
        single = data.project_to_sphere(imgs[i], 2, rotations=rot)
        assert np.allclose(batch[i], single, atol=0)


def test_projection_rotation_moves_mass(rng):
    """Rotating the projection resamples the image; report the discrepancy
    against rotating the projected signal (informative, not asserted: the two
    differ by interpolation error that shrinks with image resolution)."""
    img = np.zeros((28, 28))
    img[10:18, 10:18] = 1.0
    rot = geom.yrot(0.3)
    rotated = data.project_to_sphere(img, 4, rotations=rot)
    plain = data.project_to_sphere(img, 4)
    verts = build_mesh(4).vertices
    moved = np.abs(rotated - plain).max()
    assert moved > 0.1  # the rotation visibly moved the pattern
    print(f"rotated-projection max discrepancy at level 4: {moved:.3f}")


# ---------------------------------------------------------------------------
# dataset cache


def test_dataset_cache_roundtrip(tmp_path):
    ds = data.synth_bumps(2, 2, 3, rotated=True, seed=1, split="train")
    path = str(tmp_path / "ds.bin")
    data.save_dataset(path, ds, seed=1)
    got = data.load_dataset(path)
    assert got.mesh_level == 2 and got.split == "train"
    assert np.array_equal(got.labels, ds.labels)
    # signals stored as f4: round trip is exact at f4 precision
    assert np.allclose(got.signals, ds.signals.astype(np.float32), atol=0)


def test_dataset_cache_truncation(tmp_path):
    ds = data.synth_bumps(2, 2, 2, rotated=False, seed=0)
    path = str(tmp_path / "ds.bin")
    data.save_dataset(path, ds)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-4])
    with pytest.raises(ValueError, match="size mismatch"):
        data.load_dataset(path)


def test_dataset_cache_future_format(tmp_path):
    path = str(tmp_path / "ds.bin")
    head = {"format_version": DATASET_FORMAT_VERSION + 1, "n": 0, "n_vertices": 0, "channels": 0}
    with open(path, "wb") as fh:
        fh.write(pack_header(head, DATASET_MAGIC))
    with pytest.raises(ValueError, match="not supported"):
        data.load_dataset(path)


def test_dataset_cache_bad_magic(tmp_path):
    path = str(tmp_path / "ds.bin")
    with open(path, "wb") as fh:
        fh.write(b"NOTADSET" + b"\x00" * 8)
    with pytest.raises(ValueError, match="magic"):
        data.load_dataset(path)
