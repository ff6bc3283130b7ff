import numpy as np
import pytest

from deptex import imaging
from deptex.errors import ConfigError, DataError, FormatError
from deptex.synthetic import TextureSpec, default_specs, generate, load_image_dir, render, save_dataset


@pytest.fixture(scope="module")
def full_set():
    return generate(per_class=200, size=64, seed=0)


def test_counts_and_stratification(full_set):
    assert len(full_set) == 1200
    train, test = full_set.subset("train"), full_set.subset("test")
    assert (len(train), len(test)) == (960, 240)
    assert np.bincount(train.labels).tolist() == [160] * 6
    assert np.bincount(test.labels).tolist() == [40] * 6
    assert len(set(full_set.ids)) == 1200


def test_pixels_in_unit_range(full_set):
    stack = full_set.stacked()
    assert stack.shape == (1200, 3, 64, 64)
    assert stack.min() >= 0.0 and stack.max() <= 1.0


def test_drawn_parameters_respect_ranges(full_set):
    specs = {s.name: s for s in default_specs()}
    for label, drawn in zip(full_set.labels, full_set.params):
        spec = specs[full_set.class_names[label]]
        assert drawn.keys() == spec.params.keys()
        for key, value in drawn.items():
            lo, hi = spec.params[key]
            assert lo <= value <= hi
    # the draws actually fill their ranges rather than clustering at one end
    for name, spec in specs.items():
        rows = [p for lab, p in zip(full_set.labels, full_set.params) if full_set.class_names[lab] == name]
        for key, (lo, hi) in spec.params.items():
            vals = np.array([r[key] for r in rows])
            assert vals.min() < lo + 0.05 * (hi - lo) and vals.max() > hi - 0.05 * (hi - lo)


def test_same_seed_bit_identical():
    a, b = generate(per_class=3, size=24, seed=5), generate(per_class=3, size=24, seed=5)
    assert a.stacked().tobytes() == b.stacked().tobytes()
    assert generate(per_class=3, size=24, seed=6).stacked().tobytes() != a.stacked().tobytes()


def test_train_and_test_use_disjoint_streams():
    small = generate(per_class=5, size=16, seed=0)
    imgs = {img.tobytes() for img in small.images}
    assert len(imgs) == len(small)


def test_duplicate_class_ids_rejected():
    specs = default_specs()
    specs[1] = TextureSpec(0, "other", "noise", {"exponent": [1.0, 2.0]})
    with pytest.raises(ConfigError, match="duplicate class ids"):
        generate(specs, per_class=2, size=16)
    with pytest.raises(ConfigError):
        generate(per_class=0)
    with pytest.raises(ConfigError):
        TextureSpec(9, "x", "plasma")
    with pytest.raises(ConfigError):
        TextureSpec(9, "x", "noise", {"exponent": [2.0, 1.0]})


@pytest.mark.parametrize("spec", default_specs() + [TextureSpec(6, "composite", "composite", {})], ids=lambda s: s.name)
def test_every_kind_renders(spec):
    img, _ = render(spec, 32, np.random.default_rng(0))
    assert img.shape == (3, 32, 32) and np.isfinite(img).all()
    assert img.std() > 0.01


def test_disk_roundtrip(tmp_path):
    ds = generate(per_class=4, size=16, seed=1)
    save_dataset(ds, tmp_path / "data")
    back = load_image_dir(tmp_path / "data")
    assert back.class_names == ds.class_names
    assert sorted(back.labels.tolist()) == sorted(ds.labels.tolist())
    first = back.images[0]
    assert np.abs(first - ds.subset("train").images[0]).max() <= 0.5 / 255 + 1e-12
    with pytest.raises(DataError):
        load_image_dir(tmp_path / "missing")


def test_ppm_errors(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        imaging.read_ppm(tmp_path / "a.ppm")
    (tmp_path / "b.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError, match="truncated"):
        imaging.read_ppm(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n1 1\n255\n" + bytes([255, 0, 128]))
    np.testing.assert_allclose(imaging.read_ppm(tmp_path / "c.ppm")[:, 0, 0], [1.0, 0.0, 128 / 255])


def test_resize_and_crop():
    img = np.random.default_rng(0).uniform(size=(3, 10, 12))
    np.testing.assert_allclose(imaging.resize_bilinear(img, 10, 12), img, atol=1e-12)
    const = np.full((3, 7, 9), 0.25)
    assert np.abs(imaging.resize_bilinear(const, 20, 5) - 0.25).max() < 1e-15
    assert imaging.center_crop(img, 6).shape == (3, 6, 6)
    np.testing.assert_array_equal(imaging.center_crop(img, 6), img[:, 2:8, 3:9])
    assert imaging.resize_short_edge(img, 20).shape == (3, 20, 24)
    np.testing.assert_array_equal(imaging.hflip(imaging.hflip(img)), img)


def _ridge_probe_accuracy(train, test, lam):
    Xtr = train.stacked().reshape(len(train), -1)
    Xte = test.stacked().reshape(len(test), -1)
    mu = Xtr.mean(axis=0)
    Xtr, Xte = Xtr - mu, Xte - mu
    Y = np.eye(6)[train.labels] - 1 / 6
    # dual form: 960 x 960 instead of 12288 x 12288
    alpha = np.linalg.solve(Xtr @ Xtr.T + lam * np.eye(len(Xtr)), Y)
    return float(((Xte @ Xtr.T @ alpha).argmax(axis=1) == test.labels).mean())


@pytest.mark.slow
def test_raw_pixel_linear_probe_is_weak(full_set):
    train, test = full_set.subset("train"), full_set.subset("test")
    # best case over the regularization grid, judged on the test split itself
    best = max(_ridge_probe_accuracy(train, test, lam) for lam in (1e-2, 1, 1e2, 1e4))
    assert best < 0.60
