import math

import numpy as np
import pytest

from fcan.data import (Dataset, GlyphTaskSpec, decode_pnm, encode_pnm, generate_dataset,
                       generate_split, load_dataset, load_manifest, load_ppm, parse_manifest,
                       save_ppm, write_dataset)
from fcan.rng import Rng
from fcan.train import TrainConfig, train


@pytest.fixture(scope="module")
def default_task():
    return generate_dataset(GlyphTaskSpec())


# ---------------------------------------------------------------- spec and generator

@pytest.mark.parametrize("kw", [{"glyph_size": 16}, {"num_classes": 1}, {"noise": -0.1},
                                {"distractors": 40}, {"class_bits": 0}])
def test_inconsistent_spec_rejected(kw):
    with pytest.raises(ValueError):
        GlyphTaskSpec(**kw).validate()


def test_same_seed_byte_identical():
    spec = GlyphTaskSpec(n_train=30, n_test=10)
    a, b = generate_dataset(spec), generate_dataset(spec)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert np.array_equal(x.labels, y.labels) and np.array_equal(x.rects, y.rects)
    other = generate_dataset(GlyphTaskSpec(n_train=30, n_test=10, seed=1))
    assert other[0].images.tobytes() != a[0].images.tobytes()


def test_clean_images_differ_only_in_glyph():
    spec = GlyphTaskSpec(distractors=0, noise=0.0, n_train=40, n_test=0)
    ds, _ = generate_dataset(spec)
    bg = ds.images[0, 0, 0, 0]
    for img, (x, y, w, h) in zip(ds.images, ds.rects):
        mask = np.ones(img.shape[1:], bool)
        mask[y:y + h, x:x + w] = False
        assert np.all(img[0][mask] == bg)
        assert np.any(img[0][~mask] != bg)


def test_glyph_is_local_and_inside(default_task):
    train_set, test_set = default_task
    s = 64
    for ds in (train_set, test_set):
        x, y, w, h = ds.rects.T
        assert np.all(x >= 0) and np.all(y >= 0) and np.all(x + w <= s) and np.all(y + h <= s)
        assert np.all(w * h < 0.04 * s * s)
    assert train_set.images.shape == (2000, 1, 64, 64) and len(test_set) == 500
    assert train_set.num_classes == 10
    assert set(np.unique(train_set.labels)) == set(range(10))


def test_glyph_positions_uniform():
    ds = generate_split(GlyphTaskSpec(), 10_000, "uniformity")
    span = 64 - 8 + 1            # 57 admissible offsets = 3 bins of 19
    bx = ds.rects[:, 0] // (span // 3)
    by = ds.rects[:, 1] // (span // 3)
    counts = np.bincount(bx * 3 + by, minlength=9)
    expected = len(ds) / 9
    stat = float(((counts - expected) ** 2 / expected).sum())
    assert stat < 26.12           # chi-square(8) upper 0.001 point


def test_background_is_class_independent(default_task):
    train_set, _ = default_task
    imgs, labels = train_set.images[:, 0], train_set.labels
    feats = []
    for img, (x, y, w, h) in zip(imgs, train_set.rects):
        mask = np.ones(img.shape, bool)
        mask[y:y + h, x:x + w] = False
        feats.append(img[mask].mean())
    feats = np.array(feats)

    def between(lbl):
        return sum((feats[lbl == c].mean() - feats.mean()) ** 2 * (lbl == c).sum() for c in range(10))
    observed = between(labels)
    rng = Rng(0)
    null = [between(labels[rng.permutation(len(labels))]) for _ in range(200)]
    p = (1 + sum(v >= observed for v in null)) / 201
    assert p > 0.01


def test_linear_pixel_classifier_is_weak(default_task):
    train_set, test_set = default_task
    x = train_set.images.reshape(len(train_set), -1)
    mu = x.mean(axis=0)
    x = x - mu
    xt = test_set.images.reshape(len(test_set), -1) - mu
    y = np.eye(10)[train_set.labels]
    best = 0.0
    for lam in (1.0, 10.0, 100.0):
        alpha = np.linalg.solve(x @ x.T + lam * np.eye(len(x)), y)
        pred = (xt @ (x.T @ alpha)).argmax(axis=1)
        best = max(best, float((pred == test_set.labels).mean()))
    assert best < 0.40


# ---------------------------------------------------------------- PGM / PPM

def test_black_2x2_ppm_payload():
    data = encode_pnm(np.zeros((3, 2, 2)))
    assert data.startswith(b"P6")
    assert data[-12:] == bytes(12)
    assert len(data) == len(b"P6\n2 2\n255\n") + 12


@pytest.mark.parametrize("channels", [1, 3])
def test_round_trip_within_quantisation(rng, tmp_path, channels):
    img = rng.random((channels, 5, 7))
    path = tmp_path / "x.ppm"
    save_ppm(path, img)
    back = load_ppm(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 255 / 2 + 1e-12


def test_header_comments_accepted():
    data = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
    assert decode_pnm(data).tolist() == [[[0.0, 1.0]]]


@pytest.mark.parametrize("data,offset", [(b"P7\n1 1\n255\n\0", 0), (b"P5\n1 x\n255\n\0", 5),
                                         (b"P5\n1 1\n65535\n\0\0", 7), (b"P5\n2 2\n255\n\0", 12)])
def test_malformed_header_names_byte(data, offset):
    with pytest.raises(ValueError, match=f"byte {offset}"):
        decode_pnm(data)


def test_out_of_range_pixels_rejected():
    with pytest.raises(ValueError):
        encode_pnm(np.full((1, 2, 2), 1.5))


# ---------------------------------------------------------------- manifests

def test_manifest_parsing():
    recs = parse_manifest("# header\na.pgm 3 1 2 8 8\n\nb.pgm 0\n")
    assert [(r.path, r.label, r.rect) for r in recs] == [("a.pgm", 3, (1, 2, 8, 8)), ("b.pgm", 0, None)]


@pytest.mark.parametrize("text,line", [("a.pgm 1\nb.pgm\n", 2), ("a.pgm x\n", 1),
                                       ("a.pgm 1\n\nc.pgm 12\n", 3), ("a.pgm 1 0 0 0 8\n", 1)])
def test_manifest_errors_name_line(text, line):
    with pytest.raises(ValueError, match=f"line {line}"):
        parse_manifest(text, num_classes=10)


def test_empty_manifest_empty_dataset(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("")
    ds = load_dataset(path)
    assert len(ds) == 0
    with pytest.raises(ValueError, match="empty"):
        train(ds.images, ds.labels, TrainConfig())


def test_written_default_dataset_resolves(tmp_path, default_task):
    root = tmp_path / "glyphs"
    write_dataset(root, GlyphTaskSpec(), *default_task)
    lines = [len(load_manifest(root / f"{s}.txt")) for s in ("train", "test")]
    assert lines == [2000, 500] and sum(lines) == 2500
    loaded = load_dataset(root / "test.txt", num_classes=10)
    assert np.array_equal(loaded.labels, default_task[1].labels)
    assert np.array_equal(loaded.rects, default_task[1].rects)
    assert np.max(np.abs(loaded.images - default_task[1].images)) < 1e-12
    assert (root / "task.cfg").read_text().startswith("task.num_classes = 10")


def test_subset_keeps_declared_classes():
    ds = Dataset(np.zeros((3, 1, 2, 2)), np.array([0, 1, 1]), np.zeros((3, 4), int), None, 5)
    assert ds.subset([1, 2]).num_classes == 5
    assert [s.label for s in ds.samples()] == [0, 1, 1]
