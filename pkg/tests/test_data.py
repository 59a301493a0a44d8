import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shuffleseg.classes import ClassTable
from shuffleseg.errors import ConfigError, FormatError
from shuffleseg.data import (
    class_histogram, denormalize, labels_from_color, load_image, load_label, load_manifest, load_samples,
    normalize, read_pnm, save_color_map, synth_dataset, write_manifest, write_pgm, write_ppm,
)


def test_white_pixel(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 255, 255]))
    assert read_pnm(p).tolist() == [[[255, 255, 255]]]
    x = load_image(p, mean=(0, 0, 0), std=(1, 1, 1))
    assert x.shape == (1, 3, 1, 1) and np.all(x == 1.0)
    assert np.all(load_image(p) == 1.0)


def test_header_comments_and_whitespace(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5 # made by hand\n 2\t1 # w h\n255\n" + bytes([3, 4]))
    assert read_pnm(p).tolist() == [[3, 4]]


def test_label_values(tmp_path):
    p = tmp_path / "l.pgm"
    write_pgm(p, np.array([[19]], np.uint8))
    assert load_label(p, 20).item() == 19
    write_pgm(p, np.array([[0, 37]], np.uint8))
    with pytest.raises(FormatError, match=r"offset 12: label value 37"):
        load_label(p, 20)


@pytest.mark.parametrize("blob,where", [
    (b"P3\n1 1\n255\n1 2 3", "offset 0"),
    (b"P6\n1", "truncated header"),
    (b"P6\n1 1\n65535\n" + bytes(6), "maxval 65535"),
    (b"P6\n2 2\n255\n" + bytes(5), "truncated payload"),
    (b"P6\n0 2\n255\n", "empty raster"),
    (b"P6\nx 2\n255\n", "offset 3"),
])
def test_codec_errors(tmp_path, blob, where):
    p = tmp_path / "bad.ppm"
    p.write_bytes(blob)
    with pytest.raises(FormatError, match=where):
        read_pnm(p)


def test_wrong_raster_kind(tmp_path):
    write_pgm(tmp_path / "g.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(FormatError):
        load_image(tmp_path / "g.pgm")
    write_ppm(tmp_path / "c.ppm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(FormatError):
        load_label(tmp_path / "c.ppm", 5)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**16))
def test_codec_roundtrip(tmp_path_factory, h, w, seed):
    d = tmp_path_factory.mktemp("rt")
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, (h, w), dtype=np.uint8)
    write_ppm(d / "a.ppm", rgb)
    write_pgm(d / "a.pgm", gray)
    assert np.array_equal(read_pnm(d / "a.ppm"), rgb) and np.array_equal(read_pnm(d / "a.pgm"), gray)
    b = (d / "a.ppm").read_bytes()
    write_ppm(d / "b.ppm", read_pnm(d / "a.ppm"))
    assert (d / "b.ppm").read_bytes() == b
    back = denormalize(normalize(rgb))
    assert np.max(np.abs(back.astype(int) - rgb.astype(int))) <= 1


def test_color_map(tmp_path):
    p = tmp_path / "m.ppm"
    save_color_map(np.zeros((3, 4), np.int64), [(128, 64, 128)], p)
    assert np.all(read_pnm(p) == (128, 64, 128))
    palette = ClassTable.cityscapes().palette
    labels = np.random.default_rng(0).integers(0, 19, (5, 6))
    save_color_map(labels, palette, p)
    assert np.array_equal(labels_from_color(read_pnm(p), palette), labels)
    dup = [(1, 1, 1), (1, 1, 1)]
    save_color_map(np.array([[0, 1]]), dup, p)
    with pytest.raises(FormatError):
        labels_from_color(read_pnm(p), dup)
    with pytest.raises(FormatError):
        save_color_map(np.array([[3]]), dup, p)


def test_manifest(tmp_path):
    for name in ("b", "a"):
        write_ppm(tmp_path / f"{name}.ppm", np.zeros((2, 3, 3), np.uint8))
        write_pgm(tmp_path / f"{name}.pgm", np.ones((2, 3), np.uint8))
    write_manifest(tmp_path / "m.txt", [("b.ppm", "b.pgm"), ("a.ppm", "a.pgm")])
    m = load_manifest(tmp_path / "m.txt")
    assert [p[0].name for p in m.pairs] == ["a.ppm", "b.ppm"]
    x, y, ids = load_samples(m, 2)
    assert x.shape == (2, 3, 2, 3) and y.shape == (2, 1, 2, 3) and ids == ["a", "b"]
    (tmp_path / "bad.txt").write_text("a.ppm a.pgm\n")
    with pytest.raises(FormatError, match="line 1"):
        load_manifest(tmp_path / "bad.txt")
    (tmp_path / "gone.txt").write_text("a.ppm\tz.pgm\n")
    with pytest.raises(FormatError, match="missing file"):
        load_manifest(tmp_path / "gone.txt")
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "empty.txt")


def test_histogram_and_cache(tmp_path):
    write_ppm(tmp_path / "i.ppm", np.zeros((2, 2, 3), np.uint8))
    write_pgm(tmp_path / "l.pgm", np.array([[0, 0], [1, 19]], np.uint8))
    write_manifest(tmp_path / "m.txt", [("i.ppm", "l.pgm")])
    m = load_manifest(tmp_path / "m.txt")
    counts = class_histogram(m, 20, ignore_index=19)
    assert counts[0] == 2 and counts[1] == 1 and counts.sum() == 3
    assert (tmp_path / "m.txt.hist").is_file()
    (tmp_path / "l.pgm").unlink()  # a cache hit must not touch the labels
    assert np.array_equal(class_histogram(load_manifest(tmp_path / "m.txt", check_files=False), 20, 19), counts)
    m.pairs.clear()
    with pytest.raises(ConfigError):
        class_histogram(m, 20)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        if p.suffix != ".hist":
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_synth_deterministic(tmp_path):
    a = synth_dataset(tmp_path / "a", 7, 6, (32, 48), 4)
    synth_dataset(tmp_path / "b", 7, 6, (32, 48), 4)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    synth_dataset(tmp_path / "c", 8, 6, (32, 48), 4)
    assert digest(tmp_path / "a") != digest(tmp_path / "c")
    assert len(a) == 6 and (tmp_path / "a" / "classes.csv").is_file()


def test_synth_coverage_and_totals(tmp_path):
    m = synth_dataset(tmp_path, 0, 100, (16, 32), 6)
    counts = class_histogram(m, 6)
    assert np.all(counts > 0) and counts.sum() == 100 * 16 * 32
    _, y, _ = load_samples(m, 6)
    assert y.max() < 6
    assert ClassTable.load(tmp_path / "classes.csv").ignore_index is None


def test_synth_errors(tmp_path):
    with pytest.raises(ConfigError):
        synth_dataset(tmp_path, 0, 1, (15, 64), 5)
    with pytest.raises(ConfigError):
        synth_dataset(tmp_path, 0, 1, (32, 32), 1)
    with pytest.raises(ConfigError):
        synth_dataset(tmp_path, 0, 0, (32, 32), 3)


def test_synth_images_track_labels(small_corpus):
    m = load_manifest(small_corpus / "train.txt")
    x, y, _ = load_samples(m, 4)
    # colour is class-correlated: per-class mean colours are well separated
    means = np.array([x.transpose(1, 0, 2, 3)[:, (y[:, 0] == c)].mean(axis=1) for c in range(4)])
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i)]
    assert min(gaps) > 0.3
