import numpy as np
import pytest

from deepinverse import baselines, datakit
from deepinverse.datakit import SyntheticSpec
from deepinverse.errors import DomainError, FormatError


def _pgm(path, pixels, maxval=255, comment=b""):
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    dtype = "u1" if maxval < 256 else ">u2"
    path.write_bytes(b"P5\n" + comment + b"%d %d\n%d\n" % (w, h, maxval)
                     + pixels.astype(dtype).tobytes())
    return path


def _corpus(dirpath, count, size=40):
    dirpath.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(count):
        datakit.write_pgm(dirpath / f"img{i:02d}.pgm", rng.uniform(size=(size, size + i)))
    return dirpath


def test_known_pgm_scaling(tmp_path):
    path = _pgm(tmp_path / "a.pgm", [[0, 128], [255, 64]])
    np.testing.assert_array_equal(datakit.load_grayscale(path),
                                  [[0.0, 128 / 255], [1.0, 64 / 255]])


@pytest.mark.parametrize("value, expected", [(0, 0.0), (255, 1.0)])
def test_black_and_white(tmp_path, value, expected):
    path = _pgm(tmp_path / "c.pgm", np.full((3, 5), value))
    img = datakit.load_grayscale(path)
    assert img.shape == (3, 5)
    assert np.all(img == expected)


def test_pgm_comments_and_16_bit(tmp_path):
    path = _pgm(tmp_path / "d.pgm", [[0, 1000, 65535]], maxval=65535, comment=b"# made up\n")
    np.testing.assert_array_equal(datakit.load_grayscale(path), [[0.0, 1000 / 65535, 1.0]])


def test_pgm_write_read_round_trip(tmp_path):
    pixels = np.random.default_rng(1).integers(0, 256, size=(7, 9))
    path = tmp_path / "r.pgm"
    datakit.write_pgm(path, pixels / 255.0)
    np.testing.assert_array_equal(datakit.read_pgm(path)[0], pixels)


def test_corrupt_images(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(FormatError, match="P5"):
        datakit.load_grayscale(bad)
    bad.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(FormatError, match="truncated") as info:
        datakit.load_grayscale(bad)
    assert info.value.path is not None
    bad.write_bytes(b"P5\nfour 4\n255\n")
    with pytest.raises(FormatError, match="integer"):
        datakit.load_grayscale(bad)
    with pytest.raises(FormatError, match="unsupported"):
        datakit.load_grayscale(tmp_path / "x.bmp")


def test_png_via_pillow(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    pixels = np.array([[0, 128], [255, 64]], dtype=np.uint8)
    pil.fromarray(pixels, mode="L").save(tmp_path / "a.png")
    np.testing.assert_array_equal(datakit.load_grayscale(tmp_path / "a.png"), pixels / 255.0)
    (tmp_path / "broken.png").write_bytes(b"\x89PNG\r\n\x1a\nnope")
    with pytest.raises(FormatError):
        datakit.load_grayscale(tmp_path / "broken.png")


def test_patch_examples():
    img = np.random.default_rng(0).uniform(size=(64, 64))
    (only,) = datakit.crop_patches(img, 64, 64)
    np.testing.assert_array_equal(only, img)
    big = np.random.default_rng(1).uniform(size=(128, 128))
    tiles = datakit.crop_patches(big, 64, 64, 64)
    assert len(tiles) == 4
    np.testing.assert_array_equal(np.block([[tiles[0], tiles[1]], [tiles[2], tiles[3]]]), big)
    assert len(datakit.crop_patches(np.zeros((100, 100)), 64, 64, 64)) == 1
    assert datakit.crop_patches(np.zeros((10, 10)), 64, 64) == []


def test_dct_sparse_has_exactly_k_coefficients():
    for seed in range(5):
        x = datakit.make_synthetic(SyntheticSpec(16, 16, "dct-sparse", 8, seed=seed), rescale=False)
        assert np.count_nonzero(np.abs(baselines.dct2(x)) > 1e-12) == 8
        scaled = datakit.make_synthetic(SyntheticSpec(16, 16, "dct-sparse", 8, seed=seed))
        assert scaled.min() == 0.0 and scaled.max() == 1.0


def test_synthetic_is_seeded():
    spec = SyntheticSpec(12, 10, "piecewise-constant", regions=3, seed=4)
    np.testing.assert_array_equal(datakit.make_synthetic(spec), datakit.make_synthetic(spec))
    with pytest.raises(DomainError):
        SyntheticSpec(4, 4, "noise")


def test_piecewise_constant_has_lower_tv_than_noise():
    rng = np.random.default_rng(0)
    for seed in range(20):
        x = datakit.make_synthetic(SyntheticSpec(16, 16, "piecewise-constant", regions=2, seed=seed))
        assert datakit.total_variation(x) < datakit.total_variation(rng.uniform(size=(16, 16)))
        assert 0.0 <= x.min() and x.max() <= 1.0


def test_manifest_split_half(tmp_path):
    man = datakit.build_manifest(_corpus(tmp_path / "src", 10), patch_h=16, split_fraction=0.5)
    train, test = man.sources("train"), man.sources("test")
    assert len(train) == len(test) == 5
    assert not set(train) & set(test)


def test_manifest_patches_in_range(tmp_path):
    man = datakit.build_manifest(_corpus(tmp_path / "src", 3), patch_h=16, stride=8)
    patches = man.load_patches("train")
    assert patches.shape[1:] == (16, 16)
    assert patches.min() >= 0.0 and patches.max() <= 1.0
    assert len(man.load_patches("test", limit=2)) == 2


def test_manifest_reproducible_and_round_trips(tmp_path):
    src = _corpus(tmp_path / "src", 6)
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    datakit.build_manifest(src, patch_h=16, seed=3).write(a)
    datakit.build_manifest(src, patch_h=16, seed=3).write(b)
    assert a.read_bytes() == b.read_bytes()
    back = datakit.read_manifest(a)
    assert back == datakit.build_manifest(src, patch_h=16, seed=3)
    c = tmp_path / "c.tsv"
    datakit.build_manifest(src, patch_h=16, seed=4).write(c)
    assert c.read_bytes() != a.read_bytes()


def test_manifest_needs_two_images(tmp_path):
    with pytest.raises(DomainError, match="both splits"):
        datakit.build_manifest(_corpus(tmp_path / "one", 1))
    (tmp_path / "empty").mkdir()
    with pytest.raises(DomainError, match="both splits"):
        datakit.build_manifest(tmp_path / "empty")


def test_malformed_manifest(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("train\tx\t0\t0\n")
    with pytest.raises(FormatError, match="header"):
        datakit.read_manifest(path)


def test_bundled_corpus_is_usable():
    paths = datakit.list_images(datakit.bundled_corpus())
    assert len(paths) >= 10
    man = datakit.build_manifest(datakit.bundled_corpus(), patch_h=32, stride=16)
    assert not set(man.sources("train")) & set(man.sources("test"))
    assert len([e for e in man.entries if e.split == "train"]) >= 500
    assert len([e for e in man.entries if e.split == "test"]) >= 50
