import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speckle_lab import synthetic
from speckle_lab.dataset import (
    BadMagicError,
    DatasetFormatError,
    DimensionOverflowError,
    GenerationError,
    GrayImage,
    SpeckleDataset,
    TruncatedFileError,
    UnsupportedFormatError,
    analyze_distribution,
    cifar10_bytes,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_dataset,
    idx_bytes,
    load_cifar10_bin,
    load_dataset,
    load_idx,
    load_pgm,
    load_pgm_dir,
    load_targets,
    rgb_to_gray,
    save_dataset,
    to_target,
    write_pgm,
)
from speckle_lab.optics import SpeckleImage


def test_idx_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, (4, 28, 28)).astype(np.uint8)
    # hand-built header, independent of the writer
    raw = struct.pack(">IIII", 0x803, 4, 28, 28) + imgs.tobytes()
    path = tmp_path / "imgs.idx3-ubyte"
    path.write_bytes(raw)
    loaded = load_idx(path)
    assert len(loaded) == 4
    assert all(im.height == 28 and im.width == 28 for im in loaded)
    assert np.array_equal(np.stack([im.pixels for im in loaded]), imgs)
    assert idx_bytes(imgs) == raw


def test_idx_errors(tmp_path):
    labels = tmp_path / "labels"
    labels.write_bytes(struct.pack(">II", 0x801, 3) + b"\x01\x02\x03")
    with pytest.raises(BadMagicError, match="not an image IDX file"):
        load_idx(labels)
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(28 * 28))
    with pytest.raises(TruncatedFileError, match="truncated"):
        load_idx(short)
    huge = tmp_path / "huge"
    huge.write_bytes(struct.pack(">IIII", 0x803, 2**31, 2**16, 2**16))
    with pytest.raises(DimensionOverflowError):
        load_idx(huge)
    # three distinct error types
    assert len({BadMagicError, TruncatedFileError, DimensionOverflowError}) == 3


def test_cifar_gray_conversion(tmp_path):
    grey = np.full((1, 3, 32, 32), 200, np.uint8)
    red = np.zeros((1, 3, 32, 32), np.uint8)
    red[:, 0] = 255
    path = tmp_path / "batch.bin"
    path.write_bytes(cifar10_bytes(np.concatenate([grey, red]), labels=[3, 7]))
    a, b = load_cifar10_bin(path)
    assert np.all(a.pixels == 200)
    assert np.all(b.pixels == round(0.299 * 255))  # 76.245 -> 76
    assert b.pixels[0, 0] == 76


@pytest.mark.parametrize("c", [0, 1, 127, 128, 254, 255])
def test_cifar_achromatic_is_identity(c):
    rgb = np.full((2, 3, 4, 4), c, np.uint8)
    assert np.all(rgb_to_gray(rgb) == c)


def test_cifar_rounding_half_up():
    # 0.299*R + 0.587*G + 0.114*B = 0.5 exactly for R=0, G=0, B=... no integer; use 1000-scaled check
    rgb = np.zeros((1, 3, 1, 1), np.uint8)
    rgb[0, :, 0, 0] = (5, 0, 5)  # 1.495 + 0.57 = 2.065 -> 2
    assert rgb_to_gray(rgb)[0, 0, 0] == 2
    rgb[0, :, 0, 0] = (0, 0, 35)  # 3.99 -> 4
    assert rgb_to_gray(rgb)[0, 0, 0] == 4


def test_cifar_empty_and_bad_size(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert load_cifar10_bin(empty) == []
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(3074))
    with pytest.raises(DatasetFormatError):
        load_cifar10_bin(bad)


def test_pgm_reader(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes([0, 85, 170, 255]))
    assert np.array_equal(load_pgm(p).pixels, [[0, 85], [170, 255]])
    p2 = tmp_path / "b.pgm"
    p2.write_bytes(b"P2\n2 2\n255\n0 85 170 255\n")
    with pytest.raises(UnsupportedFormatError, match="unsupported PGM variant"):
        load_pgm(p2)
    p3 = tmp_path / "c.pgm"
    p3.write_bytes(b"P5\n1 1\n65535\n\x00\x01")
    with pytest.raises(UnsupportedFormatError, match="16-bit PGM unsupported"):
        load_pgm(p3)


def test_pgm_writer_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (112, 92)).astype(np.uint8)
    write_pgm(img, tmp_path / "face.pgm")
    assert np.array_equal(load_pgm(tmp_path / "face.pgm").pixels, img)
    assert len(load_pgm_dir(tmp_path)) == 1


def test_to_target():
    img = GrayImage(np.arange(32 * 32).reshape(32, 32) % 256)
    assert to_target(img, 32) == img
    digit = np.zeros((28, 28), np.uint8)
    digit[10:18, 12:16] = 255
    out = to_target(digit, 32).pixels
    assert out.shape == (32, 32)
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 0
    for shape in [(28, 28), (112, 92), (5, 7), (32, 32), (1, 1)]:
        assert np.all(to_target(np.full(shape, 7, np.uint8), 32).pixels == 7)


def test_gray_image_validation():
    with pytest.raises(ValueError):
        GrayImage(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        GrayImage(np.full((2, 2), 300))


@pytest.fixture(scope="module")
def ten_targets():
    return [to_target(GrayImage(g)) for g in rgb_to_gray(synthetic.natural_images(10, seed=9))]


def test_generate_dataset_order_and_determinism(ten_targets, desk_screen, desk_config, tmp_path):
    ds = generate_dataset(ten_targets, desk_screen, desk_config, "nat")
    assert len(ds) == 10
    assert all(t is src for (_, t), src in zip(ds.records, ten_targets))
    assert ds.config_digest == desk_config.digest() and ds.screen_seed == 42
    again = generate_dataset(ten_targets, desk_screen, desk_config, "nat", workers=3)
    save_dataset(ds, tmp_path / "a.lsmd")
    save_dataset(again, tmp_path / "b.lsmd")
    assert (tmp_path / "a.lsmd").read_bytes() == (tmp_path / "b.lsmd").read_bytes()


def test_generate_dataset_names_degenerate_index(ten_targets, desk_screen, desk_config):
    targets = list(ten_targets)
    targets[6] = GrayImage(np.zeros((32, 32), np.uint8))
    with pytest.raises(GenerationError) as err:
        generate_dataset(targets, desk_screen, desk_config)
    assert err.value.index == 6 and "sample 6" in str(err.value)


def test_lsmd_layout(ten_targets, desk_screen, desk_config):
    ds = generate_dataset(ten_targets[:2], desk_screen, desk_config)
    raw = dataset_to_bytes(ds)
    magic, version, crop, count, seed = struct.unpack_from("<4sHHIQ", raw)
    assert (magic, version, crop, count, seed) == (b"LSMD", 1, 32, 2, 42)
    assert raw[20:52] == desk_config.digest()
    stride = 32 * 32 * 4 + 4 + 32 * 32
    assert len(raw) == 52 + 2 * stride
    first = np.frombuffer(raw, "<f4", 32 * 32, 52).reshape(32, 32)
    assert np.array_equal(first, ds.records[0][0].intensity)
    (scale,) = struct.unpack_from("<f", raw, 52 + 4096)
    assert scale == ds.records[0][0].scale
    assert raw[52 + 4100:52 + stride] == ds.records[0][1].pixels.tobytes()


@settings(max_examples=20, deadline=None)
@given(n=st.integers(0, 5), crop=st.sampled_from([4, 8, 32]), seed=st.integers(0, 2**64 - 1),
       data=st.randoms(use_true_random=False))
def test_lsmd_round_trip(n, crop, seed, data):
    rng = np.random.default_rng(data.randint(0, 2**32))
    records = [
        (SpeckleImage(rng.random((crop, crop)).astype(np.float32), float(np.float32(rng.random() + 0.1))),
         GrayImage(rng.integers(0, 256, (crop, crop)).astype(np.uint8)))
        for _ in range(n)
    ]
    ds = SpeckleDataset(records, seed, bytes(range(32)), crop_size=crop)
    raw = dataset_to_bytes(ds)
    back = dataset_from_bytes(raw)
    assert dataset_to_bytes(back) == raw
    assert back.screen_seed == seed and back.config_digest == bytes(range(32))
    for (s1, t1), (s2, t2) in zip(records, back.records):
        assert np.array_equal(s1.intensity, s2.intensity) and s1.scale == s2.scale and t1 == t2


def test_lsmd_rejects_garbage(tmp_path):
    with pytest.raises(BadMagicError):
        dataset_from_bytes(b"NOPE" + bytes(60))
    p = tmp_path / "x.lsmd"
    p.write_bytes(struct.pack("<4sHHIQ32s", b"LSMD", 1, 32, 3, 0, bytes(32)))
    with pytest.raises(TruncatedFileError):
        load_dataset(p)


def test_split_holds_out_last_tenth(ten_targets, desk_screen, desk_config):
    ds = generate_dataset(ten_targets, desk_screen, desk_config)
    train, held = ds.split()
    assert len(train) == 9 and len(held) == 1
    assert held.records[0] is ds.records[-1]


def test_distribution_examples():
    rep = analyze_distribution([np.full((4, 4), 128, np.uint8)])
    assert rep.gray_histogram[128] == 1.0 and rep.gray_histogram.sum() == 1.0
    assert tuple(rep.per_image_stats[0]) == (128.0, 0.0)
    rep = analyze_distribution([np.array([[0, 255]], np.uint8)])
    assert rep.gray_histogram[0] == rep.gray_histogram[255] == 0.5
    assert tuple(rep.per_image_stats[0]) == (127.5, 16256.25)
    with pytest.raises(ValueError):
        analyze_distribution([])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_distribution_properties(seed, n):
    rng = np.random.default_rng(seed)
    imgs = [rng.integers(0, 256, tuple(rng.integers(1, 20, 2))).astype(np.uint8) for _ in range(n)]
    rep = analyze_distribution(imgs)
    assert abs(rep.gray_histogram.sum() - 1) < 1e-9 and np.all(rep.gray_histogram >= 0)
    assert np.all((rep.per_image_stats[:, 0] >= 0) & (rep.per_image_stats[:, 0] <= 255))
    assert np.all(rep.per_image_stats[:, 1] >= 0)


def test_natural_histogram_broader_than_digits():
    nat = analyze_distribution(list(rgb_to_gray(synthetic.natural_images(200, seed=1))))
    dig = analyze_distribution(list(synthetic.digit_images(200, seed=1)))
    assert nat.entropy_bits > dig.entropy_bits
    # digit-like images: mean close to zero, as in the MNIST scatter
    assert dig.per_image_stats[:, 0].mean() < nat.per_image_stats[:, 0].mean()


def test_distribution_csv(tmp_path):
    rep = analyze_distribution(list(synthetic.digit_images(5, seed=2)))
    hist_path, stats_path = rep.write_csv(tmp_path)
    lines = hist_path.read_text().splitlines()
    assert lines[0] == "gray_value,probability" and len(lines) == 257
    assert abs(sum(float(l.split(",")[1]) for l in lines[1:]) - 1) < 1e-9
    slines = stats_path.read_text().splitlines()
    assert slines[0] == "image_index,mean,variance" and len(slines) == 6


def test_load_targets_formats(tmp_path):
    from speckle_lab.dataset import write_cifar10_bin, write_idx
    write_idx(synthetic.digit_images(3, seed=0), tmp_path / "d.idx")
    write_cifar10_bin(synthetic.natural_images(2, seed=0), tmp_path / "c.bin")
    (tmp_path / "faces").mkdir()
    for i, f in enumerate(synthetic.face_images(2, seed=0)):
        write_pgm(f, tmp_path / "faces" / f"{i}.pgm")
    for path, fmt, n in [("d.idx", "idx", 3), ("c.bin", "cifar", 2), ("faces", "pgm-dir", 2)]:
        imgs = load_targets(tmp_path / path, fmt)
        assert len(imgs) == n and all(im.pixels.shape == (32, 32) for im in imgs)
    with pytest.raises(BadMagicError):
        load_targets(tmp_path / "c.bin", "idx")
