import gzip
import struct

import numpy as np
import pytest

from conftest import have_mnist, mnist_root
from pnetlab.data import (
    load_cifar10,
    load_image_dir,
    load_mnist,
    read_cifar10_batch,
    read_idx_images,
    read_idx_labels,
)
from pnetlab.errors import FormatError


def write_idx(path, images, labels):
    n, r, c = images.shape
    (path / "t10k-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, r, c) + images.astype(np.uint8).tobytes())
    (path / "t10k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


def test_idx_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 28, 28))
    img[0, 0, 0] = 255
    lab = np.array([0, 3, 9, 1, 7])
    write_idx(tmp_path, img, lab)
    x, y = load_mnist(tmp_path, "test")
    assert x.shape == (5, 28, 28, 1) and y.tolist() == lab.tolist()
    assert x[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(x[..., 0] * 255, img)


def test_idx_gzip(tmp_path, rng):
    img = rng.integers(0, 256, (2, 4, 4))
    raw = struct.pack(">IIII", 0x803, 2, 4, 4) + img.astype(np.uint8).tobytes()
    (tmp_path / "a.gz").write_bytes(gzip.compress(raw))
    assert read_idx_images(tmp_path / "a.gz").shape == (2, 4, 4, 1)


def test_idx_bad_magic(tmp_path):
    (tmp_path / "f").write_bytes(struct.pack(">IIII", 0x801, 1, 2, 2) + bytes(4))
    with pytest.raises(FormatError):
        read_idx_images(tmp_path / "f")


def test_idx_truncated(tmp_path):
    (tmp_path / "f").write_bytes(struct.pack(">IIII", 0x803, 3, 2, 2) + bytes(5))
    with pytest.raises(FormatError, match="truncated"):
        read_idx_images(tmp_path / "f")
    (tmp_path / "g").write_bytes(struct.pack(">II", 0x801, 4) + bytes(2))
    with pytest.raises(FormatError, match="truncated"):
        read_idx_labels(tmp_path / "g")


def test_idx_label_out_of_range(tmp_path):
    (tmp_path / "g").write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 10, 2]))
    with pytest.raises(FormatError) as e:
        read_idx_labels(tmp_path / "g")
    assert e.value.offset == 9


@pytest.mark.skipif(not have_mnist(), reason="MNIST not available")
def test_official_mnist_header():
    x = read_idx_images(mnist_root() / "train-images-idx3-ubyte")
    assert x.shape == (60000, 28, 28, 1)
    assert read_idx_labels(mnist_root() / "train-labels-idx1-ubyte").shape == (60000,)


def cifar_record(label, r, g, b):
    return bytes([label]) + bytes(r.ravel()) + bytes(g.ravel()) + bytes(b.ravel())


def test_cifar_manual_decode(tmp_path, rng):
    planes = [rng.integers(0, 256, (32, 32), dtype=np.uint8) for _ in range(6)]
    data = cifar_record(6, *planes[:3]) + cifar_record(2, *planes[3:])
    (tmp_path / "test_batch.bin").write_bytes(data)
    x, y = load_cifar10(tmp_path, "test")
    assert y.tolist() == [6, 2]
    assert x.shape == (2, 32, 32, 3)
    # pixel (row 5, col 17) of record 1: bytes at 1 + c*1024 + 5*32 + 17 within the record
    rec = data[3073:]
    for c in range(3):
        assert x[1, 5, 17, c] == rec[1 + c * 1024 + 5 * 32 + 17] / 255.0


def test_cifar_bad_size(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(3073 + 5))
    with pytest.raises(FormatError):
        read_cifar10_batch(tmp_path / "b.bin")


def test_cifar_bad_label(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes([11]) + bytes(3072))
    with pytest.raises(FormatError):
        read_cifar10_batch(tmp_path / "b.bin")


def test_cifar_missing(tmp_path):
    with pytest.raises(FormatError):
        load_cifar10(tmp_path, "train")


def test_image_dir_empty(tmp_path, caplog):
    x, y, classes, skipped = load_image_dir(tmp_path, 8)
    assert len(x) == 0 and classes == [] and skipped == 0
    assert "no images" in caplog.text


def test_image_dir_pgm_replicated(tmp_path):
    (tmp_path / "cat").mkdir()
    pix = bytes(range(16))
    (tmp_path / "cat" / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + pix)
    x, y, classes, skipped = load_image_dir(tmp_path, 4, channels=3)
    assert x.shape == (1, 4, 4, 3) and y.tolist() == [0] and classes == ["cat"]
    np.testing.assert_array_equal(x[0, :, :, 0], x[0, :, :, 2])
    assert x[0, 3, 3, 1] == 15 / 255.0


def test_image_dir_ppm_resize_and_skip(tmp_path, caplog):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
    (tmp_path / "a" / "x.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(range(12)))
    (tmp_path / "b" / "y.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    (tmp_path / "b" / "junk.ppm").write_bytes(b"garbage")
    x, y, classes, skipped = load_image_dir(tmp_path, 4)
    assert x.shape == (2, 4, 4, 3) and y.tolist() == [0, 1] and skipped == 1
    # nearest neighbour: each source pixel becomes a 2x2 block
    assert np.array_equal(x[0, 0, 0], x[0, 1, 1])
    assert x[0, 0, 0].tolist() == [0.0, 1 / 255, 2 / 255]
    assert "skipping" in caplog.text
