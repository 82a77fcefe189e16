import gzip
import struct

import numpy as np
import pytest

from nestprune import data as D
from nestprune.config import ConfigError, DEFAULTS, dump_config, load_config, parse_config


def idx_bytes(array, code=0x08):
    return bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def test_idx_single_image_roundtrip(tmp_path):
    img = np.arange(28 * 28, dtype=np.uint8).reshape(1, 28, 28)
    D.write_idx(tmp_path / "i", img)
    D.write_idx(tmp_path / "l", np.array([7], dtype=np.uint8))
    assert (tmp_path / "i").read_bytes() == idx_bytes(img)
    ds = D.load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (1, 1, 28, 28) and ds.labels.tolist() == [7]
    assert np.array_equal(np.round(ds.images[0, 0] * 255).astype(np.uint8), img[0])


def test_idx_header_dims_and_gzip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    with gzip.open(tmp_path / "i.gz", "wb") as fh:
        fh.write(idx_bytes(img))
    assert np.array_equal(D.read_idx(tmp_path / "i.gz"), img)
    big_endian = np.arange(6, dtype=">i4").reshape(2, 3)
    (tmp_path / "b").write_bytes(idx_bytes(big_endian, 0x0C))
    assert D.read_idx(tmp_path / "b").tolist() == [[0, 1, 2], [3, 4, 5]]


def test_idx_negative_cases(tmp_path):
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    (tmp_path / "bad").write_bytes(b"\x01\x00\x08\x03" + idx_bytes(img)[4:])
    with pytest.raises(D.DataError, match="magic"):
        D.read_idx(tmp_path / "bad")
    (tmp_path / "short").write_bytes(idx_bytes(img)[:-1])
    with pytest.raises(D.DataError, match="bytes"):
        D.read_idx(tmp_path / "short")
    (tmp_path / "hdr").write_bytes(idx_bytes(img)[:7])
    with pytest.raises(D.DataError, match="header"):
        D.read_idx(tmp_path / "hdr")
    D.write_idx(tmp_path / "i", img)
    D.write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(D.DataError, match="labels"):
        D.load_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(D.DataError):
        D.read_idx(tmp_path / "missing")


def cifar_records(labels, rng):
    pix = rng.integers(0, 256, size=(len(labels), 3, 32, 32), dtype=np.uint8)
    raw = b"".join(bytes([l]) + p.tobytes() for l, p in zip(labels, pix))
    return raw, pix


def test_cifar_roundtrip(tmp_path, rng):
    raw, pix = cifar_records([3, 9], rng)
    (tmp_path / "c.bin").write_bytes(raw)
    ds = D.load_cifar_binary(tmp_path / "c.bin")
    assert ds.labels.tolist() == [3, 9] and ds.images.shape == (2, 3, 32, 32)
    assert np.array_equal(np.round(ds.images * 255).astype(np.uint8), pix)
    raw2, _ = cifar_records([0], rng)
    (tmp_path / "d.bin").write_bytes(raw2)
    assert len(D.load_cifar_binary([tmp_path / "c.bin", tmp_path / "d.bin"])) == 3


def test_cifar_truncated(tmp_path, rng):
    raw, _ = cifar_records([1, 2], rng)
    (tmp_path / "c.bin").write_bytes(raw[:-5])
    with pytest.raises(D.DataError, match="3073"):
        D.load_cifar_binary(tmp_path / "c.bin")


def test_blobs():
    a = D.synthetic_blobs(3, 10, 5, seed=4)
    b = D.synthetic_blobs(3, 10, 5, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert len(D.synthetic_blobs(2, 1, 3)) == 2
    sep = D.synthetic_blobs(4, 50, 8, seed=1, separation=40.0, spread=0.5)
    x = sep.images.reshape(len(sep), -1)
    # nearest-centre rule is a linear classifier; a margin check shows it separates perfectly
    centres = np.stack([x[sep.labels == c].mean(0) for c in range(4)])
    d = ((x[:, None] - centres[None]) ** 2).sum(-1)
    own = d[np.arange(len(x)), sep.labels]
    d[np.arange(len(x)), sep.labels] = np.inf
    assert np.all(d.min(1) - own > 0)


def test_batch_iterator():
    assert [b.tolist() for b in D.batch_iterator(5, 5, None)] == [[0, 1, 2, 3, 4]]
    one = list(D.batch_iterator(23, 4, 7))
    two = list(D.batch_iterator(23, 4, 7))
    assert all(np.array_equal(a, b) for a, b in zip(one, two))
    assert len(one[-1]) == 3
    assert sorted(np.concatenate(one).tolist()) == list(range(23))
    with pytest.raises(ValueError):
        list(D.batch_iterator(3, 0))


def test_dataset_validation():
    with pytest.raises(D.DataError):
        D.Dataset(np.zeros((2, 1, 1, 1)), [0, 3], 3)
    with pytest.raises(D.DataError):
        D.Dataset(np.zeros((2, 1, 1, 1)), [0], 3)


def test_stratified_split():
    labels = np.repeat(np.arange(4), 10)
    tr, te = D.stratified_split(labels, 3, seed=0)
    assert len(te) == 12 and np.bincount(labels[te]).tolist() == [3] * 4
    assert not set(tr) & set(te) and len(tr) + len(te) == 40


def test_mnist_from_idx_dir(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    for stem, n in (("train", 6), ("t10k", 4)):
        D.write_idx(tmp_path / f"{stem}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        D.write_idx(tmp_path / f"{stem}-labels-idx1-ubyte", rng.integers(0, 10, n, dtype=np.uint8))
    monkeypatch.setenv("MNIST_DIR", str(tmp_path))
    tr, te = D.load_mnist()
    assert (len(tr), len(te)) == (6, 4) and tr.images.shape[1:] == (1, 28, 28)


def test_config_parse():
    cfg = parse_config("# comment\ncapacities = 0.9, 0.5\neta=0.1  # inline\n\nmode = frozen_scores\n")
    assert cfg["capacities"] == (0.9, 0.5) and cfg["eta"] == 0.1 and cfg["mode"] == "frozen_scores"
    assert cfg["alpha"] == DEFAULTS["alpha"] and cfg.lines == {"capacities": 2, "eta": 3, "mode": 5}


@pytest.mark.parametrize("text,where", [
    ("eta = 0.1\nbogus = 3\n", ":2: unknown key"),
    ("epochs = 2\nepochs = 3\n", ":2: duplicate key"),
    ("\n\nepochs = many\n", ":3: bad value"),
    ("capacities 0.5\n", ":1: expected"),
    ("integrate = maybe\n", ":1: bad value"),
])
def test_config_errors_have_line_numbers(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text, "run.cfg")


def test_config_dump_roundtrip(tmp_path):
    cfg = parse_config("capacities = 0.7,0.3\nhidden = 32,16\nbatchnorm = false\n")
    values = {k: v for k, v in cfg.values.items() if v is not None}
    (tmp_path / "r.cfg").write_text(dump_config(values))
    again = load_config(tmp_path / "r.cfg")
    assert {k: v for k, v in again.values.items() if v is not None} == values
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
