import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from latent_dnf.data import (BadMagic, BinaryDataset, GrayImageSet, TrailingBytes,
                             TruncatedPayload, downsample, load_dataset, load_mnist, parse_idx,
                             read_idx, save_dataset, serialize_idx, stochastic_binarize,
                             synthetic_flow_dataset)
from latent_dnf.nn import ContractViolation
from latent_dnf.oracle import enumerate_marginals

MINIMAL = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 128, 255, 7])


def test_minimal_image_file():
    imgs = parse_idx(MINIMAL)
    assert (imgs.count, imgs.height, imgs.width) == (1, 2, 2)
    np.testing.assert_array_equal(imgs.pixels[0], [[0, 128], [255, 7]])


def test_label_file():
    labels = parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 3, 4, 1, 9]))
    np.testing.assert_array_equal(labels, [4, 1, 9])


def test_truncated_payload_names_lengths():
    with pytest.raises(TruncatedPayload, match="expected 20 bytes, got 19"):
        parse_idx(MINIMAL[:-1])


def test_trailing_bytes():
    with pytest.raises(TrailingBytes):
        parse_idx(MINIMAL + b"\x00")


@pytest.mark.parametrize("magic", [b"\x00\x00\x08\x02", b"\x01\x00\x08\x03", b"\x00\x00\x09\x03"])
def test_bad_magic(magic):
    with pytest.raises(BadMagic):
        parse_idx(magic + MINIMAL[4:])


def test_error_kinds_are_distinct():
    assert len({BadMagic, TruncatedPayload, TrailingBytes}) == 3
    assert not issubclass(TruncatedPayload, TrailingBytes)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.data())
def test_image_round_trip(n, h, w, data):
    pix = data.draw(st.lists(st.integers(0, 255), min_size=n * h * w, max_size=n * h * w))
    raw = serialize_idx(GrayImageSet(np.array(pix, dtype=np.uint8).reshape(n, h, w)))
    assert serialize_idx(parse_idx(raw)) == raw


def test_gzip_file(tmp_path):
    path = tmp_path / "x-images-idx3-ubyte.gz"
    path.write_bytes(gzip.compress(MINIMAL))
    assert read_idx(path).pixels.tolist() == [[[0, 128], [255, 7]]]


@pytest.mark.parametrize("block,expected", [([0, 0, 0, 0], 0), ([100, 100, 200, 200], 150),
                                            ([1, 2, 2, 2], 2), ([1, 1, 1, 2], 1)])
def test_downsample_block_mean(block, expected):
    imgs = GrayImageSet(np.array(block, dtype=np.uint8).reshape(1, 2, 2))
    assert downsample(imgs, 2).pixels[0, 0, 0] == expected


def test_downsample_identity_and_divisibility():
    imgs = GrayImageSet(np.arange(36, dtype=np.uint8).reshape(1, 6, 6))
    np.testing.assert_array_equal(downsample(imgs, 1).pixels, imgs.pixels)
    assert downsample(imgs, 3).pixels.shape == (1, 2, 2)
    with pytest.raises(ContractViolation):
        downsample(imgs, 4)


def test_binarize_extremes():
    imgs = GrayImageSet(np.array([[[0, 255]]] * 50, dtype=np.uint8))
    bits = stochastic_binarize(imgs, 0).bits
    assert np.all(bits[:, 0] == 0) and np.all(bits[:, 1] == 1)


def test_binarize_rate():
    imgs = GrayImageSet(np.full((1000, 10, 10), 128, dtype=np.uint8))
    bits = stochastic_binarize(imgs, 3).bits
    p = 128 / 255
    assert abs(bits.mean() - p) < 3 * np.sqrt(p * (1 - p) / bits.size)


def test_binarize_is_keyed_per_example():
    rng = np.random.default_rng(0)
    imgs = GrayImageSet(rng.integers(0, 256, (20, 4, 4)))
    full = stochastic_binarize(imgs, 5).bits
    again = stochastic_binarize(imgs, 5).bits
    np.testing.assert_array_equal(full, again)
    order = rng.permutation(20)
    shuffled = stochastic_binarize(GrayImageSet(imgs.pixels[order]), 5, example_ids=order).bits
    np.testing.assert_array_equal(shuffled, full[order])
    assert not np.array_equal(stochastic_binarize(imgs, 6).bits, full)


def test_synthetic_base_only_matches_beta():
    ds, _ = synthetic_flow_dataset(4, 0, 0, 20_000, beta=0.3)
    se = np.sqrt(0.3 * 0.7 / len(ds))
    assert np.all(np.abs(ds.bits.mean(axis=0) - 0.3) < 3 * se)


def test_synthetic_distribution_matches_model():
    ds, model = synthetic_flow_dataset(4, 1, 2, 100_000, hidden=(8,), scale=1.0)
    codes = ds.bits.astype(int) @ (1 << np.arange(3, -1, -1))
    observed = np.bincount(codes, minlength=16)
    expected = np.exp(enumerate_marginals(model)) * len(ds)
    assert chisquare(observed, expected).pvalue > 0.001


def test_synthetic_is_deterministic():
    a, _ = synthetic_flow_dataset(6, 2, 9, 100)
    b, _ = synthetic_flow_dataset(6, 2, 9, 100)
    np.testing.assert_array_equal(a.bits, b.bits)
    assert a.provenance == b.provenance


def test_dataset_cache_round_trip(tmp_path):
    ds = BinaryDataset(np.random.default_rng(0).integers(0, 2, (13, 7)), {"seed": 4, "note": "x"})
    save_dataset(tmp_path / "d.bds", ds)
    raw = (tmp_path / "d.bds").read_bytes()
    assert raw[:4] == b"BDS1"
    assert struct.unpack("<IQ", raw[4:16]) == (7, 13)
    back = load_dataset(tmp_path / "d.bds")
    np.testing.assert_array_equal(back.bits, ds.bits)
    assert back.provenance == ds.provenance


def test_dataset_cache_rejects_truncation(tmp_path):
    ds = BinaryDataset(np.ones((4, 4)), {})
    save_dataset(tmp_path / "d.bds", ds)
    raw = (tmp_path / "d.bds").read_bytes()
    (tmp_path / "e.bds").write_bytes(raw[:-1])
    with pytest.raises(TruncatedPayload):
        load_dataset(tmp_path / "e.bds")


def test_load_mnist_from_idx_files(tmp_path):
    rng = np.random.default_rng(1)
    imgs = GrayImageSet(rng.integers(0, 256, (6, 4, 4)))
    (tmp_path / "train-images-idx3-ubyte").write_bytes(serialize_idx(imgs))
    ds = load_mnist(tmp_path, "train", seed=0, factor=2)
    assert ds.D == 4 and len(ds) == 6
    assert ds.provenance["downsample"] == 2 and len(ds.provenance["sha256"]) == 64
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path, "test")


def test_binary_dataset_validation():
    with pytest.raises(ContractViolation):
        BinaryDataset(np.array([[0, 2]]))


def test_synthetic_provenance_records_exact_nll():
    ds, model = synthetic_flow_dataset(4, 1, 3, 500, hidden=(8,))
    logp = enumerate_marginals(model)
    codes = ds.bits.astype(int) @ (1 << np.arange(3, -1, -1))
    assert ds.provenance["exact_nll"] == pytest.approx(-logp[codes].mean(), rel=1e-12)
    big, _ = synthetic_flow_dataset(16, 1, 0, 10)
    assert "exact_nll" not in big.provenance
