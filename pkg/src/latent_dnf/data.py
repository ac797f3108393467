"""Datasets: IDX (MNIST) parsing, stochastic binarisation, block downsampling,
synthetic data drawn from a known flow, and a packed binary cache format."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import BaseParams
from .model import LatentFlow
from .nn import ContractViolation
from .rng import substream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"BDS1"
# synthetic datasets store their exact NLL when 2^((L+1)D) enumerations are affordable
EXACT_NLL_BITS = 18


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedPayload(IdxError):
    pass


class TrailingBytes(IdxError):
    pass


@dataclass
class GrayImageSet:
    pixels: np.ndarray  # (count, height, width) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or min(self.pixels.shape[1:]) < 1:
            raise ContractViolation("images must have shape (count, height, width)")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min(initial=0) < 0 or self.pixels.max(initial=0) > 255:
                raise ContractViolation("intensities must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def count(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


@dataclass
class BinaryDataset:
    bits: np.ndarray  # (count, D) uint8
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2:
            raise ContractViolation("bits must have shape (count, D)")
        if np.any(self.bits > 1):
            raise ContractViolation("bits must be 0 or 1")

    @property
    def D(self):
        return self.bits.shape[1]

    def __len__(self):
        return self.bits.shape[0]

    def split(self, n_first):
        a = BinaryDataset(self.bits[:n_first], dict(self.provenance, split="head"))
        b = BinaryDataset(self.bits[n_first:], dict(self.provenance, split="tail"))
        return a, b


# -- IDX ---------------------------------------------------------------------------


def parse_idx(raw: bytes):
    """Decode an IDX file. Images give a GrayImageSet, labels a uint8 vector."""
    if len(raw) < 4:
        raise TruncatedPayload(f"header needs 4 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise BadMagic(f"unsupported magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedPayload(f"header needs {head} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise TruncatedPayload(f"expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise TrailingBytes(f"expected {expected} bytes, got {len(raw)}")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims).copy()
    return GrayImageSet(payload) if ndim == 3 else payload


def serialize_idx(obj) -> bytes:
    if isinstance(obj, GrayImageSet):
        arr, magic = obj.pixels, IMAGE_MAGIC
    else:
        arr, magic = np.asarray(obj, dtype=np.uint8), LABEL_MAGIC
        if arr.ndim != 1:
            raise ContractViolation("labels must be a vector")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def read_idx(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- image preprocessing -------------------------------------------------------------


def downsample(images: GrayImageSet, factor: int) -> GrayImageSet:
    """Block mean over factor x factor tiles, rounded half up."""
    factor = int(factor)
    if factor < 1 or images.height % factor or images.width % factor:
        raise ContractViolation(
            f"{images.height}x{images.width} is not divisible by factor {factor}")
    if factor == 1:
        return GrayImageSet(images.pixels.copy())
    n, h, w = images.pixels.shape
    blocks = images.pixels.reshape(n, h // factor, factor, w // factor, factor)
    total = blocks.sum(axis=(2, 4), dtype=np.int64)
    area = factor * factor
    # integer half-up rounding of total / area
    return GrayImageSet(((2 * total + area) // (2 * area)).astype(np.uint8))


def stochastic_binarize(images: GrayImageSet, seed, example_ids=None,
                        provenance=None) -> BinaryDataset:
    """bit ~ Bern(intensity / 255).

    Example i draws its pixels from the stream keyed by (seed, "binarize", id),
    one uniform per pixel in raster order, so a pixel's bit depends only on
    (seed, example id, pixel index).
    """
    flat = images.pixels.reshape(images.count, -1)
    ids = np.arange(images.count) if example_ids is None else np.asarray(example_ids)
    probs = flat / 255.0
    bits = np.empty(flat.shape, dtype=np.uint8)
    for row, idx in enumerate(ids):
        u = substream(seed, "binarize", idx).random(flat.shape[1])
        bits[row] = u < probs[row]
    prov = dict(provenance or {})
    prov.update(binarize_seed=int(seed), height=images.height, width=images.width)
    return BinaryDataset(bits, prov)


def load_mnist(data_dir, split="train", seed=0, factor=1, limit=None):
    """Binarised MNIST from ``<data_dir>/<split>-images-idx3-ubyte[.gz]``."""
    prefix = "train" if split == "train" else "t10k"
    stem = Path(data_dir) / f"{prefix}-images-idx3-ubyte"
    path = stem if stem.exists() else stem.with_name(stem.name + ".gz")
    if not path.exists():
        raise FileNotFoundError(f"no MNIST images at {stem}[.gz]")
    images = read_idx(path)
    if limit is not None:
        images = GrayImageSet(images.pixels[:limit])
    images = downsample(images, factor)
    return stochastic_binarize(images, seed, provenance={
        "source": path.name, "sha256": file_digest(path), "downsample": int(factor),
        "split": split})


# -- synthetic ground truth ------------------------------------------------------------


def synthetic_flow_dataset(D, L, seed, n, hidden=(32,), scale=2.0, beta=0.1):
    """Sample n examples from a randomly initialised flow.

    Returns ``(dataset, model)``. The generating model is kept so the exact data
    likelihood can be enumerated for small D. ``scale`` sets the standard
    deviation of the Gaussian conditioner weights: larger values give more
    confident conditionals and hence more learnable structure.
    """
    rng = substream(seed, "synthetic-params")
    base = BaseParams.constant(D, beta) if np.isscalar(beta) else BaseParams(beta)
    model = LatentFlow(D, L, base, made_hidden=tuple(hidden), posterior_hidden=None,
                       rng=rng)
    for name, p in model.param_groups().items():
        if name != "beta":
            p[...] = rng.normal(0.0, scale, size=p.shape)
    draw = substream(seed, "synthetic-data")
    u_unif = draw.random((n, L, D))
    y_unif = draw.random((n, D))
    x, _ = model.sample_data(u_unif, y_unif)
    prov = {"synthetic": True, "seed": int(seed), "D": int(D), "L": int(L),
            "hidden": list(hidden), "scale": float(scale)}
    if (L + 1) * D <= EXACT_NLL_BITS:
        prov["exact_nll"] = exact_mean_nll(model, x)
    return BinaryDataset(x, prov), model


def exact_mean_nll(model: LatentFlow, bits):
    """Mean -log p_X over the rows of ``bits``, enumerating each distinct row once."""
    from .oracle import enumerate_marginal

    rows, counts = np.unique(np.asarray(bits), axis=0, return_counts=True)
    logp = np.array([enumerate_marginal(model, r) for r in rows])
    return float(-(counts * logp).sum() / counts.sum())


# -- cache format -----------------------------------------------------------------------


def save_dataset(path, ds: BinaryDataset):
    """BDS1: magic, u32 D, u64 count, packed bits row-major, then a u32
    length-prefixed UTF-8 provenance block (sorted key=value lines)."""
    packed = np.packbits(ds.bits.reshape(-1)) if ds.bits.size else np.zeros(0, np.uint8)
    prov = json.dumps(ds.provenance, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQ", ds.D, len(ds)))
        fh.write(packed.tobytes())
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)


def load_dataset(path) -> BinaryDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise BadMagic(f"{path} is not a BDS1 file")
    D, count = struct.unpack("<IQ", raw[4:16])
    nbits = D * count
    nbytes = (nbits + 7) // 8
    end = 16 + nbytes
    if len(raw) < end + 4:
        raise TruncatedPayload(f"expected at least {end + 4} bytes, got {len(raw)}")
    bits = np.unpackbits(np.frombuffer(raw[16:end], np.uint8))[:nbits].reshape(count, D)
    (plen,) = struct.unpack("<I", raw[end:end + 4])
    if len(raw) != end + 4 + plen:
        raise TruncatedPayload(f"provenance block: expected {plen} bytes")
    prov = json.loads(raw[end + 4:].decode("utf-8"))
    return BinaryDataset(bits, prov)
