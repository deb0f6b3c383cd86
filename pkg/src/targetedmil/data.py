"""Instance pools, multi-instance bags and their on-disk container.

Bag datasets are written in the ``TMILDS01`` container (little-endian)::

    b"TMILDS01"                      8-byte magic
    u32 header_len                   length of the JSON header
    header_len bytes                 UTF-8 JSON: version, target_class, m,
                                     n_bags, generation_config
    u32[n_bags]                      bag sizes (dimension table)
    u8[n_bags]                       bag labels
    f64[total_instances * m]         instances, row-major, bags concatenated
    u8[total_instances]              hidden instance labels
    u32 crc32                        CRC-32 of every preceding byte
"""

from __future__ import annotations

import gzip
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
DATASET_MAGIC = b"TMILDS01"
DATASET_VERSION = 1


class DataFormatError(ValueError):
    pass


# --------------------------------------------------------------------- IDX


def _maybe_gunzip(raw: bytes) -> bytes:
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Decode an IDX image stream into ``[N, rows, cols]`` floats in [0, 1]."""
    raw = _maybe_gunzip(raw)
    if len(raw) < 16:
        raise DataFormatError("IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">4I", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x}")
    need = n * rows * cols
    if len(raw) - 16 != need:
        raise DataFormatError(f"IDX image payload has {len(raw) - 16} bytes, header declares {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(n, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    raw = _maybe_gunzip(raw)
    if len(raw) < 8:
        raise DataFormatError("IDX label header truncated")
    magic, n = struct.unpack(">2I", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x}")
    if len(raw) - 8 != n:
        raise DataFormatError(f"IDX label payload has {len(raw) - 8} bytes, header declares {n}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"label {labels.max()} outside 0-9")
    return labels


@dataclass
class InstancePool:
    images: np.ndarray  # [N, m]
    class_labels: np.ndarray  # [N]
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise ValueError("pool images must be a 2-D [N, m] array")
        if len(self.images) != len(self.class_labels):
            raise ValueError("image and label counts differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / cand).exists():
            return directory / cand
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_pool(images_path, labels_path, split: str) -> InstancePool:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    return InstancePool(images.reshape(len(images), -1), labels, split)


def load_mnist_split(directory, split: str) -> InstancePool:
    """Load the standard MNIST-named IDX pair for ``split`` from ``directory``."""
    directory = Path(directory)
    img, lab = IDX_NAMES[split]
    return load_pool(_find(directory, img), _find(directory, lab), split)


# -------------------------------------------------------------------- bags


@dataclass
class Bag:
    instances: np.ndarray  # [n, m]
    bag_label: int
    instance_labels: np.ndarray  # [n], hidden from training

    def __post_init__(self):
        self.instances = np.atleast_2d(np.asarray(self.instances, dtype=np.float64))
        self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
        if len(self.instances) < 1:
            raise ValueError("a bag needs at least one instance")
        if len(self.instance_labels) != len(self.instances):
            raise ValueError("instance_labels length differs from instance count")
        if int(self.bag_label) != int(self.instance_labels.max() > 0):
            raise ValueError("bag label violates the standard multi-instance assumption")
        self.bag_label = int(self.bag_label)

    def __len__(self) -> int:
        return len(self.instances)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.bag_label == other.bag_label
            and np.array_equal(self.instances, other.instances)
            and np.array_equal(self.instance_labels, other.instance_labels)
        )


@dataclass
class BagConfig:
    n_bags: int = 500
    mean_size: float = 50.0
    std_size: float = 10.0
    witness_rate: float = 0.1
    positive_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_bags < 1:
            raise ValueError("n_bags must be >= 1")
        if self.mean_size < 2:
            raise ValueError("mean_size must be >= 2")
        if self.std_size < 0:
            raise ValueError("std_size must be >= 0")
        if not 0 < self.witness_rate < 1:
            raise ValueError(f"witness_rate must lie in (0, 1), got {self.witness_rate}")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")


@dataclass
class BagDataset:
    bags: list[Bag]
    target_class: int
    generation_config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def m(self) -> int:
        return self.bags[0].instances.shape[1]

    def summary(self) -> dict:
        sizes = np.array([len(b) for b in self.bags])
        return {
            "n_bags": len(self.bags),
            "positive_fraction": float(np.mean([b.bag_label for b in self.bags])),
            "mean_size": float(sizes.mean()),
        }


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_bags(
    pool: InstancePool,
    target_class: int,
    n_bags: int = 500,
    mean_size: float = 50.0,
    std_size: float = 10.0,
    witness_rate: float = 0.1,
    positive_fraction: float = 0.5,
    seed: int = 0,
) -> BagDataset:
    """Build MNIST-bags style data from a labelled instance pool.

    Sizes are drawn from N(mean_size, std_size) and clamped to at least 2.
    A positive bag holds ``max(1, round(witness_rate * size))`` target-class
    instances at random positions; all other instances come from the other
    classes.  Sampling is with replacement.
    """
    cfg = BagConfig(n_bags, mean_size, std_size, witness_rate, positive_fraction, seed)
    cfg.validate()
    target_idx = np.flatnonzero(pool.class_labels == target_class)
    other_idx = np.flatnonzero(pool.class_labels != target_class)
    if target_idx.size == 0:
        raise ValueError(f"target class {target_class} absent from the pool")
    if other_idx.size == 0:
        raise ValueError("pool has no non-target instances")

    rng = np.random.default_rng(seed)
    n_pos = round_half_up(positive_fraction * n_bags)
    labels = np.zeros(n_bags, dtype=np.int64)
    labels[rng.permutation(n_bags)[:n_pos]] = 1

    bags = []
    for y in labels:
        size = max(2, round_half_up(rng.normal(mean_size, std_size)))
        inst_labels = np.zeros(size, dtype=np.int64)
        if y:
            w = min(size, max(1, round_half_up(witness_rate * size)))
            inst_labels[rng.choice(size, w, replace=False)] = 1
        idx = np.empty(size, dtype=np.int64)
        pos = inst_labels == 1
        idx[pos] = rng.choice(target_idx, int(pos.sum()))
        idx[~pos] = rng.choice(other_idx, int((~pos).sum()))
        bags.append(Bag(pool.images[idx], int(y), inst_labels))
    return BagDataset(bags, int(target_class), asdict(cfg))


# -------------------------------------------------------- synthetic (iVAE)


@dataclass
class Mixing:
    """x = logistic(z @ A.T + c); injective when A has full column rank."""

    A: np.ndarray
    c: np.ndarray
    identity: bool = False

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.identity:
            return np.array(z, dtype=np.float64)
        return 0.5 * (1.0 + np.tanh(0.5 * (z @ self.A.T + self.c)))


@dataclass
class SyntheticDataset:
    bags: list[Bag]
    z_true: list[np.ndarray]  # one [n_i, d] array per bag
    group_of_bag: np.ndarray
    prior_means: np.ndarray  # [k_groups, d]
    prior_stds: np.ndarray  # [k_groups, d]
    mixing: Mixing
    noise_std: float
    condition_number: float

    def all_latents(self) -> np.ndarray:
        return np.concatenate(self.z_true, axis=0)

    def all_instances(self) -> np.ndarray:
        return np.concatenate([b.instances for b in self.bags], axis=0)


def natural_parameter_matrix(means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    """Differences of Gaussian natural parameters against group 0.

    Each group contributes eta = (mu / s^2, -1 / (2 s^2)) per dimension; the
    result stacks rows eta_g - eta_0 for g = 1..2d and is 2d x 2d.
    """
    d = means.shape[1]
    var = stds**2
    eta = np.concatenate([means / var, -0.5 / var], axis=1)
    return eta[1 : 2 * d + 1] - eta[0]


def make_synthetic_identifiable(
    d: int = 2,
    m: int = 10,
    k_groups: int = 5,
    bags_per_group: int = 100,
    bag_size: int = 40,
    noise_std: float = 0.01,
    seed: int = 0,
    identity_mixing: bool = False,
) -> SyntheticDataset:
    """Draw conditionally Gaussian latents per bag group and mix them injectively."""
    if k_groups < 2 * d + 1:
        raise ValueError(
            f"k_groups={k_groups} is too few distinct bag priors: need >= {2 * d + 1}"
        )
    if m < d:
        raise ValueError("m must be >= d for an injective mixing")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if identity_mixing and m != d:
        raise ValueError("identity mixing needs m == d")

    rng = np.random.default_rng(seed)
    for _ in range(100):
        means = rng.uniform(-2.0, 2.0, size=(k_groups, d))
        stds = rng.uniform(0.3, 1.5, size=(k_groups, d))
        cond = float(np.linalg.cond(natural_parameter_matrix(means, stds)))
        if cond < 1e6:
            break
    else:  # pragma: no cover - vanishingly unlikely with continuous draws
        raise RuntimeError("could not draw invertible natural-parameter differences")

    if identity_mixing:
        mixing = Mixing(np.eye(d), np.zeros(d), identity=True)
    else:
        while True:
            A = rng.normal(0.0, 1.0, size=(m, d))
            if np.linalg.matrix_rank(A) == d:
                break
        mixing = Mixing(A, rng.normal(0.0, 0.5, size=m))

    bags, zs, groups = [], [], []
    for g in range(k_groups):
        for _ in range(bags_per_group):
            z = means[g] + stds[g] * rng.standard_normal((bag_size, d))
            x = mixing(z)
            if noise_std > 0:
                x = x + noise_std * rng.standard_normal(x.shape)
            bags.append(Bag(x, 1, np.ones(bag_size, dtype=np.int64)))
            zs.append(z)
            groups.append(g)
    return SyntheticDataset(
        bags, zs, np.array(groups), means, stds, mixing, float(noise_std), cond
    )


# --------------------------------------------------------------- container


def save_bags(dataset: BagDataset, path) -> None:
    bags = dataset.bags
    m = bags[0].instances.shape[1] if bags else 0
    header = json.dumps(
        {
            "version": DATASET_VERSION,
            "target_class": dataset.target_class,
            "m": m,
            "n_bags": len(bags),
            "generation_config": dataset.generation_config,
        },
        sort_keys=True,
    ).encode()
    parts = [
        DATASET_MAGIC,
        struct.pack("<I", len(header)),
        header,
        np.array([len(b) for b in bags], dtype="<u4").tobytes(),
        np.array([b.bag_label for b in bags], dtype=np.uint8).tobytes(),
    ]
    parts += [np.ascontiguousarray(b.instances, dtype="<f8").tobytes() for b in bags]
    parts += [b.instance_labels.astype(np.uint8).tobytes() for b in bags]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_bags(path) -> BagDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not a TMILDS01 file")
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    (hlen,) = struct.unpack_from("<I", body, 8)
    header = json.loads(body[12 : 12 + hlen])
    if header.get("version") != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported version {header.get('version')}")
    n, m = header["n_bags"], header["m"]
    off = 12 + hlen
    sizes = np.frombuffer(body, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    bag_labels = np.frombuffer(body, dtype=np.uint8, count=n, offset=off)
    off += n
    total = int(sizes.sum())
    if len(body) != off + total * m * 8 + total:
        raise DataFormatError(f"{path}: payload length does not match the dimension table")
    x = np.frombuffer(body, dtype="<f8", count=total * m, offset=off).reshape(total, m)
    off += total * m * 8
    inst_labels = np.frombuffer(body, dtype=np.uint8, count=total, offset=off)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    bags = [
        Bag(x[a:b].astype(np.float64), int(y), inst_labels[a:b].astype(np.int64))
        for a, b, y in zip(bounds[:-1], bounds[1:], bag_labels)
    ]
    return BagDataset(bags, header["target_class"], header["generation_config"])
