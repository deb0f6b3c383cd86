"""Per-bag stochastic training for TargetedMIL and the max-pooling baseline.

Model checkpoints use the ``TMILCKPT`` container (little-endian)::

    b"TMILCKPT"        8-byte magic
    u32 header_len
    header_len bytes   UTF-8 JSON: version, kind, hyper, [[name, shape], ...]
    f64[...]           every parameter, row-major, in header order
    u32 crc32          CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Bag, BagDataset
from .model import BaselineModel, TargetedMILModel, baseline_loss, elbo_all_instances, total_loss
from .numerics import Adam, NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TMILCKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    alpha: float = 1.0
    d: int = 32
    sigma_x2: float = 0.1
    seed: int = 0
    shuffle: bool = True
    log_every: int = 100
    enc_hidden: tuple[int, ...] = (256, 128)
    dec_hidden: tuple[int, ...] = (128, 256)
    prior_hidden: tuple[int, ...] = (128,)
    baseline_hidden: tuple[int, ...] = (256, 128)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not self.sigma_x2 > 0:
            raise ValueError("sigma_x2 must be > 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    mean_total: float
    mean_recon: float
    mean_kl: float
    mean_cls: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path, include_wall_time: bool = False) -> None:
        cols = ["epoch", "mean_total", "mean_recon", "mean_kl", "mean_cls"]
        if include_wall_time:
            cols.append("wall_time")
        lines = [",".join(cols)]
        for r in self.records:
            row = asdict(r)
            lines.append(",".join(repr(row[c]) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainResult:
    model: TargetedMILModel | BaselineModel
    history: TrainHistory


def _bags(dataset) -> list[Bag]:
    bags = dataset.bags if hasattr(dataset, "bags") else list(dataset)
    if not bags:
        raise ValueError("cannot train on an empty dataset")
    return bags


def _streams(seed: int):
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


def _run(bags, params, step_fn, config: TrainConfig, label: str, on_epoch=None) -> TrainHistory:
    """Shared epoch loop: one optimizer step per bag."""
    opt = Adam(params, lr=config.learning_rate)
    shuffle_rng, noise_rng = _streams(config.seed)
    history = TrainHistory()
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(bags)) if config.shuffle else np.arange(len(bags))
        sums = np.zeros(4)
        for i in order:
            try:
                loss, parts = step_fn(bags[i], noise_rng)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss")
                backward(loss, params)
            except NonFiniteError as exc:
                raise TrainingError(f"{label}: non-finite loss at epoch {epoch}, bag {int(i)}: {exc}") from exc
            opt.step()
            sums += parts
            step += 1
            if step % config.log_every == 0:
                log.info(
                    "%s epoch=%d step=%d total=%.6f recon=%.6f kl=%.6f cls=%.6f",
                    label, epoch, step, *parts,
                )
        means = sums / len(bags)
        history.records.append(EpochRecord(epoch, *map(float, means), time.perf_counter() - t0))
        if on_epoch is not None:
            on_epoch(history.records[-1])
    return history


def build_model(m: int, config: TrainConfig) -> TargetedMILModel:
    return TargetedMILModel(
        m=m,
        d=config.d,
        alpha=config.alpha,
        sigma_x2=config.sigma_x2,
        enc_hidden=config.enc_hidden,
        dec_hidden=config.dec_hidden,
        prior_hidden=config.prior_hidden,
        seed=config.seed,
    )


def train(dataset: BagDataset, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Fit TargetedMIL with one gradient step per bag on -ELBO + alpha * BCE."""
    bags = _bags(dataset)
    model = build_model(bags[0].instances.shape[1], config)
    params = model.parameters()

    def step(bag: Bag, noise_rng):
        noise = noise_rng.standard_normal(model.d)
        lb = total_loss(bag, bag.bag_label, model, noise)
        f = lb.floats()
        return lb.total, np.array([f["total"], f["recon"], f["kl"], f["cls"]])

    history = _run(bags, params, step, config, "targetedmil", on_epoch)
    return TrainResult(model, history)


def train_baseline(dataset: BagDataset, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Max-pooling MLP scorer trained with BCE on the top instance score per bag."""
    bags = _bags(dataset)
    model = BaselineModel(bags[0].instances.shape[1], hidden=config.baseline_hidden, seed=config.seed)

    def step(bag: Bag, noise_rng):
        loss, _ = baseline_loss(bag, bag.bag_label, model)
        v = loss.item()
        return loss, np.array([v, 0.0, 0.0, v])

    history = _run(bags, model.parameters(), step, config, "baseline", on_epoch)
    return TrainResult(model, history)


def train_identifiable(bags, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Fit the bag-conditioned VAE treating every instance as a target.

    The classifier is not trained (there are no negative bags); the objective
    is the summed per-instance negative ELBO under the shared bag prior.
    """
    bags = _bags(bags)
    model = build_model(bags[0].instances.shape[1], config)
    model.alpha = 0.0
    params = model.parameters()

    def step(bag: Bag, noise_rng):
        noise = noise_rng.standard_normal((len(bag), model.d))
        recon, kl = elbo_all_instances(bag, model, noise)
        loss = kl - recon
        return loss, np.array([loss.item(), recon.item(), kl.item(), 0.0])

    history = _run(bags, params, step, config, "identifiable", on_epoch)
    return TrainResult(model, history)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model, path) -> None:
    names = list(model.params)
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "kind": model.kind,
            "hyper": model.hyper(),
            "params": [[n, list(model.params[n].shape)] for n in names],
        },
        sort_keys=True,
    ).encode()
    body = b"".join(
        [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
        + [np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes() for n in names]
    )
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expected_d: int | None = None):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a TMILCKPT file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<I", body, 8)
    header = json.loads(body[12 : 12 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    hyper = header["hyper"]
    if header["kind"] == "targetedmil":
        if expected_d is not None and hyper["d"] != expected_d:
            raise CheckpointError(f"checkpoint has d={hyper['d']}, expected d={expected_d}")
        cls = TargetedMILModel
    elif header["kind"] == "baseline":
        cls = BaselineModel
    else:
        raise CheckpointError(f"unknown model kind {header['kind']!r}")

    off = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(body):
            raise CheckpointError(f"{path}: truncated parameter data")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        off += 8 * count
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    model = cls(params=params, **hyper)
    return model
