"""Desk-scale experiment drivers shared by the scripts and the acceptance suite.

Each driver returns a result object whose ``report()`` is a deterministic
text block (no timings), so identical seeds give identical bytes.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Bag, BagDataset, SyntheticDataset, load_mnist_split, make_bags, make_synthetic_identifiable
from .eval import EvalResult, evaluate, mcc_affine, reconstruct_grid, reconstruction_errors
from .model import BaselineModel, TargetedMILModel, encode_mean
from .train import TrainConfig, TrainResult, build_model, train, train_baseline, train_identifiable

REPO_ROOT = Path(__file__).resolve().parents[2]


def default_data_dir() -> Path | None:
    """``TMIL_DATA_DIR`` if set, else ``data/mnist`` in the repository."""
    env = os.environ.get("TMIL_DATA_DIR")
    if env:
        return Path(env)
    local = REPO_ROOT / "data" / "mnist"
    return local if local.is_dir() else None


@dataclass
class MnistBagsConfig:
    target_class: int = 9
    n_train_bags: int = 500
    n_test_bags: int = 100
    mean_size: float = 50.0
    std_size: float = 10.0
    witness_rate: float = 0.1
    positive_fraction: float = 0.5
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100, alpha=10.0, d=32))
    baseline_epochs: int = 30


def mnist_bags(data_dir, cfg: MnistBagsConfig) -> tuple[BagDataset, BagDataset]:
    kw = dict(
        mean_size=cfg.mean_size,
        std_size=cfg.std_size,
        witness_rate=cfg.witness_rate,
        positive_fraction=cfg.positive_fraction,
    )
    tr = make_bags(load_mnist_split(data_dir, "train"), cfg.target_class, cfg.n_train_bags, seed=cfg.seed, **kw)
    te = make_bags(load_mnist_split(data_dir, "test"), cfg.target_class, cfg.n_test_bags, seed=cfg.seed + 1, **kw)
    return tr, te


def _metric_lines(name: str, res: EvalResult) -> list[str]:
    out = []
    for level, m in (("instance", res.instance), ("bag", res.bag)):
        out.append(
            f"{name} {level}: precision={m.precision!r} recall={m.recall!r} f_score={m.f_score!r} "
            f"auc_pr={m.auc_pr!r} tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}"
        )
    return out


@dataclass
class MnistRun:
    config: MnistBagsConfig
    model: TargetedMILModel | BaselineModel
    fit: TrainResult
    result: EvalResult
    recon_errors: tuple[float, float] | None
    seconds: float
    method: str

    def report(self) -> str:
        lines = [f"method={self.method} epochs={len(self.fit.history)}"]
        lines += [f"epoch {r.epoch}: total={r.mean_total!r} kl={r.mean_kl!r} cls={r.mean_cls!r}" for r in self.fit.history.records]
        lines += _metric_lines(self.method, self.result)
        if self.recon_errors is not None:
            t, n = self.recon_errors
            lines.append(f"recon mse target={t!r} non_target={n!r}")
        return "\n".join(lines) + "\n"


def run_mnist(data_dir, cfg: MnistBagsConfig, method: str = "targetedmil", data=None, on_epoch=None) -> MnistRun:
    """Train one method on desk-scale MNIST-bags and score the test bags."""
    tr, te = data if data is not None else mnist_bags(data_dir, cfg)
    t0 = time.perf_counter()
    if method == "targetedmil":
        fit = train(tr, cfg.train, on_epoch)
    elif method == "baseline":
        fit = train_baseline(tr, replace(cfg.train, epochs=cfg.baseline_epochs), on_epoch)
    else:
        raise ValueError(f"unknown method {method!r}")
    seconds = time.perf_counter() - t0
    result = evaluate(fit.model, te.bags, 0.5)
    recon = reconstruction_errors(fit.model, te.bags) if method == "targetedmil" else None
    return MnistRun(cfg, fit.model, fit, result, recon, seconds, method)


def export_grids(run: MnistRun, test: BagDataset, out_dir, rows: int = 8, cols: int = 8):
    """Reconstruction grids for target-only and non-target-only instances."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = np.concatenate([b.instances for b in test.bags])
    y = np.concatenate([b.instance_labels for b in test.bags])
    paths = {}
    for name, mask in (("target", y == 1), ("nontarget", y == 0)):
        sel = x[mask][: rows * cols]
        paths[name] = reconstruct_grid(run.model, [Bag(sel, 0, np.zeros(len(sel)))], rows, cols, out_dir / name)
    return paths


# ------------------------------------------------------------ identifiability


@dataclass
class IdentifiabilityConfig:
    d: int = 2
    m: int = 10
    k_groups: int = 5
    bags_per_group: int = 100
    bag_size: int = 40
    noise_std: float = 0.01
    seed: int = 0
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            epochs=15, alpha=0.0, d=2, sigma_x2=1e-3, enc_hidden=(64, 64), dec_hidden=(64, 64), prior_hidden=(64, 64)
        )
    )


@dataclass
class IdentifiabilityRun:
    config: IdentifiabilityConfig
    data: SyntheticDataset
    model: TargetedMILModel
    mcc: float
    shuffled_mcc: float
    untrained_mcc: float
    seconds: float

    def report(self) -> str:
        return (
            f"n_instances={len(self.data.all_latents())} d={self.config.d} k_groups={self.config.k_groups} "
            f"noise_std={self.config.noise_std!r} condition_number={self.data.condition_number!r}\n"
            f"mcc={self.mcc!r}\nshuffled_mcc={self.shuffled_mcc!r}\nuntrained_mcc={self.untrained_mcc!r}\n"
        )


def run_identifiability(cfg: IdentifiabilityConfig) -> IdentifiabilityRun:
    data = make_synthetic_identifiable(
        d=cfg.d,
        m=cfg.m,
        k_groups=cfg.k_groups,
        bags_per_group=cfg.bags_per_group,
        bag_size=cfg.bag_size,
        noise_std=cfg.noise_std,
        seed=cfg.seed,
    )
    x, z = data.all_instances(), data.all_latents()
    untrained = mcc_affine(z, encode_mean(x, build_model(cfg.m, cfg.train)))
    t0 = time.perf_counter()
    model = train_identifiable(data.bags, cfg.train).model
    seconds = time.perf_counter() - t0
    z_est = encode_mean(x, model)
    shuffled = np.random.default_rng([cfg.seed, 3]).permutation(z_est)
    return IdentifiabilityRun(cfg, data, model, mcc_affine(z, z_est), mcc_affine(z, shuffled), untrained, seconds)
