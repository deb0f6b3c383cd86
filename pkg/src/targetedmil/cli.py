"""Command-line entry point.

All artifacts land in ``[eval] out_dir`` (``--out`` overrides it) under fixed
names: ``train.tmilds``, ``test.tmilds``, ``model.ckpt``, ``history.csv``,
``baseline.ckpt``, ``baseline_history.csv``, ``metrics.csv``, ``sweep.csv``,
``recon_original.pgm``, ``recon_recon.pgm`` and ``identifiability.csv``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import DataFormatError, load_bags, load_mnist_split, make_bags, make_synthetic_identifiable, save_bags
from .eval import (
    AlignmentError,
    SweepBase,
    evaluate,
    mcc_affine,
    reconstruct_grid,
    reconstruction_errors,
    sweep,
    write_metrics_csv,
)
from .model import TargetedMILModel, encode_mean
from .numerics import NonFiniteError
from .train import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    train,
    train_baseline,
    train_identifiable,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("targetedmil")


class InputError(Exception):
    pass


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.eval.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_path(cfg: RunConfig, split: str) -> Path:
    explicit = cfg.dataset.train_file if split == "train" else cfg.dataset.test_file
    return Path(explicit) if explicit else Path(cfg.eval.out_dir) / f"{split}.tmilds"


def _read_bags(cfg: RunConfig, split: str):
    path = _dataset_path(cfg, split)
    if not path.is_file():
        raise InputError(f"dataset file not found: {path} (run 'synthesize' first)")
    return load_bags(path)


def _checkpoint_path(cfg: RunConfig, default: str = "model.ckpt") -> Path:
    return Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else Path(cfg.eval.out_dir) / default


def _read_checkpoint(cfg: RunConfig):
    path = _checkpoint_path(cfg)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if isinstance(model, TargetedMILModel) and model.d != cfg.model.d:
        raise CheckpointError(f"checkpoint has d={model.d} but config has d={cfg.model.d}")
    return model


# ----------------------------------------------------------------- commands


def cmd_synthesize(cfg: RunConfig, args) -> int:
    ds = cfg.dataset
    directory = cfg.data_dir()
    kw = dict(
        mean_size=ds.mean_size,
        std_size=ds.std_size,
        witness_rate=ds.witness_rate,
        positive_fraction=ds.positive_fraction,
    )
    _out(cfg)
    for split, n, seed in (("train", ds.n_bags, ds.seed), ("test", ds.n_test_bags, ds.seed + 1)):
        if n == 0:
            continue
        pool = load_mnist_split(directory, split)
        data = make_bags(pool, ds.target_class, n_bags=n, seed=seed, **kw)
        path = _dataset_path(cfg, split)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_bags(data, path)
        s = data.summary()
        print(
            f"{split}: {s['n_bags']} bags, positive_fraction={s['positive_fraction']:.3f}, "
            f"mean_size={s['mean_size']:.2f} -> {path}"
        )
    return EXIT_OK


def _cmd_fit(cfg: RunConfig, baseline: bool) -> int:
    data = _read_bags(cfg, "train")
    fit = train_baseline if baseline else train
    result = fit(data, cfg.train_config())
    out = _out(cfg)
    prefix = "baseline" if baseline else "model"
    ckpt = out / f"{prefix}.ckpt"
    hist = out / ("baseline_history.csv" if baseline else "history.csv")
    save_checkpoint(result.model, ckpt)
    result.history.to_csv(hist)
    last = result.history.records[-1].mean_total if result.history.records else float("nan")
    print(f"wrote {ckpt} and {hist}; final mean loss {last:.6f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    return _cmd_fit(cfg, baseline=False)


def cmd_train_baseline(cfg: RunConfig, args) -> int:
    return _cmd_fit(cfg, baseline=True)


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _read_checkpoint(cfg)
    test = _read_bags(cfg, "test")
    result = evaluate(model, test.bags, cfg.eval.tau)
    path = _out(cfg) / "metrics.csv"
    write_metrics_csv(result, path)
    inst = result.instance
    auc = "nan" if inst.auc_pr is None else f"{inst.auc_pr:.6f}"
    print(f"instance f_score={inst.f_score:.6f} auc_pr={auc} (tau={cfg.eval.tau}) -> {path}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    if not args.axis or not args.values:
        raise ConfigError("sweep needs --axis and --values")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    ds = cfg.dataset
    directory = cfg.data_dir()
    base = SweepBase(
        train_pool=load_mnist_split(directory, "train"),
        test_pool=load_mnist_split(directory, "test"),
        target_class=ds.target_class,
        train=cfg.train_config(),
        n_train_bags=ds.n_bags,
        n_test_bags=ds.n_test_bags,
        mean_size=ds.mean_size,
        std_size=ds.std_size,
        witness_rate=ds.witness_rate,
        positive_fraction=ds.positive_fraction,
        seed=ds.seed,
        method=cfg.eval.sweep_method,
        tau=cfg.eval.tau,
    )
    report = sweep(args.axis, values, base, repeats=cfg.eval.sweep_repeats)
    path = _out(cfg) / "sweep.csv"
    report.to_csv(path)
    for p in report.points:
        print(f"{report.axis}={p.axis_value:g} auc_pr={p.mean_auc_pr:.4f} +- {p.std_auc_pr:.4f}")
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    model = _read_checkpoint(cfg)
    if not isinstance(model, TargetedMILModel):
        raise InputError("reconstruct needs a TargetedMIL checkpoint")
    test = _read_bags(cfg, "test")
    if not test.bags:
        raise InputError("test set is empty")
    orig, recon = reconstruct_grid(model, test.bags, cfg.eval.grid_rows, cfg.eval.grid_cols, _out(cfg) / "recon")
    msg = f"wrote {orig} and {recon}"
    labels = np.concatenate([b.instance_labels for b in test.bags])
    if labels.any() and not labels.all():
        target, other = reconstruction_errors(model, test.bags)
        msg += f"; mse target={target:.5f} non-target={other:.5f} ratio={other / target:.3f}"
    print(msg)
    return EXIT_OK


def cmd_identifiability(cfg: RunConfig, args) -> int:
    s = cfg.synthetic
    data = make_synthetic_identifiable(
        d=s.d,
        m=s.m,
        k_groups=s.k_groups,
        bags_per_group=s.bags_per_group,
        bag_size=s.bag_size,
        noise_std=s.noise_std,
        seed=s.seed,
        identity_mixing=s.identity_mixing,
    )
    model = train_identifiable(data.bags, cfg.synthetic_train_config()).model
    z_true = data.all_latents()
    z_est = encode_mean(data.all_instances(), model)
    mcc = mcc_affine(z_true, z_est)
    control = mcc_affine(z_true, np.random.default_rng([s.seed, 3]).permutation(z_est))
    path = _out(cfg) / "identifiability.csv"
    path.write_text(
        "d,k_groups,n_instances,noise_std,mcc,shuffled_mcc\n"
        f"{s.d},{s.k_groups},{len(z_true)},{s.noise_std!r},{mcc!r},{control!r}\n"
    )
    print(f"mcc={mcc:.4f} shuffled_control={control:.4f} -> {path}")
    return EXIT_OK


COMMANDS = {
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "reconstruct": cmd_reconstruct,
    "identifiability": cmd_identifiability,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="targetedmil", description="TargetedMIL experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI run config (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--out", help="override [eval] out_dir")
    parser.add_argument("--axis", choices=["bag_size", "witness_rate"], help="sweep axis")
    parser.add_argument("--values", help="comma-separated sweep values")
    parser.add_argument("--target-class", type=int, help="override [dataset] target_class")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, eval=replace(cfg.eval, out_dir=args.out))
    if args.target_class is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, target_class=args.target_class))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        ConfigError,
        InputError,
        DataFormatError,
        CheckpointError,
        AlignmentError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
