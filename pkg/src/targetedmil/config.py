"""Run configuration: an INI file with fixed sections and typed keys.

Every key has a default, so an empty file is a valid config. Unknown sections
or keys are rejected so typos never silently fall back to a default.

    [dataset]    data_dir, target_class, n_bags, n_test_bags, mean_size,
                 std_size, witness_rate, positive_fraction, seed,
                 train_file, test_file
    [model]      d, alpha, sigma_x2, enc_hidden, dec_hidden, prior_hidden,
                 baseline_hidden
    [train]      epochs, learning_rate, seed, shuffle, log_every
    [eval]       tau, out_dir, checkpoint, grid_rows, grid_cols,
                 sweep_method, sweep_repeats
    [synthetic]  d, m, k_groups, bags_per_group, bag_size, noise_std, seed,
                 identity_mixing, epochs, learning_rate, sigma_x2, hidden

Hidden layer widths are comma separated (``enc_hidden = 256,128``). An empty
``data_dir`` falls back to the ``TMIL_DATA_DIR`` environment variable.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import BagConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    data_dir: str = ""
    target_class: int = 9
    n_bags: int = 500
    n_test_bags: int = 100
    mean_size: float = 50.0
    std_size: float = 10.0
    witness_rate: float = 0.1
    positive_fraction: float = 0.5
    seed: int = 0
    train_file: str = ""
    test_file: str = ""


@dataclass
class ModelSection:
    d: int = 32
    alpha: float = 10.0
    sigma_x2: float = 0.1
    enc_hidden: tuple[int, ...] = (256, 128)
    dec_hidden: tuple[int, ...] = (128, 256)
    prior_hidden: tuple[int, ...] = (128,)
    baseline_hidden: tuple[int, ...] = (256, 128)


@dataclass
class TrainSection:
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    log_every: int = 100


@dataclass
class EvalSection:
    tau: float = 0.5
    out_dir: str = "runs"
    checkpoint: str = ""
    grid_rows: int = 8
    grid_cols: int = 8
    sweep_method: str = "targetedmil"
    sweep_repeats: int = 1


@dataclass
class SyntheticSection:
    d: int = 2
    m: int = 10
    k_groups: int = 5
    bags_per_group: int = 100
    bag_size: int = 40
    noise_std: float = 0.01
    seed: int = 0
    identity_mixing: bool = False
    epochs: int = 15
    learning_rate: float = 1e-3
    sigma_x2: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    def validate(self) -> "RunConfig":
        ds = self.dataset
        try:
            BagConfig(ds.n_bags, ds.mean_size, ds.std_size, ds.witness_rate, ds.positive_fraction, ds.seed).validate()
            self.train_config()
            self.synthetic_train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= ds.target_class <= 9:
            raise ConfigError("target_class must be a digit 0-9")
        if ds.n_test_bags < 0:
            raise ConfigError("n_test_bags must be >= 0")
        ev = self.eval
        if not 0 < ev.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if ev.grid_rows < 1 or ev.grid_cols < 1:
            raise ConfigError("grid_rows and grid_cols must be positive")
        if ev.sweep_method not in ("targetedmil", "baseline"):
            raise ConfigError(f"sweep_method must be targetedmil or baseline, got {ev.sweep_method!r}")
        if ev.sweep_repeats < 1:
            raise ConfigError("sweep_repeats must be >= 1")
        syn = self.synthetic
        if syn.m < 1 or syn.bags_per_group < 1 or syn.bag_size < 1:
            raise ConfigError("synthetic m, bags_per_group and bag_size must be positive")
        if syn.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        return self

    def train_config(self) -> TrainConfig:
        m, t = self.model, self.train
        return TrainConfig(
            epochs=t.epochs,
            learning_rate=t.learning_rate,
            alpha=m.alpha,
            d=m.d,
            sigma_x2=m.sigma_x2,
            seed=t.seed,
            shuffle=t.shuffle,
            log_every=t.log_every,
            enc_hidden=m.enc_hidden,
            dec_hidden=m.dec_hidden,
            prior_hidden=m.prior_hidden,
            baseline_hidden=m.baseline_hidden,
        )

    def synthetic_train_config(self) -> TrainConfig:
        s = self.synthetic
        return TrainConfig(
            epochs=s.epochs,
            learning_rate=s.learning_rate,
            alpha=0.0,
            d=s.d,
            sigma_x2=s.sigma_x2,
            seed=s.seed,
            shuffle=True,
            log_every=self.train.log_every,
            enc_hidden=s.hidden,
            dec_hidden=s.hidden,
            prior_hidden=s.hidden,
        )

    def data_dir(self) -> Path:
        raw = self.dataset.data_dir or os.environ.get("TMIL_DATA_DIR", "")
        if not raw:
            raise ConfigError("no IDX directory: set [dataset] data_dir or TMIL_DATA_DIR")
        return Path(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            dataset=replace(self.dataset, seed=seed),
            train=replace(self.train, seed=seed),
            synthetic=replace(self.synthetic, seed=seed),
        )


def _convert(raw: str, kind, where: str):
    try:
        if kind is bool:
            value = raw.strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    cfg = RunConfig()
    sections = {f.name: f for f in fields(RunConfig)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        current = getattr(cfg, name)
        known = {f.name: f.type for f in fields(current)}
        updates = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            kind = _TYPES.get(known[key], known[key])
            updates[key] = _convert(raw, kind, f"{source} [{name}] {key}")
        setattr(cfg, name, replace(current, **updates))
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
