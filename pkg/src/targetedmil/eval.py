"""Instance and bag metrics, sweeps, reconstruction grids and latent alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Bag, InstancePool, make_bags
from .model import predict_bag_label, predict_instance_scores
from .train import TrainConfig, train, train_baseline


class AlignmentError(ValueError):
    """Estimated latents are rank deficient, so no affine alignment exists."""


@dataclass
class Metrics:
    precision: float
    recall: float
    f_score: float
    auc_pr: float | None
    tau: float
    tp: int
    fp: int
    tn: int
    fn: int

    def row(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "auc_pr": self.auc_pr,
        }


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        raise ValueError("no scores")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def precision_recall_f1(scores, labels, tau: float = 0.5) -> Metrics:
    scores, labels = _validate(scores, labels)
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    pred = scores >= tau
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = auc_pr(scores, labels) if pos.any() else None
    return Metrics(precision, recall, f, auc, tau, tp, fp, tn, fn)


def auc_pr(scores, labels) -> float:
    """Average precision with step interpolation.

    Items with equal scores enter the ranking together, as one cut.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    prev_tp = np.concatenate([[0], tp[:-1]])
    terms = [
        ((int(t) - int(pt)) / n_pos) * (int(t) / int(k))
        for t, pt, k in zip(tp, prev_tp, seen)
        if t != pt
    ]
    return math.fsum(terms)


@dataclass
class EvalResult:
    instance: Metrics
    bag: Metrics
    scores: list[np.ndarray] = field(repr=False, default_factory=list)


def evaluate(model, test_bags: Sequence[Bag], tau: float = 0.5) -> EvalResult:
    """Pool instance predictions over all bags; bag predictions via the max rule."""
    bags = test_bags.bags if hasattr(test_bags, "bags") else list(test_bags)
    if not bags:
        raise ValueError("empty test set")
    per_bag = [predict_instance_scores(b, model) for b in bags]
    inst = precision_recall_f1(
        np.concatenate(per_bag), np.concatenate([b.instance_labels for b in bags]), tau
    )
    bag_pred = np.array([predict_bag_label(s, tau) for s in per_bag], dtype=np.float64)
    bag_true = np.array([b.bag_label for b in bags])
    bag = precision_recall_f1(bag_pred, bag_true, tau)
    # bag AUC-PR ranks bags by their top instance score
    if bag_true.any():
        bag.auc_pr = auc_pr([s.max() for s in per_bag], bag_true)
    return EvalResult(inst, bag, per_bag)


def write_metrics_csv(result: EvalResult, path) -> None:
    cols = ["level", "tau", "precision", "recall", "f_score", "auc_pr", "tp", "fp", "tn", "fn"]
    lines = [",".join(cols)]
    for level, m in (("instance", result.instance), ("bag", result.bag)):
        vals = [level, m.tau, m.precision, m.recall, m.f_score, m.auc_pr, m.tp, m.fp, m.tn, m.fn]
        lines.append(",".join("" if v is None else (v if isinstance(v, str) else repr(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ identifiability


def mcc_affine(z_true, z_est) -> float:
    """Mean absolute correlation after least-squares affine alignment.

    ``z_est`` is mapped onto ``z_true`` by an affine map; the score averages,
    over latent dimensions, |corr(aligned_j, true_j)|.
    """
    z_true = np.asarray(z_true, dtype=np.float64)
    z_est = np.asarray(z_est, dtype=np.float64)
    if z_true.ndim != 2 or z_est.shape[0] != z_true.shape[0]:
        raise ValueError("z_true and z_est must be [n, d] arrays with equal n")
    n, d = z_true.shape
    if not n > d >= 1:
        raise ValueError("need n > d >= 1")
    if np.any(z_true.std(axis=0) == 0):
        raise ValueError("z_true has a constant column")
    centred = z_est - z_est.mean(axis=0)
    if np.linalg.matrix_rank(centred) < z_est.shape[1]:
        raise AlignmentError("estimated latents are rank deficient; alignment failed")
    design = np.column_stack([z_est, np.ones(n)])
    coef, *_ = np.linalg.lstsq(design, z_true, rcond=None)
    aligned = design @ coef
    corrs = []
    for j in range(d):
        a = aligned[:, j] - aligned[:, j].mean()
        t = z_true[:, j] - z_true[:, j].mean()
        denom = math.sqrt(float(a @ a) * float(t @ t))
        corrs.append(abs(float(a @ t)) / denom if denom > 0 else 0.0)
    return float(np.mean(corrs))


# ------------------------------------------------------------- image export


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255) of values in [0, 1]."""
    pix = np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / maxval


def tile(images: np.ndarray, rows: int, cols: int, side: int) -> np.ndarray:
    """Place flattened square images row-major on a rows x cols canvas."""
    canvas = np.zeros((rows * side, cols * side))
    for k, img in enumerate(images[: rows * cols]):
        r, c = divmod(k, cols)
        canvas[r * side : (r + 1) * side, c * side : (c + 1) * side] = img.reshape(side, side)
    return canvas


def reconstruct_grid(model, bags: Sequence[Bag], rows: int, cols: int, path) -> tuple[Path, Path]:
    """Write ``<path>_original.pgm`` and ``<path>_recon.pgm`` side by side grids.

    Instances are taken from ``bags`` in order; reconstructions decode the
    posterior mean.
    """
    x = np.concatenate([b.instances for b in bags], axis=0)[: rows * cols]
    side = math.isqrt(x.shape[1])
    if side * side != x.shape[1]:
        raise ValueError(f"instance length {x.shape[1]} is not a perfect square")
    recon = model.reconstruct(x)
    path = Path(path)
    orig_path = path.with_name(path.name + "_original.pgm")
    recon_path = path.with_name(path.name + "_recon.pgm")
    write_pgm(tile(x, rows, cols, side), orig_path)
    write_pgm(tile(recon, rows, cols, side), recon_path)
    return orig_path, recon_path


def reconstruction_errors(model, bags: Sequence[Bag]) -> tuple[float, float]:
    """Mean per-pixel squared error on (target, non-target) instances."""
    x = np.concatenate([b.instances for b in bags], axis=0)
    y = np.concatenate([b.instance_labels for b in bags])
    err = ((model.reconstruct(x) - x) ** 2).mean(axis=1)
    return float(err[y == 1].mean()), float(err[y == 0].mean())


# ------------------------------------------------------------------- sweeps


@dataclass
class SweepPoint:
    axis_value: float
    mean_auc_pr: float
    std_auc_pr: float
    runs: int


@dataclass
class SweepReport:
    axis: str
    points: list[SweepPoint]

    def to_csv(self, path) -> None:
        lines = ["axis,axis_value,mean_auc_pr,std_auc_pr,runs"]
        for p in self.points:
            lines.append(f"{self.axis},{p.axis_value!r},{p.mean_auc_pr!r},{p.std_auc_pr!r},{p.runs}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class SweepBase:
    train_pool: InstancePool
    test_pool: InstancePool
    target_class: int
    train: TrainConfig
    n_train_bags: int = 500
    n_test_bags: int = 100
    mean_size: float = 50.0
    std_size: float = 10.0
    witness_rate: float = 0.1
    positive_fraction: float = 0.5
    seed: int = 0
    method: str = "targetedmil"
    tau: float = 0.5


def sweep(axis: str, values: Sequence[float], base: SweepBase, repeats: int = 1) -> SweepReport:
    """Regenerate, retrain and score instance AUC-PR for each axis value."""
    if axis not in ("bag_size", "witness_rate"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    if not len(values):
        raise ValueError("no sweep values")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    fit: Callable = {"targetedmil": train, "baseline": train_baseline}[base.method]
    points = []
    for vi, value in enumerate(sorted(values)):
        aucs = []
        for r in range(repeats):
            seed = int(np.random.SeedSequence([base.seed, vi, r]).generate_state(1)[0])
            data_kw = dict(
                mean_size=value if axis == "bag_size" else base.mean_size,
                std_size=base.std_size,
                witness_rate=value if axis == "witness_rate" else base.witness_rate,
                positive_fraction=base.positive_fraction,
            )
            tr = make_bags(base.train_pool, base.target_class, base.n_train_bags, seed=seed, **data_kw)
            te = make_bags(base.test_pool, base.target_class, base.n_test_bags, seed=seed + 1, **data_kw)
            result = fit(tr, replace(base.train, seed=seed))
            aucs.append(evaluate(result.model, te.bags, base.tau).instance.auc_pr)
        points.append(SweepPoint(float(value), float(np.mean(aucs)), float(np.std(aucs)), repeats))
    return SweepReport(axis, points)
