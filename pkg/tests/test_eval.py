import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetedmil.data import Bag, InstancePool
from targetedmil.eval import (
    AlignmentError,
    SweepBase,
    auc_pr,
    evaluate,
    mcc_affine,
    precision_recall_f1,
    read_pgm,
    reconstruct_grid,
    sweep,
    write_metrics_csv,
    write_pgm,
)
from targetedmil.model import TargetedMILModel
from targetedmil.train import TrainConfig


def brute_force_ap(scores, labels):
    """Precision/recall recomputed from scratch at every distinct threshold."""
    scores, labels = np.asarray(scores, float), np.asarray(labels)
    n_pos = int(labels.sum())
    terms, prev_tp = [], 0
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = int(np.sum(pred & (labels == 1)))
        k = int(pred.sum())
        if tp != prev_tp:
            terms.append(((tp - prev_tp) / n_pos) * (tp / k))
        prev_tp = tp
    return math.fsum(terms)


class Oracle:
    """Scores each instance with a fixed lookup (true labels, say)."""

    def __init__(self, fn):
        self.fn = fn

    def instance_scores(self, instances):
        return self.fn(np.atleast_2d(instances))


# ------------------------------------------------------------ P / R / F


def test_perfect_split():
    m = precision_recall_f1([0.9, 0.1], [1, 0], 0.5)
    assert (m.precision, m.recall, m.f_score) == (1.0, 1.0, 1.0)


def test_nothing_predicted_positive():
    m = precision_recall_f1([0.1, 0.2, 0.3], [1, 0, 1], 0.5)
    assert (m.precision, m.recall, m.f_score) == (0.0, 0.0, 0.0)


def test_hand_confusion_matrix():
    m = precision_recall_f1([0.9, 0.8, 0.2], [1, 0, 1], 0.5)
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 0)
    assert (m.precision, m.recall, m.f_score) == (0.5, 0.5, 0.5)


def test_length_mismatch():
    with pytest.raises(ValueError):
        precision_recall_f1([0.1, 0.2], [1], 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 1)), min_size=1, max_size=40))
def test_counts_sum_to_total(pairs):
    s, y = zip(*pairs)
    m = precision_recall_f1(s, y, 0.5)
    assert m.tp + m.fp + m.tn + m.fn == len(pairs)


@settings(max_examples=50, deadline=None)
# scores on a 0.01 grid: a transform that is monotone on the reals can merge
# adjacent floats, which would create ties the original scores do not have
@given(st.lists(st.tuples(st.integers(1, 99), st.integers(0, 1)), min_size=1, max_size=40))
def test_metrics_invariant_under_monotone_transform(pairs):
    s, y = np.array([p[0] / 100 for p in pairs]), np.array([p[1] for p in pairs])
    t = lambda v: v**3
    a, b = precision_recall_f1(s, y, 0.5), precision_recall_f1(t(s), y, t(0.5))
    assert (a.tp, a.fp, a.tn, a.fn) == (b.tp, b.fp, b.tn, b.fn)
    if y.any():
        assert auc_pr(s, y) == auc_pr(np.log(s) * 7 - 1, y)


# ------------------------------------------------------------------ AUC-PR


def test_auc_pr_perfect_ranking():
    assert auc_pr([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_pr_all_positive():
    assert auc_pr([0.2, 0.5, 0.1], [1, 1, 1]) == 1.0


def test_auc_pr_hand_example():
    assert auc_pr([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert brute_force_ap([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333333333333, abs=1e-12)


def test_auc_pr_groups_ties():
    # tied pair enters together: recall 1 at precision 1/2
    assert auc_pr([0.5, 0.5], [1, 0]) == 0.5


def test_auc_pr_needs_positives():
    with pytest.raises(ValueError):
        auc_pr([0.3, 0.2], [0, 0])


def test_auc_pr_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = rng.integers(1, 60)
        scores = rng.integers(0, 12, n) / 11.0  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        assert auc_pr(scores, labels) == brute_force_ap(scores, labels)


# ---------------------------------------------------------------- evaluate


def _bags():
    rng = np.random.default_rng(0)
    bags = []
    for i in range(6):
        labels = np.zeros(5, dtype=int)
        if i % 2:
            labels[rng.integers(5)] = 1
        x = rng.uniform(0, 0.4, (5, 4))
        x[:, 0] = labels
        bags.append(Bag(x, int(labels.any()), labels))
    return bags


def test_oracle_scorer_is_perfect():
    res = evaluate(Oracle(lambda x: np.clip(x[:, 0], 0.01, 0.99)), _bags(), 0.5)
    assert res.instance.f_score == 1.0 and res.bag.f_score == 1.0
    assert res.instance.auc_pr == 1.0


def test_all_low_scores_give_negative_bags():
    res = evaluate(Oracle(lambda x: np.full(len(x), 0.1)), _bags(), 0.5)
    assert res.bag.tp == res.bag.fp == 0


def test_instance_metrics_pool_over_bags():
    model = TargetedMILModel(m=4, d=2, enc_hidden=(3,), dec_hidden=(3,), prior_hidden=(3,))
    model.params["enc.mean.W"].data[...] = np.random.default_rng(0).normal(size=(3, 2))
    model.params["cls.w"].data[...] = [1.0, -2.0]
    bags = _bags()
    res = evaluate(model, bags, 0.5)
    pooled = np.concatenate([model.instance_scores(b.instances) for b in bags])
    direct = precision_recall_f1(pooled, np.concatenate([b.instance_labels for b in bags]), 0.5)
    assert res.instance == direct


def test_metrics_csv_columns(tmp_path):
    res = evaluate(Oracle(lambda x: np.clip(x[:, 0], 0.01, 0.99)), _bags(), 0.5)
    write_metrics_csv(res, tmp_path / "m.csv")
    header, inst, _ = (tmp_path / "m.csv").read_text().splitlines()
    assert header.split(",")[:6] == ["level", "tau", "precision", "recall", "f_score", "auc_pr"]
    assert inst.startswith("instance,0.5,1.0,1.0,1.0,1.0")


# -------------------------------------------------------------------- MCC


def test_mcc_permutation_and_sign():
    z = np.random.default_rng(0).normal(size=(500, 3))
    assert mcc_affine(z, -z[:, [2, 0, 1]]) == pytest.approx(1.0, abs=1e-12)


def test_mcc_affine_recovery():
    z = np.random.default_rng(1).normal(size=(500, 2))
    assert mcc_affine(z, 3 * z + 7) == pytest.approx(1.0, abs=1e-12)


def test_mcc_null_distribution():
    rng = np.random.default_rng(2)
    vals = [mcc_affine(rng.normal(size=(10000, 4)), rng.normal(size=(10000, 4))) for _ in range(20)]
    assert max(vals) <= 0.05


def test_mcc_invariant_under_affine_maps():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(800, 3))
    est = np.tanh(z) + 0.1 * rng.normal(size=z.shape)
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    assert mcc_affine(z, est @ A + 5) == pytest.approx(mcc_affine(z, est), abs=1e-6)


def test_mcc_rank_deficient():
    z = np.random.default_rng(4).normal(size=(100, 2))
    with pytest.raises(AlignmentError):
        mcc_affine(z, np.column_stack([z[:, 0], 2 * z[:, 0]]))


# -------------------------------------------------------------- image grids


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7))
    write_pgm(img, tmp_path / "a.pgm")
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (5, 7)
    assert np.max(np.abs(back - img)) <= 1 / 255


def test_grid_layout_and_gray_reconstruction(tmp_path):
    model = TargetedMILModel(m=16, d=2, enc_hidden=(4,), dec_hidden=(4,), prior_hidden=(4,))
    x = np.zeros((5, 16))
    x[1] = 1.0
    bags = [Bag(x, 0, np.zeros(5))]
    orig, recon = reconstruct_grid(model, bags, rows=2, cols=3, path=tmp_path / "g")
    o, r = read_pgm(orig), read_pgm(recon)
    assert o.shape == r.shape == (8, 12)
    # row-major: instance 1 sits in row 0, column 1
    assert np.all(o[0:4, 4:8] == 1.0) and np.all(o[0:4, 0:4] == 0.0)
    # zero networks decode to 0.5 everywhere; the unused sixth cell stays black
    assert np.all(r[:4, :] == 128 / 255) and np.all(r[4:, :8] == 128 / 255)
    assert np.all(r[4:, 8:] == 0.0)


def test_grid_needs_square_images(tmp_path):
    model = TargetedMILModel(m=6, d=2, enc_hidden=(3,), dec_hidden=(3,), prior_hidden=(3,))
    with pytest.raises(ValueError):
        reconstruct_grid(model, [Bag(np.zeros((2, 6)), 0, [0, 0])], 1, 2, tmp_path / "g")


# ------------------------------------------------------------------- sweep


def _pools():
    rng = np.random.default_rng(0)

    def pool(split):
        labels = np.arange(300) % 3
        images = np.clip(0.1 + 0.05 * rng.standard_normal((300, 4)), 0, 1)
        images[:, 0] = np.where(labels == 2, 0.9, 0.1)
        return InstancePool(images, labels, split)

    return pool("train"), pool("test")


def _base(**kw):
    tr, te = _pools()
    cfg = TrainConfig(epochs=2, d=2, enc_hidden=(4,), dec_hidden=(4,), prior_hidden=(4,), baseline_hidden=(4,))
    return SweepBase(tr, te, 2, cfg, n_train_bags=6, n_test_bags=4, mean_size=5, std_size=1, **kw)


def test_sweep_single_value_single_row():
    rep = sweep("bag_size", [6], _base(), repeats=1)
    assert len(rep.points) == 1
    assert rep.points[0].std_auc_pr == 0.0 and rep.points[0].runs == 1


def test_sweep_rows_sorted(tmp_path):
    rep = sweep("witness_rate", [0.5, 0.2], _base(method="baseline"), repeats=2)
    assert [p.axis_value for p in rep.points] == [0.2, 0.5]
    rep.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "axis,axis_value,mean_auc_pr,std_auc_pr,runs" and len(lines) == 3


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ValueError):
        sweep("temperature", [1.0], _base())
