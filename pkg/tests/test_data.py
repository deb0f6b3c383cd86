import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetedmil.data import (
    Bag,
    BagDataset,
    DataFormatError,
    InstancePool,
    load_bags,
    make_bags,
    make_synthetic_identifiable,
    natural_parameter_matrix,
    parse_idx_images,
    parse_idx_labels,
    save_bags,
)


def idx_images(n, rows, cols, payload, magic=0x803):
    return struct.pack(">4I", magic, n, rows, cols) + bytes(payload)


def idx_labels(labels, magic=0x801, n=None):
    return struct.pack(">2I", magic, len(labels) if n is None else n) + bytes(labels)


def toy_pool(n=400, m=4, split="train", seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = np.clip(labels[:, None] / 10 + rng.uniform(0, 0.05, (n, m)), 0, 1)
    return InstancePool(images, labels, split)


# --------------------------------------------------------------------- IDX


def test_parse_single_image():
    raw = idx_images(1, 2, 2, [0, 255, 128, 0])
    out = parse_idx_images(raw)
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out.reshape(-1), [0.0, 1.0, 128 / 255, 0.0])


def test_parse_gzipped_image():
    raw = gzip.compress(idx_images(1, 1, 3, [1, 2, 3]))
    np.testing.assert_array_equal(parse_idx_images(raw).ravel(), np.array([1, 2, 3]) / 255)


def test_image_parser_rejects_label_magic():
    with pytest.raises(DataFormatError, match="magic"):
        parse_idx_images(idx_images(1, 2, 2, [0] * 4, magic=0x801))


def test_image_parser_rejects_truncated_payload():
    with pytest.raises(DataFormatError):
        parse_idx_images(idx_images(10, 1, 1, [0] * 9))


def test_parse_labels():
    np.testing.assert_array_equal(parse_idx_labels(idx_labels([3, 7])), [3, 7])


def test_parse_empty_labels():
    assert parse_idx_labels(idx_labels([])).size == 0


def test_label_out_of_range():
    with pytest.raises(DataFormatError):
        parse_idx_labels(idx_labels([1, 12]))


def test_label_length_mismatch():
    with pytest.raises(DataFormatError):
        parse_idx_labels(idx_labels([1, 2], n=3))


# -------------------------------------------------------------------- bags


def test_witness_count_at_fifty():
    pool = toy_pool()
    ds = make_bags(pool, 3, n_bags=200, mean_size=50, std_size=0, witness_rate=0.1, seed=1)
    for bag in ds.bags:
        assert len(bag) == 50
        assert bag.instance_labels.sum() == (5 if bag.bag_label else 0)


def test_small_bag_still_gets_one_witness():
    ds = make_bags(toy_pool(), 3, n_bags=20, mean_size=4, std_size=0, witness_rate=0.1, seed=2)
    for bag in ds.bags:
        assert len(bag) == 4
        if bag.bag_label:
            assert bag.instance_labels.sum() == 1


def test_negative_bags_have_no_target_instances():
    pool = toy_pool()
    ds = make_bags(pool, 3, n_bags=100, seed=5)
    target_rows = pool.images[pool.class_labels == 3]
    for bag in ds.bags:
        hits = (bag.instances[:, None, :] == target_rows[None]).all(-1).any(-1)
        np.testing.assert_array_equal(hits, bag.instance_labels == 1)
        if bag.bag_label == 0:
            assert not hits.any()


def test_positive_fraction_is_exact():
    ds = make_bags(toy_pool(), 1, n_bags=31, positive_fraction=0.5, seed=0)
    assert sum(b.bag_label for b in ds.bags) == 16


def test_missing_target_class():
    pool = InstancePool(np.zeros((5, 2)), [0, 1, 2, 3, 4])
    with pytest.raises(ValueError, match="absent"):
        make_bags(pool, 7, n_bags=3)


@pytest.mark.parametrize("rate", [0.0, 1.0, 1.5])
def test_witness_rate_range(rate):
    with pytest.raises(ValueError):
        make_bags(toy_pool(), 1, n_bags=3, witness_rate=rate)


def test_size_statistics():
    ds = make_bags(toy_pool(), 2, n_bags=1000, mean_size=50, std_size=10, seed=3)
    sizes = np.array([len(b) for b in ds.bags])
    assert 49 <= sizes.mean() <= 51
    assert 8.5 <= sizes.std() <= 11.5


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    mean=st.floats(2, 30),
    std=st.floats(0, 15),
    rate=st.floats(0.01, 0.99),
)
def test_standard_assumption_holds(seed, mean, std, rate):
    ds = make_bags(toy_pool(), 4, n_bags=12, mean_size=mean, std_size=std, witness_rate=rate, seed=seed)
    for bag in ds.bags:
        assert len(bag) >= 2
        assert bag.bag_label == int(bag.instance_labels.any())


def test_same_seed_same_dataset():
    a = make_bags(toy_pool(), 4, n_bags=30, seed=9)
    b = make_bags(toy_pool(), 4, n_bags=30, seed=9)
    assert a == b


def test_bag_rejects_inconsistent_label():
    with pytest.raises(ValueError):
        Bag(np.zeros((2, 3)), 1, [0, 0])


# --------------------------------------------------------------- synthetic


def test_identity_mixing_without_noise_returns_latents():
    ds = make_synthetic_identifiable(d=2, m=2, k_groups=5, bags_per_group=2, bag_size=4, noise_std=0, identity_mixing=True)
    np.testing.assert_array_equal(ds.all_instances(), ds.all_latents())


def test_natural_parameter_matrix_invertible():
    ds = make_synthetic_identifiable(d=2, m=6, k_groups=5, bags_per_group=1, bag_size=3, seed=4)
    E = natural_parameter_matrix(ds.prior_means, ds.prior_stds)
    assert E.shape == (4, 4)
    assert np.linalg.cond(E) < 1e6


def test_too_few_groups_rejected():
    with pytest.raises(ValueError, match="distinct bag priors"):
        make_synthetic_identifiable(d=2, k_groups=2)


def test_noiseless_mixing_is_injective():
    ds = make_synthetic_identifiable(d=2, m=5, k_groups=5, bags_per_group=10, bag_size=10, noise_std=0, seed=8)
    x = ds.all_instances()
    z = ds.all_latents()
    assert len(np.unique(z, axis=0)) == len(z)
    assert len(np.unique(x, axis=0)) == len(x)


# --------------------------------------------------------------- container


def test_round_trip(tmp_path):
    ds = make_bags(toy_pool(), 5, n_bags=3, mean_size=6, std_size=2, seed=1)
    path = tmp_path / "d.tmilds"
    save_bags(ds, path)
    back = load_bags(path)
    assert back == ds
    assert back.generation_config["seed"] == 1
    for a, b in zip(ds.bags, back.bags):
        np.testing.assert_array_equal(a.instance_labels, b.instance_labels)


def test_truncated_file_rejected(tmp_path):
    ds = make_bags(toy_pool(), 5, n_bags=3, seed=1)
    path = tmp_path / "d.tmilds"
    save_bags(ds, path)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(DataFormatError):
        load_bags(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOTADATASET" + bytes(20))
    with pytest.raises(DataFormatError):
        load_bags(path)


def test_save_is_byte_deterministic(tmp_path):
    ds = make_bags(toy_pool(), 5, n_bags=4, seed=3)
    save_bags(ds, tmp_path / "a")
    save_bags(ds, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_dataset_summary():
    ds = BagDataset([Bag(np.zeros((2, 1)), 0, [0, 0]), Bag(np.ones((4, 1)), 1, [1, 0, 0, 0])], 1)
    assert ds.summary() == {"n_bags": 2, "positive_fraction": 0.5, "mean_size": 3.0}
