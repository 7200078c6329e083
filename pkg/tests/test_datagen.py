import csv

import numpy as np
import pytest

from core.datagen import (
    ClassifySpec,
    ToySpec,
    apply_background_flip,
    apply_uniform_flip,
    build_spec,
    exact_count,
    generate_classify,
    generate_toy,
    next_batch,
    write_split_csv,
)
from core.exceptions import ConfigurationError
from core.tensor import make_rng


def test_exact_count():
    assert exact_count(0.4, 1000) == 400
    assert exact_count(0.7, 1000) == 700
    assert exact_count(0.15, 10) == 1


def test_clean_toy_has_no_flags():
    data = generate_toy(ToySpec(n_train=50, n_val=10, n_test=10))
    assert not data.train.corrupted.any()
    for task in range(2):
        np.testing.assert_array_equal(data.train.targets[task], data.train.clean_targets[task])


def test_zero_sigma_gives_zero_targets():
    data = generate_toy(ToySpec(n_train=20, n_val=5, n_test=5, sigma=0.0))
    for split in (data.val, data.test):
        for target in split.targets:
            assert not np.any(target)


def test_noise_corrupts_exact_count_per_task():
    data = generate_toy(ToySpec(noise_fraction=0.4, n_train=1000))
    np.testing.assert_array_equal(data.train.corrupted.sum(axis=1), [400, 400])
    for task in range(2):
        flags = data.train.corrupted[task]
        diff = data.train.targets[task] - data.train.clean_targets[task]
        assert np.all(diff[~flags] == 0)
        assert np.all(diff[flags] != 0)


def test_validation_and_test_are_clean():
    data = generate_toy(ToySpec(noise_fraction=0.7, n_train=100))
    assert not data.val.corrupted.any()
    assert not data.test.corrupted.any()


def test_main_only_noise():
    data = generate_toy(ToySpec(noise_fraction=0.5, n_train=100, noisy_tasks="main"))
    np.testing.assert_array_equal(data.train.corrupted.sum(axis=1), [50, 0])


def test_per_task_noise_fractions():
    data = generate_toy(ToySpec(n_train=100, task_noise_fractions=[0.7, 0.1]))
    np.testing.assert_array_equal(data.train.corrupted.sum(axis=1), [70, 10])


def test_toy_is_deterministic():
    a = generate_toy(ToySpec(noise_fraction=0.4, n_train=60, seed=9))
    b = generate_toy(ToySpec(noise_fraction=0.4, n_train=60, seed=9))
    np.testing.assert_array_equal(a.train.X, b.train.X)
    np.testing.assert_array_equal(a.train.targets[0], b.train.targets[0])
    np.testing.assert_array_equal(a.train.corrupted, b.train.corrupted)


def test_variance_convention_changes_scales():
    spec = ToySpec(scale_convention="variance", noise_scale=4.0)
    assert spec.std(spec.noise_scale) == pytest.approx(2.0)
    assert ToySpec().std(4.0) == 4.0


def test_invalid_toy_spec():
    with pytest.raises(ConfigurationError):
        build_spec(ToySpec, noise_fraction=1.5)
    with pytest.raises(ConfigurationError):
        build_spec(ToySpec, n_tasks=2, task_noise_fractions=[0.1])


def test_uniform_flip_identity_at_zero():
    labels = np.arange(10) % 3
    flipped, flags = apply_uniform_flip(labels, 0.0, 3, make_rng(0))
    np.testing.assert_array_equal(flipped, labels)
    assert not flags.any()


def test_uniform_flip_changes_every_label():
    labels = make_rng(1).integers(0, 5, size=40)
    flipped, flags = apply_uniform_flip(labels, 1.0, 5, make_rng(2))
    assert flags.all()
    assert np.all(flipped != labels)
    assert np.all((flipped >= 0) & (flipped < 5))


def test_binary_uniform_flip_is_complement():
    labels = np.array([0, 1, 1, 0])
    flipped, _ = apply_uniform_flip(labels, 1.0, 2, make_rng(0))
    np.testing.assert_array_equal(flipped, 1 - labels)


def test_uniform_flip_needs_two_classes():
    with pytest.raises(ConfigurationError):
        apply_uniform_flip(np.zeros(3, dtype=int), 0.5, 1, make_rng(0))


def test_background_flip():
    labels = make_rng(3).integers(0, 5, size=100)
    flipped, flags = apply_background_flip(labels, 0.2, 1, make_rng(4))
    assert flags.sum() == 20
    assert np.all(flipped[flags] == 1)
    assert np.all(labels[flags] != 1)
    np.testing.assert_array_equal(flipped[~flags], labels[~flags])


def test_background_flip_edge_cases():
    labels = np.full(10, 2)
    flipped, flags = apply_background_flip(labels, 0.5, 2, make_rng(0))
    assert not flags.any()
    np.testing.assert_array_equal(flipped, labels)
    flipped, flags = apply_background_flip(np.arange(10), 0.0, 2, make_rng(0))
    np.testing.assert_array_equal(flipped, np.arange(10))


def test_classify_without_flips():
    data = generate_classify(ClassifySpec(n_train=100, n_val=20, n_test=20))
    assert not data.train.corrupted.any()
    assert data.n_tasks == 4
    assert [s.kind for s in data.loss_specs] == ["bce-with-logits"] * 4
    for target in data.train.targets:
        assert set(np.unique(target)) <= {0.0, 1.0}


def test_classify_background_flags_every_task():
    data = generate_classify(ClassifySpec(n_train=200, flip_mode="background", flip_fraction=0.2))
    assert data.train.corrupted.sum(axis=1).tolist() == [40, 40, 40, 40]
    # the background class is detected by task 1
    flags = data.train.corrupted[1]
    assert np.all(data.train.targets[1][flags] == 1.0)


def test_classify_cross_entropy_main_task():
    data = generate_classify(ClassifySpec(n_train=50, main_loss="ce"))
    assert data.loss_specs[0].kind == "ce-with-logits"
    assert data.output_dims[0] == 10
    assert data.train.targets[0].shape == (50,)


def test_classify_rejects_too_many_tasks():
    with pytest.raises(ConfigurationError):
        build_spec(ClassifySpec, n_classes=3, n_tasks=4)


def test_next_batch():
    data = generate_toy(ToySpec(n_train=30, n_val=5, n_test=5))
    a = [next_batch(data.train, 30, make_rng(5)).indices for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])
    assert np.all((a[0] >= 0) & (a[0] < 30))
    rng = make_rng(6)
    batch = next_batch(data.train, 8, rng)
    assert len(batch) == 8
    np.testing.assert_array_equal(batch.X, data.train.X[batch.indices])
    with pytest.raises(ConfigurationError):
        next_batch(data.train, 0, rng)


def test_next_batch_inclusion_frequency():
    n, batch_size, draws = 20, 4, 10_000
    data = generate_toy(ToySpec(n_train=n, n_val=5, n_test=5))
    rng = make_rng(12)
    hits = np.zeros(n)
    for _ in range(draws):
        hits[np.unique(next_batch(data.train, batch_size, rng).indices)] += 1
    p = 1.0 - ((n - 1) / n) ** batch_size
    sigma = np.sqrt(draws * p * (1.0 - p))
    for index in (0, n - 1):
        assert abs(hits[index] - draws * p) <= 3 * sigma
    assert np.all(hits > 0)


def test_shared_noise_moves_every_corrupted_target_equally():
    data = generate_toy(ToySpec(noise_fraction=0.4, n_train=200, seed=3))
    for task in range(2):
        flags = data.train.corrupted[task]
        shift = data.train.targets[task][flags] - data.train.clean_targets[task][flags]
        np.testing.assert_allclose(shift, np.full_like(shift, shift[0, 0]), rtol=0, atol=1e-12)


def test_sample_noise_draws_one_offset_per_target():
    data = generate_toy(ToySpec(noise_fraction=0.4, n_train=200, seed=3, noise_mode="sample"))
    flags = data.train.corrupted[0]
    shift = data.train.targets[0][flags] - data.train.clean_targets[0][flags]
    assert np.unique(shift).size == shift.size
    assert abs(shift.mean()) < 0.5


def test_write_split_csv(tmp_path):
    data = generate_toy(ToySpec(n_train=12, n_val=3, n_test=3, noise_fraction=0.5))
    path = tmp_path / "train.csv"
    write_split_csv(data.train, path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == [f"x{k}" for k in range(10)] + ["y0", "y1", "flag0", "flag1"]
    assert len(rows) == 13
    flags = np.array([[int(v) for v in row[-2:]] for row in rows[1:]]).T
    np.testing.assert_array_equal(flags, data.train.corrupted.astype(int))
    assert float(rows[1][0]) == pytest.approx(data.train.X[0, 0], rel=1e-8)
