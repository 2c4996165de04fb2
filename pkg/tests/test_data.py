"""Dataset tests: synthetic generator, splits, CSV round trips."""

import numpy as np
import pytest

from teamopt.data import (Dataset, SynthConfig, generate_synthetic, load_csv,
                          planted_boundaries, save_csv, split)
from teamopt.errors import ConfigError, InputError, ParseError


def small_cfg(**kwargs):
    base = dict(num_classes=3, feature_dim=4, n=400,
                class_priors=(0.5, 0.3, 0.2), seed=0)
    base.update(kwargs)
    return SynthConfig(**base)


# --- generator -------------------------------------------------------------

def test_zero_noise_means_human_matches_truth():
    ds = generate_synthetic(small_cfg(human_easy_error=0.0,
                                      human_hard_error=0.0))
    assert np.array_equal(ds.h, ds.y)
    assert ds.human_error_rate() == 0.0


def test_human_errors_concentrate_in_planted_region():
    # closed form: 0.8 * 0.1 / (0.8 * 0.1 + 0.02 * 0.9) ~= 0.816
    cfg = SynthConfig(num_classes=3, feature_dim=4, n=10000,
                      class_priors=(0.5, 0.3, 0.2), human_easy_error=0.02,
                      human_hard_error=0.8, hard_region_fraction=0.1, seed=3)
    ds = generate_synthetic(cfg)
    hard_hi, _ = planted_boundaries(ds)
    errors = ds.h != ds.y
    inside = float((errors & (ds.X[:, 0] > hard_hi)).sum() / errors.sum())
    assert abs(inside - 0.8163) < 0.05


def test_generator_is_deterministic():
    a = generate_synthetic(small_cfg(seed=5))
    b = generate_synthetic(small_cfg(seed=5))
    assert a.X.tobytes() == b.X.tobytes()
    assert a.y.tobytes() == b.y.tobytes()
    assert a.h.tobytes() == b.h.tobytes()
    assert a.name == b.name
    c = generate_synthetic(small_cfg(seed=6))
    assert a.X.tobytes() != c.X.tobytes()


def test_class_priors_are_respected():
    ds = generate_synthetic(SynthConfig(seed=1))  # default skewed 5-class
    fractions = np.bincount(ds.y, minlength=5) / len(ds)
    assert np.allclose(fractions, (0.7, 0.075, 0.075, 0.075, 0.075),
                       atol=0.02)


def test_machine_hard_region_has_corrupted_features():
    cfg = small_cfg(n=4000, machine_noise_scale=2.0, seed=2)
    ds = generate_synthetic(cfg)
    _, hard_lo = planted_boundaries(ds)
    low = ds.X[:, 0] < hard_lo
    # scale-2 corruption adds ~4 to the variance of feature 1 inside
    assert ds.X[low, 1].var() > ds.X[~low, 1].var() + 2.0


def test_human_hard_flips_go_to_a_wrong_class():
    ds = generate_synthetic(small_cfg(human_easy_error=1.0,
                                      human_hard_error=1.0, seed=4))
    assert (ds.h != ds.y).all()
    assert ds.h.min() >= 0 and ds.h.max() < ds.num_classes


def test_planted_boundaries_recoverable():
    ds = generate_synthetic(small_cfg())
    hi, lo = planted_boundaries(ds)
    assert lo < hi
    assert abs((ds.X[:, 0] > hi).mean() - 0.1) < 0.02
    assert planted_boundaries(Dataset(np.zeros((2, 1)), [0, 1], [0, 1],
                                      2, "plain")) is None


@pytest.mark.parametrize("kwargs", [
    {"class_priors": (0.5, 0.5, 0.5)},
    {"class_priors": (1.0,)},
    {"human_easy_error": 0.5, "human_hard_error": 0.1},
    {"hard_region_fraction": 0.0},
    {"hard_region_fraction": 1.0},
    {"machine_noise_scale": -1.0},
    {"n": 0},
])
def test_generator_rejects_bad_config(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic(small_cfg(**kwargs))


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((0, 2)), [], [], 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), [0, 2], [0, 1], 2)  # label out of range
    with pytest.raises(InputError):
        Dataset(np.array([[np.nan, 0.0]]), [0], [0], 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), [0, 1], [0, 1], 1)  # needs two classes


# --- split -----------------------------------------------------------------

def identifiable_dataset(n):
    X = np.arange(n, dtype=np.float64)[:, None] * [1.0, 2.0]
    return Dataset(X, np.arange(n) % 2, np.arange(n) % 2, 2, "ids")


def test_split_sizes_floor_with_remainder_to_train():
    tr, va, te = split(identifiable_dataset(10), (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    tr, va, te = split(identifiable_dataset(14), (0.7, 0.15, 0.15), seed=0)
    assert (len(tr), len(va), len(te)) == (10, 2, 2)


def test_split_is_a_partition():
    ds = identifiable_dataset(29)
    parts = split(ds, (0.6, 0.2, 0.2), seed=3)
    seen = np.concatenate([p.X[:, 0] for p in parts])
    assert np.array_equal(np.sort(seen), ds.X[:, 0])
    for p in parts:
        assert np.array_equal(p.y, p.X[:, 0].astype(int) % 2)  # rows aligned


def test_split_deterministic_and_seed_sensitive():
    ds = identifiable_dataset(50)
    a = split(ds, (0.7, 0.15, 0.15), seed=9)
    b = split(ds, (0.7, 0.15, 0.15), seed=9)
    assert all(x.X.tobytes() == y.X.tobytes() for x, y in zip(a, b))
    c = split(ds, (0.7, 0.15, 0.15), seed=10)
    assert a[0].X.tobytes() != c[0].X.tobytes()


def test_split_names_tag_the_parts():
    parts = split(identifiable_dataset(10), (0.8, 0.1, 0.1), seed=0)
    assert [p.name for p in parts] == ["ids/train", "ids/val", "ids/test"]


def test_split_input_validation():
    with pytest.raises(InputError):
        split(identifiable_dataset(2), (0.34, 0.33, 0.33), seed=0)
    with pytest.raises(ConfigError):
        split(identifiable_dataset(10), (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ConfigError):
        split(identifiable_dataset(10), (1.0, 0.0, 0.0), seed=0)


# --- CSV -------------------------------------------------------------------

def test_csv_round_trip_is_exact(tmp_path):
    ds = generate_synthetic(small_cfg(n=50))
    path = tmp_path / "ds.csv"
    save_csv(ds, path)
    back = load_csv(path, ds.num_classes)
    assert np.array_equal(back.X, ds.X)  # repr floats round-trip exactly
    assert np.array_equal(back.y, ds.y)
    assert np.array_equal(back.h, ds.h)
    assert back.num_classes == ds.num_classes


def test_load_csv_small_hand_file(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("f0,f1,y,h\n0.1,0.2,0,0\n0.3,0.4,1,1\n0.5,0.6,1,0\n")
    ds = load_csv(path, 2)
    assert len(ds) == 3 and ds.feature_dim == 2
    assert ds.y.tolist() == [0, 1, 1]
    assert ds.h.tolist() == [0, 1, 0]
    assert np.allclose(ds.X[2], [0.5, 0.6])


def test_load_csv_range_error_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,y,h\n0.1,0,0\n0.2,1,5\n")
    with pytest.raises(ParseError) as info:
        load_csv(path, 5)
    assert info.value.line == 3
    assert "3" in str(info.value)


@pytest.mark.parametrize("text,line", [
    ("f0,f1\n0.1,0.2\n", 1),                  # header missing y,h
    ("g0,y,h\n0.1,0,0\n", 1),                 # wrong feature names
    ("f0,y,h\n0.1,0\n", 2),                   # short row
    ("f0,y,h\nabc,0,0\n", 2),                 # non-numeric feature
    ("f0,y,h\n0.1,0,0\n0.2,x,0\n", 3),        # non-integer label
    ("f0,y,h\ninf,0,0\n", 2),                 # non-finite feature
    ("", 1),                                  # empty file
])
def test_load_csv_parse_errors_carry_line_numbers(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        load_csv(path, 3)
    assert info.value.line == line


def test_csv_header_format(tmp_path):
    ds = generate_synthetic(small_cfg(n=5))
    path = tmp_path / "ds.csv"
    save_csv(ds, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "f0,f1,f2,f3,y,h"
    assert len(lines) == 6


def test_subset_and_instance_access():
    ds = identifiable_dataset(6)
    sub = ds.subset(np.array([4, 1]), "picked")
    assert sub.name == "picked" and len(sub) == 2
    assert sub.X[0, 0] == 4.0
    inst = ds.instance(3)
    assert inst.y == ds.y[3] and inst.x[0] == 3.0
