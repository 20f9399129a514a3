import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlow_lab.data import (
    DatasetSplit,
    SyntheticSpec,
    build_multimodal_gt,
    default_tau,
    generate_synthetic,
    load_split,
    mode_displacements,
    save_split,
)
from dlow_lab.errors import ConfigError, ParseError


@pytest.fixture(scope="module")
def splits():
    return generate_synthetic(5, 200, 5, 20, 4, 0.05, seed=0)


def test_sizes_and_shapes(splits):
    train, test = splits
    assert len(train) == 1000
    assert train.contexts.shape == (1000, 5, 4)
    assert train.futures.shape == (1000, 20, 4)
    assert len(test) == 200
    assert set(np.unique(train.modes)) == set(range(5))


def test_end_poses_form_separated_clusters(splits):
    train, _ = splits
    disp = train.futures[:, -1] - train.contexts[:, -1]
    centers = np.stack([disp[train.modes == m].mean(0) for m in range(5)])
    # brute-force nearest-centre assignment must reproduce the generator's labels
    d = np.linalg.norm(disp[:, None] - centers[None], axis=-1)
    assert np.array_equal(d.argmin(1), train.modes)
    gaps = [np.linalg.norm(centers[a] - centers[b]) for a in range(5) for b in range(a + 1, 5)]
    assert min(gaps) > 5 * 0.05


def test_zero_noise_futures_identical_within_mode():
    train, _ = generate_synthetic(3, 20, 4, 6, 4, 0.0, seed=1, num_prototypes=1)
    for m in range(3):
        fut = train.futures[train.modes == m]
        assert np.all(fut == fut[0])


def test_deterministic():
    a = generate_synthetic(3, 30, 4, 6, 4, 0.05, seed=7)
    b = generate_synthetic(3, 30, 4, 6, 4, 0.05, seed=7)
    assert a[0] == b[0] and a[1] == b[1]
    c = generate_synthetic(3, 30, 4, 6, 4, 0.05, seed=8)
    assert not c[0] == a[0]


def test_future_deviation_bounded_by_three_noise_scales():
    ns = 0.01
    train, _ = generate_synthetic(4, 250, 5, 20, 4, ns, seed=3, num_prototypes=1)
    clean, _ = generate_synthetic(4, 250, 5, 20, 4, 0.0, seed=3, num_prototypes=1)
    for m in range(4):
        proto = clean.futures[clean.modes == m][0]
        dev = np.abs(train.futures[train.modes == m] - proto).max()
        assert dev <= 3 * ns + 1e-12


def test_mode_weights_and_lead_joint():
    train, _ = generate_synthetic(
        4, 100, 5, 10, 4, 0.05, seed=0, mode_weights=(0.7, 0.1, 0.1, 0.1), num_prototypes=1
    )
    counts = np.bincount(train.modes)
    assert counts.tolist() == [280, 40, 40, 40]
    disp = mode_displacements(SyntheticSpec(num_modes=4, lead_joint_modes=2))
    # first joint shared by modes of equal parity, second joint distinct for all
    assert np.allclose(disp[0, :2], disp[2, :2]) and np.allclose(disp[1, :2], disp[3, :2])
    assert not np.allclose(disp[0, :2], disp[1, :2])
    assert len({tuple(np.round(r[2:], 9)) for r in disp}) == 4


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_modes=1),
        dict(V=3),
        dict(V=0),
        dict(items_per_mode=0),
        dict(noise_scale=-1.0),
    ],
)
def test_invalid_dimensions(kwargs):
    args = dict(num_modes=3, items_per_mode=5, H=3, T=4, V=4, noise_scale=0.1, seed=0)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        generate_synthetic(**args)


# -- multi-modal ground truth --------------------------------------------------


def test_tau_zero_singletons(splits):
    _, test = splits
    gt = build_multimodal_gt(test, 0.0)
    assert all(list(g) == [i] for i, g in enumerate(gt.groups))


def test_tau_infinite_everything(splits):
    _, test = splits
    gt = build_multimodal_gt(test, math.inf)
    assert all(len(g) == len(test) for g in gt.groups)


def test_groups_match_prototypes(splits):
    _, test = splits
    tau = 3 * 0.05 * math.sqrt(5 * 4)
    gt = build_multimodal_gt(test, tau)
    flat = test.contexts.reshape(len(test), -1)
    for i in range(0, len(test), 17):
        brute = [j for j in range(len(test)) if np.linalg.norm(flat[i] - flat[j]) <= tau]
        assert list(gt.groups[i]) == brute
        # every mode of the shared prototype is represented
        assert set(test.modes[gt.groups[i]]) == set(range(5))


def test_group_symmetry_and_monotonicity(splits):
    _, test = splits
    small = build_multimodal_gt(test, 0.5)
    large = build_multimodal_gt(test, 1.0)
    for i in range(len(test)):
        assert i in small.groups[i]
        assert set(small.groups[i]) <= set(large.groups[i])
        for j in small.groups[i]:
            assert i in small.groups[j]


def test_default_tau_positive(splits):
    assert default_tau(splits[1]) > 0


# -- file format ------------------------------------------------------------------


def test_round_trip_exact(tmp_path, splits):
    train, test = splits
    for split in (train, test):
        path = save_split(split, tmp_path / f"{split.name}.txt")
        assert load_split(path) == split


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.sampled_from([2, 4, 6]),
    st.floats(-1e6, 1e6, allow_nan=False, width=64),
)
def test_round_trip_arbitrary_values(tmp_path_factory, H, T, V, scale):
    rng = np.random.default_rng(abs(int(scale)) % 1000)
    split = DatasetSplit(
        rng.standard_normal((3, H, V)) * scale,
        rng.standard_normal((3, T, V)) / 3.0,
        None,
        50.0,
        "items",
    )
    path = save_split(split, tmp_path_factory.mktemp("rt") / "items.txt")
    assert load_split(path) == split


def test_header_and_layout(tmp_path):
    split = DatasetSplit(np.zeros((1, 2, 2)), np.ones((1, 1, 2)), np.array([3]), 25.0, "x")
    text = save_split(split, tmp_path / "x.txt").read_text().splitlines()
    assert text[0] == "2 1 2 25.0 1"
    assert text[1] == "context: 0.0 0.0 0.0 0.0"
    assert text[2] == "future: 1.0 1.0"
    assert text[3] == "mode: 3"


@pytest.mark.parametrize(
    "body, where",
    [
        ("2 1 2 25.0 1\ncontext: 0 0 0\nfuture: 1 1\n", ":2:"),
        ("2 1 2 25.0 1\ncontext: 0 0 0 x\nfuture: 1 1\n", ":2:"),
        ("2 1 2 25.0 1\nfuture: 1 1\n", ":2:"),
        ("2 1 2 25.0 2\ncontext: 0 0 0 0\nfuture: 1 1\n", ":1:"),
        ("2 1 2\n", ":1:"),
        ("2 1 2 25.0 1\ncontext: 0 0 0 0\nfuture: 1 1\nmode: a\n", ":4:"),
    ],
)
def test_malformed_files_name_the_line(tmp_path, body, where):
    path = tmp_path / "bad.txt"
    path.write_text(body)
    with pytest.raises(ParseError, match=where):
        load_split(path)
