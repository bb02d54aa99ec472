import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supertickets.tasks import (
    Dataset, TaskConfigError, TaskSpec, contains_bigram, designated_tokens, generate, generate_split,
    selection_split, subsample,
)


def test_bigram_label_follows_occurrence():
    spec = TaskSpec("a", "trigger_bigram", n_train=2000)
    d = generate(spec)["train"]
    bigram = designated_tokens(spec)["bigram"]
    assert np.array_equal(d.targets, contains_bigram(d.tokens, bigram).astype(int))
    assert 0.4 < d.targets.mean() < 0.7
    planted = np.zeros((1, spec.length), dtype=int)
    planted[0, 3:5] = bigram
    assert contains_bigram(planted, bigram)[0]


def test_parity_and_majority_labels():
    spec = TaskSpec("b", "marked_parity", n_train=500)
    d = generate(spec)["train"]
    marked = designated_tokens(spec)["marked"]
    assert np.array_equal(d.targets, np.isin(d.tokens, marked).sum(axis=1) % 2)
    spec = TaskSpec("c", "majority", n_train=500)
    d = generate(spec)["train"]
    des = designated_tokens(spec)
    a, b = np.isin(d.tokens, des["group_a"]).sum(axis=1), np.isin(d.tokens, des["group_b"]).sum(axis=1)
    assert (a != b).all() and np.array_equal(d.targets, (a > b).astype(int))


def test_majority_is_balanced_over_10k():
    d = generate_split(TaskSpec("c", "majority", n_train=10_000), "train")
    assert 0.45 <= d.targets.mean() <= 0.55


def test_count_ratio_targets():
    spec = TaskSpec("d", "count_ratio", n_train=500)
    d = generate(spec)["train"]
    marked = designated_tokens(spec)["marked"]
    assert np.allclose(d.targets, np.isin(d.tokens, marked).mean(axis=1))
    assert d.kind == "regression" and spec.loss_kind == "mse" and spec.n_outputs == 1
    all_marked = d.targets == 1.0
    assert np.isin(d.tokens[all_marked], marked).all()


def test_label_noise_rate():
    clean = generate_split(TaskSpec("a", "majority", n_train=20_000), "train")
    noisy = generate_split(TaskSpec("a", "majority", n_train=20_000, noise=0.2), "train")
    assert np.array_equal(clean.tokens, noisy.tokens)
    assert abs(np.mean(clean.targets != noisy.targets) - 0.2) < 0.015


def test_regeneration_is_bitwise_identical():
    spec = TaskSpec("a", "count_ratio", noise=0.05, seed=3)
    a, b = generate(spec), generate(spec)
    for s in a:
        assert a[s].tokens.tobytes() == b[s].tokens.tobytes()
        assert a[s].targets.tobytes() == b[s].targets.tobytes()


def test_splits_rarely_collide():
    spec = TaskSpec("a", "trigger_bigram", n_train=2000, n_val=2000, n_test=2000)
    d = generate(spec)
    d["pretrain"] = generate_split(spec, "pretrain", 2000)
    keys = {s: {(r.tobytes(), t) for r, t in zip(v.tokens, v.targets.tolist())} for s, v in d.items()}
    names = list(keys)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert len(keys[a] & keys[b]) / len(keys[a]) < 0.01


def test_invalid_specs():
    with pytest.raises(TaskConfigError):
        TaskSpec("x", "copy")
    with pytest.raises(TaskConfigError):
        TaskSpec("x", noise=0.5)
    with pytest.raises(TaskConfigError):
        generate_split(TaskSpec("x"), "pretrain")


def test_subsample_examples():
    d = Dataset(np.arange(200).reshape(100, 2), np.arange(100), "classification")
    assert subsample(d, 1.0, 0) is d
    half = subsample(d, 0.5, 4)
    assert len(half) == 50 and len(set(half.targets.tolist())) == 50
    assert np.array_equal(half.targets, subsample(d, 0.5, 4).targets)
    with pytest.raises(TaskConfigError):
        subsample(d, 0.001, 0)
    with pytest.raises(TaskConfigError):
        subsample(d, 0.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_subsample_size_and_no_replacement(n, frac, seed):
    d = Dataset(np.zeros((n, 2), dtype=int), np.arange(n), "classification")
    k = int(round(frac * n))
    if k < 1:
        with pytest.raises(TaskConfigError):
            subsample(d, frac, seed)
        return
    s = subsample(d, frac, seed)
    assert len(s) == k and len(np.unique(s.targets)) == k


def test_selection_split_is_a_tenth():
    val = generate_split(TaskSpec("a", n_val=500), "val")
    sel = selection_split(val, 0)
    assert len(sel) == 50
    assert np.array_equal(sel.tokens, selection_split(val, 0).tokens)


def test_dataset_text_round_trip(tmp_path):
    for gen in ("majority", "count_ratio"):
        d = generate_split(TaskSpec("a", gen, n_train=50), "train")
        d.save(tmp_path / gen)
        e = Dataset.load(tmp_path / gen, d.kind)
        assert np.array_equal(d.tokens, e.tokens) and np.array_equal(d.targets, e.targets)
