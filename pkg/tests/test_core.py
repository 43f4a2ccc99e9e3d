import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedssg.core import (ClientDataset, ConfigError, Dataset, RngStream, Sample, concat, derive_path,
                         derive_stream, histogram, load_dataset, save_dataset)

from conftest import make_dataset


def test_histogram_empty():
    cc, dc = histogram(Dataset.empty(2, 3, 2))
    assert cc.tolist() == [0, 0, 0]
    assert dc.tolist() == [0, 0]


def test_histogram_hand_counted():
    samples = [Sample(np.zeros(2), 0, 0)] * 3 + [Sample(np.ones(2), 2, 0)]
    cc, dc = histogram(Dataset.from_samples(samples, 2, 3, 1))
    assert cc.tolist() == [3, 0, 1]
    assert dc.tolist() == [4]


def test_histogram_cnp_counts():
    ds = make_dataset([222, 549, 591, 1564, 438], domain=1, n_domains=3)
    cc, dc = histogram(ds)
    assert cc.tolist() == [222, 549, 591, 1564, 438]
    assert cc.sum() == 3364 == dc[1]


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), max_size=40))
def test_histogram_conservation(pairs):
    labels = [p[0] for p in pairs]
    domains = [p[1] for p in pairs]
    ds = Dataset(np.zeros((len(pairs), 2)), labels, domains, 4, 3)
    assert ds.class_counts.sum() == ds.domain_counts.sum() == len(pairs)
    sub = ds.subset(np.arange(0, len(pairs), 2))
    assert sub.class_counts.sum() == sub.domain_counts.sum() == len(sub)


def test_dataset_is_read_only():
    ds = make_dataset([2, 2])
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_dataset_rejects_bad_labels():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 1)), [0, 5], [0, 0], 3, 1)
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 1)), [0, 1], [0, 2], 3, 2)


def test_client_dataset_single_domain():
    ds = Dataset(np.zeros((2, 1)), [0, 1], [0, 1], 2, 2)
    with pytest.raises(ConfigError):
        ClientDataset(0, 0, ds, Dataset.empty(1, 2, 2))


def test_augmented_concatenates():
    real = make_dataset([3, 1])
    syn = make_dataset([0, 2], seed=1)
    cl = ClientDataset(0, 0, real, syn)
    assert cl.augmented.class_counts.tolist() == [3, 3]
    assert concat([real, syn]).content_hash() == cl.augmented.content_hash()


def test_stream_same_label_same_draws(rng):
    a = derive_stream(rng, "x").generator().random(50)
    b = derive_stream(rng, "x").generator().random(50)
    assert np.array_equal(a, b)


def test_stream_sibling_labels_differ(rng):
    a = derive_stream(rng, "a").generator().random(100)
    b = derive_stream(rng, "b").generator().random(100)
    assert not np.any(a == b)


def test_stream_path_composition(rng):
    a = derive_stream(derive_stream(rng, "client"), 7).generator().random(20)
    b = derive_path(rng, ["client", 7]).generator().random(20)
    assert np.array_equal(a, b)


def test_stream_int_and_str_labels_distinct(rng):
    a = rng.child(1).generator().random(10)
    b = rng.child("1").generator().random(10)
    assert not np.array_equal(a, b)


def test_sibling_stream_correlation(rng):
    for labels in [("a", "b"), (0, 1), ("local", "synth")]:
        a = rng.child(labels[0]).generator().random(10_000)
        b = rng.child(labels[1]).generator().random(10_000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_stream_label_validation(rng):
    with pytest.raises(ValueError):
        rng.child(-1)
    with pytest.raises(TypeError):
        rng.child(1.5)


def test_dataset_round_trip(tmp_path):
    ds = make_dataset([3, 4, 1], domain=1, n_domains=2)
    save_dataset(ds, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert back.content_hash() == ds.content_hash()
    assert (tmp_path / "d.jsonl").read_bytes() == (save_dataset(back, tmp_path / "e.jsonl")
                                                   or (tmp_path / "e.jsonl").read_bytes())
