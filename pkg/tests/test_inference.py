import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kgssl import neuralcore as nc
from kgssl.datahub import Dataset, EntityRecord, fit_normalize, mask_missing
from kgssl.errors import ConfigError, DataError
from kgssl.inference import (
    denoise_or_impute,
    embed_entity,
    estimate_characteristics,
    read_embeddings_csv,
    read_estimates_csv,
    write_embeddings_csv,
    write_estimates_csv,
)
from kgssl.trainer import Checkpoint, TrainConfig, initial_params

CFG = TrainConfig(window=100, stride=100, hidden_size=8, seeds=(0,), dtype="float64")


def constant_head_checkpoint(std, bias, seed=0, config=CFG):
    """A checkpoint whose inverse head emits ``bias`` for every window."""
    params = initial_params(std, config, seed)
    tensors = nc.named_tensors(params)
    tensors["inverse_head.output.weight"] = torch.zeros_like(tensors["inverse_head.output.weight"])
    tensors["inverse_head.output.bias"] = torch.as_tensor(bias, dtype=torch.float64)
    return Checkpoint(nc.replace_tensors(params, tensors), std.stats, config, seed, std.driver_names, std.char_names)


def random_checkpoint(std, seed=0, config=CFG):
    return Checkpoint(initial_params(std, config, seed), std.stats, config, seed, std.driver_names, std.char_names)


@pytest.fixture(scope="module")
def two_char_dataset():
    rng = np.random.default_rng(2)
    recs = [EntityRecord(f"e{i}", rng.normal(size=(400, 2)), rng.normal(size=400), rng.normal(size=2), np.ones(2, bool)) for i in range(5)]
    std, _ = fit_normalize(Dataset(tuple(recs), ("a", "b"), ("z0", "z1")))
    return std


def test_two_window_example(two_char_dataset):
    std = two_char_dataset
    cks = [constant_head_checkpoint(std, [1.0, 3.0]), constant_head_checkpoint(std, [3.0, 5.0], seed=1)]
    est = estimate_characteristics(cks, std["e0"], period=(0, 100))
    assert est.estimate.tolist() == [2.0, 4.0]
    assert est.uncertainty.tolist() == [1.0, 1.0]


def test_single_window_zero_uncertainty(two_char_dataset):
    std = two_char_dataset
    est = estimate_characteristics([random_checkpoint(std)], std["e1"], period=(50, 150))
    assert est.window_count == 1 and np.all(est.uncertainty == 0.0)


def test_uncertainty_is_population_std(two_char_dataset):
    std = two_char_dataset
    cks = [random_checkpoint(std, s) for s in (0, 1, 2)]
    for est in denoise_or_impute(cks, std, stride=37):
        preds = est.window_predictions
        assert preds.shape[0] == 3 * est.window_count
        assert np.allclose(est.uncertainty, np.std(preds, axis=0, ddof=0), rtol=0, atol=1e-9)
        assert np.allclose(est.estimate, preds.mean(axis=0), rtol=0, atol=1e-12)


def test_copies_of_one_checkpoint(two_char_dataset):
    std = two_char_dataset
    ck = random_checkpoint(std)
    one = estimate_characteristics([ck], std["e2"])
    three = estimate_characteristics([ck, ck, ck], std["e2"])
    assert np.allclose(one.estimate, three.estimate, atol=1e-12) and np.allclose(one.uncertainty, three.uncertainty, atol=1e-12)


def test_batched_matches_single(two_char_dataset):
    std = two_char_dataset
    cks = [random_checkpoint(std, s) for s in (0, 1)]
    batched = {e.entity_id: e for e in denoise_or_impute(cks, std)}
    for eid in std.ids:
        single = estimate_characteristics(cks, std[eid])
        assert np.allclose(single.estimate, batched[eid].estimate, atol=1e-12)


def test_ignores_stored_characteristics(two_char_dataset):
    std = two_char_dataset
    ck = random_checkpoint(std)
    masked = mask_missing(std, 1.0, 0)
    a = denoise_or_impute([ck], std)
    b = denoise_or_impute([ck], masked)
    for x, y in zip(a, b):
        assert np.array_equal(x.estimate, y.estimate)


def test_physical_units(two_char_dataset):
    std = two_char_dataset
    est = estimate_characteristics([random_checkpoint(std)], std["e3"])
    assert np.allclose(est.estimate_physical, std.stats.characteristics_to_physical(est.estimate))


def test_default_stride_is_window(two_char_dataset):
    std = two_char_dataset
    pooled, per = embed_entity(random_checkpoint(std), std["e0"])
    assert per.shape == (4, 8) and np.allclose(pooled, per.mean(axis=0))


@given(st.integers(1, 150))
@settings(max_examples=10, deadline=None)
def test_window_counts(stride):
    rng = np.random.default_rng(0)
    recs = [EntityRecord("a", rng.normal(size=(250, 1)), rng.normal(size=250), np.zeros(1), np.ones(1, bool)),
            EntityRecord("b", rng.normal(size=(250, 1)), rng.normal(size=250), np.ones(1), np.ones(1, bool))]
    std, _ = fit_normalize(Dataset(tuple(recs), ("x",), ("z",)))
    est = estimate_characteristics([random_checkpoint(std)], std["a"], stride=stride)
    assert est.window_count == (250 - 100) // stride + 1


def test_errors(two_char_dataset):
    std = two_char_dataset
    with pytest.raises(ConfigError):
        estimate_characteristics([], std["e0"])
    with pytest.raises(DataError):
        estimate_characteristics([random_checkpoint(std)], std["e0"], period=(0, 50))


def test_csv_roundtrip(two_char_dataset, tmp_path):
    std = two_char_dataset
    ests = denoise_or_impute([random_checkpoint(std)], std)
    write_estimates_csv(tmp_path / "e.csv", ests)
    write_embeddings_csv(tmp_path / "h.csv", ests)
    ids, names, values = read_estimates_csv(tmp_path / "e.csv")
    assert ids == list(std.ids) and names == ["z0", "z1"]
    assert np.array_equal(values, np.stack([e.estimate for e in ests]))
    emb = read_embeddings_csv(tmp_path / "h.csv")
    assert all(np.array_equal(emb[e.entity_id], e.embedding) for e in ests)
