"""MAC accounting conventions."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluidbench.compute import MacMeter, meter_inference, meter_ood, meter_training, mlp_macs
from fluidbench.heads import FeatureMap


def test_linear_head():
    assert meter_inference("linear", 16, 10) == 160


def test_frozen_map_is_free():
    assert meter_inference("frozen", 16, 10) == 0
    assert FeatureMap.frozen(16).macs() == 0


def test_two_layer_mlp():
    assert meter_inference("mlp", 0, 0, layers=[16, 32, 10]) == 16 * 32 + 32 * 10 == 832
    fmap = FeatureMap.mlp([16, 32, 10], np.random.default_rng(0))
    assert fmap.macs() == 832


def test_finetune_step():
    assert meter_training("optimizer_step", 64, meter_inference("linear", 16, 10)) == 30720


def test_centroid_update():
    assert meter_training("centroid", 1, 16) == 16


def test_normalising_heads_pay_d():
    assert meter_inference("cosine", 16, 10) == 176
    assert meter_inference("exemplar", 16, 10, "cosine") == 176
    assert meter_inference("exemplar", 16, 10, "dot") == 160
    assert meter_inference("ncm", 16, 10, "euclidean") == 160
    assert meter_inference("ncm", 16, 10, "cosine") == 176


def test_ood_extras():
    assert meter_ood("max_softmax", 16, 10) == 0
    assert meter_ood("mdt_euclidean", 16, 10) == 160
    assert meter_ood("mdt_cosine", 16, 10) == 176


def test_unknown_kinds():
    with pytest.raises(ValueError):
        meter_inference("transformer", 4, 4)
    with pytest.raises(ValueError):
        meter_training("sleep", 1, 1)
    with pytest.raises(ValueError):
        meter_ood("energy", 1, 1)


@given(batch=st.integers(1, 512), fwd=st.integers(0, 10**6), epochs=st.integers(1, 8))
def test_training_is_linear(batch, fwd, epochs):
    one = meter_training("optimizer_step", batch, fwd)
    assert sum(meter_training("optimizer_step", batch, fwd) for _ in range(2 * epochs)) == \
        2 * epochs * one


@given(sizes=st.lists(st.integers(1, 64), min_size=2, max_size=5))
def test_mlp_macs_oracle(sizes):
    want = 0
    for i in range(len(sizes) - 1):
        want += sizes[i] * sizes[i + 1]
    assert mlp_macs(sizes) == want


def test_meter_monotone_and_split():
    m = MacMeter()
    m.add_inference(5)
    m.add_training(7)
    assert (m.inference, m.training, m.total) == (5, 7, 12)
    assert m.gmacs == 12 / 1e9
    with pytest.raises(ValueError):
        m.add_training(-1)
    assert m.to_dict() == {"total": 12, "inference": 5, "training": 7, "gmacs": 12e-9}
