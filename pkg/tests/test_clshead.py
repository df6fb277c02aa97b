import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uvlm.clshead import ClassifierNet, ClsHeadConfig, QueryClassifier, classify, cls_loss
from uvlm.encoder import EncoderConfig, ResEncoder
from uvlm.gradcheck import check_gradients


def head(**kw):
    torch.manual_seed(0)
    return QueryClassifier(ClsHeadConfig(**{"in_channels": 8, **kw}))


def test_zero_final_layer_gives_half():
    h = head()
    torch.nn.init.zeros_(h.fc.weight)
    torch.nn.init.zeros_(h.fc.bias)
    p = classify([torch.randn(2, 8, 2, 2, 2)], h)
    assert torch.equal(p, torch.full((2, 3), 0.5))


def test_flatten_length_and_output_length():
    h = head(n_queries=16, dim=32, n_classes=3)
    assert h.fc.in_features == 512
    assert h(torch.randn(1, 8, 2, 2, 1)).shape == (1, 3)


def test_attention_rows_sum_to_one():
    h = head()
    h(torch.randn(2, 8, 2, 3, 2))
    a = h.last_attention
    assert a.shape == (2, 4, 16, 12)
    torch.testing.assert_close(a.sum(-1), torch.ones(2, 4, 16))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_outputs_strictly_inside_unit_interval(seed):
    g = torch.Generator().manual_seed(seed)
    p = head()(torch.randn(1, 8, 2, 2, 2, generator=g))
    assert ((p > 0) & (p < 1)).all()


def test_token_permutation_invariance():
    h = head().double()
    f = torch.randn(1, 8, 2, 2, 2, dtype=torch.float64)
    flat = f.flatten(2)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(4))
    shuffled = flat[:, :, perm].view_as(f)
    torch.testing.assert_close(h(f), h(shuffled), rtol=1e-12, atol=1e-12)


def test_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        head()(torch.randn(1, 7, 2, 2, 2))


def test_config_validation():
    with pytest.raises(ValueError):
        ClsHeadConfig(8, dim=30, heads=4)
    with pytest.raises(ValueError):
        ClsHeadConfig(8, n_queries=0)


def test_bce_hand_values():
    assert cls_loss(torch.tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2))
    assert cls_loss(torch.tensor([0.5, 0.5]), [1.0, 0.0]).item() == pytest.approx(math.log(2))
    assert cls_loss(torch.tensor([1.0, 0.0]), [1.0, 0.0]).item() == pytest.approx(0.0, abs=1e-6)
    # clamping keeps a confidently wrong prediction finite
    assert cls_loss(torch.tensor([0.0]), [1.0]).item() == pytest.approx(-math.log(1e-7), rel=1e-3)
    with pytest.raises(ValueError):
        cls_loss(torch.tensor([0.5, 0.5]), [1.0])


def test_cls_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = ResEncoder(EncoderConfig((4, 6), blocks_per_stage=1))
    net = ClassifierNet(enc, QueryClassifier(ClsHeadConfig(6, n_classes=3, n_queries=4, dim=8, heads=2))).double()
    x = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    result = check_gradients(net, lambda: cls_loss(net(x), y), n=100, h=1e-3)
    assert len(result) >= 100
    assert result.max_rel_error < 1e-3


def test_shared_offset_does_not_change_output():
    h = head().double()
    f = torch.randn(1, 8, 2, 2, 2, dtype=torch.float64)
    offset = torch.randn(1, 8, 1, 1, 1, dtype=torch.float64) * 30
    torch.testing.assert_close(h(f), h(f + offset), rtol=1e-9, atol=1e-9)
