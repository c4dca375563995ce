import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vesselseg.adapter3d import AdapterConfig
from vesselseg.decoder import PRIOR_LOGIT, Decoder, decode, predict_mask
from vesselseg.model import AblationFlags, ModelConfig, VesselSegmenter


def test_decode_shape():
    dec = Decoder()
    out = decode(torch.zeros(1, 32, 8, 16, 16), torch.zeros(1, 16, 8, 32, 32), dec)
    assert out.shape == (1, 1, 8, 64, 64)
    with pytest.raises(ValueError):
        decode(torch.zeros(1, 32, 8, 16, 16), torch.zeros(1, 16, 8, 30, 32), dec)
    with pytest.raises(ValueError):
        decode(torch.zeros(1, 16, 8, 16, 16), torch.zeros(1, 16, 8, 32, 32), dec)


def test_zero_head_gives_bias():
    dec = Decoder()
    with torch.no_grad():
        dec.head.zero_()
        dec.head_b.fill_(0.3)
    out = dec(torch.randn(1, 32, 2, 4, 4), torch.randn(1, 16, 2, 8, 8))
    assert torch.all(out == torch.tensor(0.3))
    assert Decoder().head_b.item() == PRIOR_LOGIT


def test_predict_mask_examples():
    z = np.array([np.inf, -np.inf, 0.0, 3.0, -3.0])
    assert predict_mask(z).tolist() == [1, 0, 0, 1, 0]


@given(arrays(np.float64, 20, elements=st.floats(-30, 30)), st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_predict_mask_monotone(z, t, dt):
    lo, hi = predict_mask(z, t), predict_mask(z, t + dt)
    assert np.all(hi <= lo)


SMALL = ModelConfig(adapter=AdapterConfig(blocks_per_stage=1))


@pytest.mark.parametrize("dims", [(8, 32, 32), (16, 64, 64), (5, 48, 80)])
def test_model_output_shape(dims):
    model = VesselSegmenter(SMALL)
    with torch.no_grad():
        out = model(torch.rand(1, 1, *dims))
    assert out.shape == (1, 1, *dims)


def test_ablation_shapes_and_counts():
    counts = {}
    for name, flags in {
        "full": AblationFlags(),
        "no_adapter": AblationFlags(use_adapter=False),
        "no_agg": AblationFlags(use_aggregator=False),
        "last": AblationFlags(taps_last_only=True),
        "no_z": AblationFlags(use_z_channel=False),
    }.items():
        model = VesselSegmenter(ModelConfig(), flags)
        with torch.no_grad():
            assert model(torch.rand(1, 1, 3, 32, 32)).shape == (1, 1, 3, 32, 32)
        counts[name] = model.trainable_count()
        names = {n for n, _ in model.trainable_named_parameters()}
        assert model.frozen_count() > 0
        assert not names & {"backbone." + n for n, _ in model.backbone.named_parameters()}
    assert counts["full"] == 85929
    assert counts["no_adapter"] < counts["full"] and counts["no_agg"] < counts["full"]
    assert counts["last"] < counts["full"] and counts["no_z"] == counts["full"]
    with pytest.raises(ValueError):
        AblationFlags(use_adapter=False, use_aggregator=False)


def test_no_z_replaces_depth_map():
    x = torch.rand(1, 1, 4, 32, 32)
    _, z = VesselSegmenter(ModelConfig(), AblationFlags(use_z_channel=False)).inputs(x)
    assert torch.equal(z, x)
    _, z = VesselSegmenter(ModelConfig()).inputs(x)
    assert torch.equal(z[0, 0, :, 0, 0], torch.tensor([0, 1 / 3, 2 / 3, 1.0]))


def test_backbone_receives_no_gradient():
    model = VesselSegmenter(SMALL)
    model(torch.rand(1, 1, 2, 32, 32)).sum().backward()
    assert all(p.grad is None for p in model.backbone.parameters())
    assert all(p.grad is not None for p in model.trainable_parameters())
