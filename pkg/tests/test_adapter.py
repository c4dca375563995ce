import numpy as np
import pytest
import torch

from vesselseg.adapter3d import Adapter3D, AdapterConfig, ConvNeXtBlock, adapter_forward, convnext_block

import oracles

f64 = torch.float64


def _block(channels=4, seed=0):
    return ConvNeXtBlock(channels, torch.Generator().manual_seed(seed)).double()


def _numpy_block(x, blk):
    """Same block composed from loop correlation plus numpy LN / tanh-GELU / matmul."""
    p = {k: v.detach().numpy() for k, v in blk.named_parameters()}
    dw = oracles.correlate3d_depthwise(x, p["dw_spatial"], p["dw_spatial_b"])
    dw = dw + oracles.correlate3d_depthwise(x, p["dw_depth"], p["dw_depth_b"])
    mu = dw.mean(1, keepdims=True)
    var = ((dw - mu) ** 2).mean(1, keepdims=True)
    ln = (dw - mu) / np.sqrt(var + 1e-6) * p["ln_g"][None, :, None, None, None] + p["ln_b"][None, :, None, None, None]
    h = np.einsum("oc,bcdhw->bodhw", p["pw1"], ln) + p["pw1_b"][None, :, None, None, None]
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
    h = np.einsum("oc,bcdhw->bodhw", p["pw2"], h) + p["pw2_b"][None, :, None, None, None]
    return h + x


def test_block_matches_composed_oracle():
    blk = _block(3, 1)
    with torch.no_grad():
        for prm in (blk.dw_spatial_b, blk.dw_depth_b, blk.ln_b, blk.pw1_b, blk.pw2_b):
            prm.normal_(generator=torch.Generator().manual_seed(5))
    x = torch.randn(1, 3, 3, 8, 8, generator=torch.Generator().manual_seed(2), dtype=f64)
    ref = _numpy_block(x.numpy(), blk)
    np.testing.assert_allclose(convnext_block(x, blk).detach().numpy(), ref, atol=1e-12)


def test_zero_branch_is_identity():
    blk = _block()
    with torch.no_grad():
        blk.pw2.zero_()
    x = torch.randn(1, 4, 3, 8, 8, dtype=f64)
    assert torch.equal(blk(x), x)


def test_impulse_footprint_is_3x7x7():
    blk = _block(2, 3)
    with torch.no_grad():
        blk.dw_depth.zero_()
    x = torch.randn(1, 2, 9, 15, 15, generator=torch.Generator().manual_seed(4), dtype=f64)
    bumped = x.clone()
    bumped[0, 0, 4, 7, 7] += 1.0
    diff = (blk(bumped) - blk(x)).detach().abs().amax(dim=(0, 1)) > 0
    expect = torch.zeros(9, 15, 15, dtype=torch.bool)
    expect[3:6, 4:11, 4:11] = True
    assert torch.equal(diff, expect)


def test_depth_branch_reaches_neighbouring_slices_only():
    blk = _block(2, 3)
    with torch.no_grad():
        blk.dw_spatial.zero_()
    x = torch.randn(1, 2, 9, 9, 9, generator=torch.Generator().manual_seed(4), dtype=f64)
    bumped = x.clone()
    bumped[0, 1, 4, 4, 4] += 1.0
    diff = (blk(bumped) - blk(x)).detach().abs().amax(dim=(0, 1)) > 0
    expect = torch.zeros(9, 9, 9, dtype=torch.bool)
    expect[3:6, 4, 4] = True
    assert torch.equal(diff, expect)


def test_adapter_shapes_and_errors():
    ad = Adapter3D(AdapterConfig(), seed=0)
    fh, fq = adapter_forward(torch.zeros(1, 2, 8, 64, 64), ad)
    assert fh.shape == (1, 16, 8, 32, 32) and fq.shape == (1, 32, 8, 16, 16)
    with pytest.raises(ValueError):
        ad(torch.zeros(1, 2, 8, 30, 64))
    with pytest.raises(ValueError):
        ad(torch.zeros(1, 3, 8, 64, 64))
    with pytest.raises(ValueError):
        convnext_block(torch.zeros(1, 5, 2, 8, 8), ad.stage1[0])
    with pytest.raises(ValueError):
        AdapterConfig(stride=(2, 2, 2))


def test_adapter_depth_preserved_and_seeded():
    x = torch.rand(1, 2, 5, 16, 16, generator=torch.Generator().manual_seed(0))
    a, b = Adapter3D(seed=7), Adapter3D(seed=7)
    assert all(torch.equal(u, v) for u, v in zip(a(x), b(x)))
    assert a(x)[0].shape[2] == 5
