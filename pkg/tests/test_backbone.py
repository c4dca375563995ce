import numpy as np
import pytest
import torch

from vesselseg.backbone import (
    FrozenBackbone,
    ViTConfig,
    init_backbone,
    load_external_weights,
    parameter_count,
)
from vesselseg.weightfile import load_tensors, save_tensors


@pytest.fixture(scope="module")
def vit():
    return init_backbone(ViTConfig())


def test_parameter_count_closed_form(vit):
    counted = sum(p.numel() for p in vit.parameters())
    assert counted == parameter_count(ViTConfig()) == 177568
    small = ViTConfig(patch=8, embed_dim=16, heads=2, blocks=12, mlp_ratio=2, pos_grid=(2, 3))
    assert sum(p.numel() for p in FrozenBackbone(small).parameters()) == parameter_count(small)


def test_all_frozen(vit):
    assert all(not p.requires_grad for p in vit.parameters())


def test_checksum_seeded(vit):
    assert init_backbone(ViTConfig()).checksum() == vit.checksum()
    assert init_backbone(ViTConfig(seed=1)).checksum() != vit.checksum()


def test_token_counts(vit):
    assert vit.patch_embed(torch.zeros(2, 3, 64, 64)).shape == (2, 16, 32)
    assert vit.patch_embed(torch.zeros(1, 3, 336, 336)).shape == (1, 441, 32)
    with pytest.raises(ValueError):
        vit.patch_embed(torch.zeros(1, 3, 40, 64))


def test_zero_input_gives_positional(vit):
    tok = vit.patch_embed(torch.zeros(1, 3, 64, 64))
    assert torch.equal(tok[0], vit.pos.reshape(16, 32))
    tok = vit.patch_embed(torch.zeros(1, 3, 32, 80))
    assert torch.equal(tok[0], vit.positional(2, 5))


def test_patch_embed_is_flattened_patch_matmul(vit):
    x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    tok = vit.patch_embed(x)
    # token (row 1, col 0) is patch rows 16..31, cols 0..15, flattened channel-major
    patch = x[0, :, 16:32, 0:16].reshape(-1)
    ref = vit.patch_w @ patch + vit.patch_b + vit.positional(2, 2)[2]
    torch.testing.assert_close(tok[0, 2], ref, rtol=1e-5, atol=1e-6)


def test_taps_consistent_and_deterministic(vit):
    tok = vit.patch_embed(torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1)))
    full = vit.forward_taps(tok)
    assert sorted(full) == [2, 5, 8, 11]
    assert torch.equal(vit.forward_taps(tok, (11,))[11], full[11])
    again = vit.forward_taps(tok)
    assert all(torch.equal(full[k], again[k]) for k in full)
    with pytest.raises(ValueError):
        vit.forward_taps(tok, (12,))


def test_weights_round_trip(tmp_path, vit):
    p = tmp_path / "vit.wts"
    vit.save_weights(p)
    assert load_external_weights(p).checksum() == vit.checksum()


def test_weight_errors(tmp_path, vit):
    tensors = dict(vit.state_dict())
    tensors["pos"] = torch.zeros(4, 4, 48)
    bad = tmp_path / "bad.wts"
    save_tensors(bad, tensors)
    with pytest.raises(ValueError, match="pos"):
        load_external_weights(bad)
    del tensors["pos"]
    save_tensors(bad, tensors)
    with pytest.raises(ValueError, match="pos"):
        load_external_weights(bad)
    with pytest.raises(FileNotFoundError):
        load_external_weights(tmp_path / "absent.wts")


def test_weightfile_round_trip(tmp_path):
    t = {"b": torch.arange(6.0).reshape(2, 3), "a": torch.tensor([1.5])}
    save_tensors(tmp_path / "w", t)
    back = load_tensors(tmp_path / "w")
    assert list(back) == ["a", "b"]
    assert all(torch.equal(back[k], t[k]) for k in t)
    raw = (tmp_path / "w").read_bytes()
    (tmp_path / "w").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "w")
