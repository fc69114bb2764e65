import copy

import pytest
import torch
import torch.nn.functional as F
from torch import nn

from privprune import (ArchSpec, ConfigurationError, PlainBlock, ResidualBlock,
                       SoftMaskSet, SplitModel, ValidationError, build_split_model)
from privprune.models import load_checkpoint, resplit, save_checkpoint


def rand_batch(n=8, res=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, res, res, generator=g)


def test_split_partitioning():
    m = build_split_model("desk4", split_index=2, seed=0)
    assert len(m.edge_blocks) == 2 and len(m.cloud_blocks) == 2
    m4 = build_split_model("desk4", split_index=4, seed=0)
    assert len(m4.edge_blocks) == 4 and len(m4.cloud_blocks) == 0


def test_build_determinism():
    a = build_split_model("desk4", split_index=2, seed=7)
    b = build_split_model("desk4", split_index=2, seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_split_model("desk4", split_index=2, seed=8)
    assert any(not torch.equal(pa, pc)
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_build_errors():
    with pytest.raises(ConfigurationError):
        build_split_model("no-such-arch", split_index=1)
    with pytest.raises(ValidationError):
        build_split_model("desk4", split_index=5)
    with pytest.raises(ValidationError):
        build_split_model("desk4", split_index=0)


def test_ones_mask_equals_unmasked_exactly():
    m = build_split_model("desk4", split_index=4, seed=0).eval()
    x = rand_batch()
    masks = SoftMaskSet.initialize(m, "channel", seed=0)
    ones = masks.view_at(torch.ones(len(masks), dtype=torch.float64))
    with torch.no_grad():
        assert torch.equal(m.forward_full(x, masks=ones), m.forward_full(x))
    bmasks = SoftMaskSet.initialize(m, "block", seed=0)
    bones = bmasks.view_at(torch.ones(len(bmasks), dtype=torch.float64))
    with torch.no_grad():
        assert torch.equal(m.forward_full(x, masks=bones), m.forward_full(x))


def test_zero_channel_mask_kills_contribution():
    # zeroing a channel's mask must equal zeroing its conv2 input slice
    m = build_split_model("desk4", split_index=4, seed=1).eval()
    masks = SoftMaskSet.initialize(m, "channel", seed=0)
    values = torch.ones(len(masks), dtype=torch.float64)
    killed = 5  # channel 5 of edge block 0
    values[killed] = 0.0
    x = rand_batch(seed=2)

    surgical = copy.deepcopy(m)
    with torch.no_grad():
        surgical.edge_blocks[0].conv2.weight[:, killed] = 0.0
    with torch.no_grad():
        out_masked = m.forward_full(x, masks=masks.view_at(values))
        out_surgical = surgical.forward_full(x)
    assert torch.allclose(out_masked, out_surgical, atol=1e-6)


def manual_masked_forward(model, masks, x):
    """Independent reimplementation of the masked forward with functional ops."""
    h = x
    stem_conv, stem_bn = model.stem[0], model.stem[1]
    h = F.relu(F.batch_norm(F.conv2d(h, stem_conv.weight, padding=1),
                            stem_bn.running_mean, stem_bn.running_var,
                            stem_bn.weight, stem_bn.bias, False, 0.0, stem_bn.eps))
    for i, block in enumerate(model.edge_blocks):
        mask = masks.values_for_block(i)
        hidden = F.conv2d(h, block.conv1.weight, stride=block.stride, padding=1)
        hidden = F.batch_norm(hidden, block.bn1.running_mean, block.bn1.running_var,
                              block.bn1.weight, block.bn1.bias, False, 0.0, block.bn1.eps)
        if mask is not None and masks.granularity == "channel":
            hidden = hidden * mask.view(1, -1, 1, 1).float()
        hidden = F.relu(hidden)
        branch = F.conv2d(hidden, block.conv2.weight, padding=1)
        branch = F.batch_norm(branch, block.bn2.running_mean, block.bn2.running_var,
                              block.bn2.weight, block.bn2.bias, False, 0.0, block.bn2.eps)
        if mask is not None and masks.granularity == "block":
            branch = branch * float(mask[0])
        if isinstance(block.shortcut, nn.Identity):
            identity = h
        else:
            sc_conv, sc_bn = block.shortcut[0], block.shortcut[1]
            identity = F.batch_norm(
                F.conv2d(h, sc_conv.weight, stride=block.stride),
                sc_bn.running_mean, sc_bn.running_var, sc_bn.weight, sc_bn.bias,
                False, 0.0, sc_bn.eps)
        h = F.relu(identity + branch)
    return h


@pytest.mark.parametrize("granularity", ["channel", "block"])
def test_masked_forward_matches_manual_oracle(granularity):
    arch = ArchSpec(name="desk2", num_blocks=2, base_channels=8,
                    widths=(8, 8), strides=(1, 1))
    m = build_split_model(arch, split_index=2, seed=3).eval()
    masks = SoftMaskSet.initialize(m, granularity, seed=4)
    x = rand_batch(n=4, seed=5)
    with torch.no_grad():
        got = m.forward_edge(x, masks=masks)
        want = manual_masked_forward(m, masks, x)
    assert torch.allclose(got, want, atol=1e-6)


def test_forward_edge_prefix_and_trunk():
    m = build_split_model("desk4", split_index=4, seed=0).eval()
    x = rand_batch(seed=1)
    with torch.no_grad():
        assert torch.equal(m.forward_edge(x), m.trunk_forward(x))


def test_identity_edge_partition():
    model = SplitModel(nn.Identity(), [PlainBlock(nn.Identity())], nn.Identity(),
                       split_index=1, task_mode="classification")
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(model.forward_edge(x), x)


def test_compositionality():
    m = build_split_model("desk4", split_index=2, seed=0).eval()
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for _ in range(10):
            x = torch.rand(10, 3, 32, 32, generator=g)
            full = m.forward_full(x)
            composed = m.forward_cloud(m.forward_edge(x))
            rel = (full - composed).norm() / full.norm().clamp(min=1e-12)
            assert float(rel) < 1e-6


def test_block_activations_prefix_property():
    m = build_split_model("desk4", split_index=3, seed=0).eval()
    x = rand_batch(seed=6)
    with torch.no_grad():
        acts = m.block_activations(x)
        assert len(acts) == 3
        for i in range(3):
            truncated = resplit(m, i + 1).eval()
            assert torch.allclose(acts[i], truncated.forward_edge(x), atol=1e-6)
        assert torch.equal(acts[-1], m.forward_edge(x))


def test_activation_determinism():
    x = rand_batch(seed=9)
    outs = []
    for _ in range(2):
        m = build_split_model("desk4", split_index=2, seed=42).eval()
        with torch.no_grad():
            outs.append(m.forward_edge(x))
    assert torch.equal(outs[0], outs[1])


def test_shape_validation():
    m = build_split_model("desk4", split_index=2, seed=0)
    with pytest.raises(ValidationError):
        m.forward_full(torch.rand(2, 1, 32, 32))
    with pytest.raises(ValidationError):
        m.forward_full(torch.rand(2, 3, 32))


def test_embedding_head_shape():
    m = build_split_model("desk4", split_index=2, task_mode="embedding", seed=0).eval()
    with torch.no_grad():
        emb = m.forward_full(rand_batch(n=4))
    assert emb.shape == (4, m.arch.embed_dim)
    assert torch.isfinite(emb).all()


def test_checkpoint_roundtrip(tmp_path):
    m = build_split_model("desk4", split_index=2, seed=0).eval()
    masks = SoftMaskSet.initialize(m, "channel", seed=1)
    path = tmp_path / "model.pt"
    save_checkpoint(path, m, masks=masks)
    loaded, mask_state, _ = load_checkpoint(path)
    loaded.eval()
    x = rand_batch(seed=3)
    with torch.no_grad():
        assert torch.equal(m.forward_full(x), loaded.forward_full(x))
    restored = SoftMaskSet.from_state_dict(mask_state)
    assert torch.equal(restored.values, masks.values)
    assert restored.granularity == masks.granularity
