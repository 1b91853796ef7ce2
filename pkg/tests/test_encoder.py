import numpy as np
import pytest
import torch

from jointseize.encoder import (ReferenceEncoder, build_encoder, encode_joint_clip,
                                token_from_encoder_output)
from jointseize.exceptions import ConfigurationError, ShapeError
from oracles import finite_difference_check


@pytest.fixture(scope="module")
def encoder():
    return ReferenceEncoder(d=32, seed=0).eval()


def random_clip(seed, shape=(30, 120, 120, 3)):
    return np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)


def test_identical_clips_identical_tokens(encoder):
    clip = random_clip(0)
    np.testing.assert_array_equal(encode_joint_clip(encoder, clip), encode_joint_clip(encoder, clip.copy()))


def test_token_length(encoder):
    assert encode_joint_clip(encoder, random_clip(1)).shape == (32,)


def test_joint_identity_does_not_enter_encoder(encoder):
    clip = random_clip(2)
    clips = np.zeros((14, 30, 120, 120, 3), np.uint8)
    clips[3] = clip
    clips[9] = clip
    with torch.no_grad():
        tokens = encoder.encode_clips(clips)
    torch.testing.assert_close(tokens[3], tokens[9], rtol=0, atol=0)


def test_weight_sharing_changes_all_tokens(encoder):
    import copy

    enc = copy.deepcopy(encoder)
    clips = np.stack([random_clip(s) for s in range(3)])
    with torch.no_grad():
        before = enc.encode_clips(clips)
        enc.norm.bias.add_(1.0)
        after = enc.encode_clips(clips)
    torch.testing.assert_close(after - before, torch.ones_like(before))


def test_mean_reduction_of_equal_rows():
    v = torch.randn(8)
    out = v.expand(5, 8)
    torch.testing.assert_close(token_from_encoder_output(out, "mean"), v)


@pytest.mark.parametrize("reduction", ["mean", "cls"])
def test_single_position(reduction):
    v = torch.randn(1, 6)
    torch.testing.assert_close(token_from_encoder_output(v, reduction), v[0])


def test_mean_reduction_matches_loop():
    rng = np.random.default_rng(3)
    out = rng.normal(size=(4, 5))
    expected = [sum(out[p, c] for p in range(4)) / 4 for c in range(5)]
    got = token_from_encoder_output(torch.as_tensor(out), "mean").numpy()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_empty_output_is_shape_error():
    with pytest.raises(ShapeError):
        token_from_encoder_output(torch.zeros(0, 4))


def test_bad_input_shape(encoder):
    with pytest.raises(ShapeError):
        encoder(torch.zeros(1, 29, 3, 24, 24))
    with pytest.raises(ShapeError):
        encoder.preprocess(np.zeros((30, 120, 120, 3), np.uint8))


def test_seeded_construction_is_reproducible():
    a, b = ReferenceEncoder(seed=5), ReferenceEncoder(seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_frozen_flag():
    enc = ReferenceEncoder()
    enc.trainable = False
    assert not any(p.requires_grad for p in enc.parameters())
    enc.trainable = True
    assert all(p.requires_grad for p in enc.parameters())


def test_linear_slots_of_reference_blocks(encoder):
    kinds = [s.kind for s in encoder.linear_slots(-1)]
    assert kinds == ["query", "key", "value", "ff", "ff"]
    names = [s.name for s in encoder.linear_slots(0)]
    assert names == ["block0.attn.query", "block0.attn.key", "block0.attn.value", "block0.fc1", "block0.fc2"]


def test_unknown_backend():
    with pytest.raises(ConfigurationError):
        build_encoder("resnet")


def test_bad_tubelet():
    with pytest.raises(ConfigurationError):
        ReferenceEncoder(num_frames=30, tubelet=(4, 8, 8))


def test_reference_encoder_gradients_match_finite_differences():
    torch.manual_seed(0)
    enc = ReferenceEncoder(d=16, depth=2, heads=2, num_frames=4, input_size=16, tubelet=(2, 8, 8), seed=1).double()
    x = torch.randn(2, 4, 3, 16, 16, dtype=torch.float64)
    r = torch.randn(2, 16, dtype=torch.float64)
    params = list(enc.parameters())
    err = finite_difference_check(lambda: (enc(x) * r).sum(), params, n_entries=40)
    assert err < 1e-4


def test_vivit_adapter_slots():
    transformers = pytest.importorskip("transformers")
    from jointseize.encoder import VivitAdapter

    cfg = transformers.VivitConfig(image_size=32, num_frames=4, tubelet_size=[2, 16, 16], hidden_size=16,
                                   num_hidden_layers=2, num_attention_heads=2, intermediate_size=32)
    adapter = VivitAdapter(transformers.VivitModel(cfg, add_pooling_layer=False))
    kinds = [s.kind for s in adapter.linear_slots(-1)]
    assert kinds == ["query", "key", "value", "ff", "ff"]
    adapter.eval()
    tok = encode_joint_clip(adapter, random_clip(4, (6, 120, 120, 3)))
    assert tok.shape == (16,)
