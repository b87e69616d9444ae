import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients, zero_all_parameters
from stakit.encoders import (
    MultiScaleTokens,
    TokenGrid,
    ToyImageEncoder,
    ToyMultiScaleImageEncoder,
    ToyVideoEncoder,
    VideoTokens,
    patchify,
)
from stakit.errors import ShapeMismatch
from stakit.tensorio import load_module, save_module


def test_token_count_forced_by_patch_size():
    encoder = ToyImageEncoder(patch=8, dim=16)
    grid = encoder(torch.rand(32, 32, 3))
    assert grid.tokens.shape == (16, 16)
    assert grid.h_tok == grid.w_tok == 4
    assert grid.class_token.shape == (16,)


def test_indivisible_image_rejected():
    encoder = ToyImageEncoder(patch=8, dim=16)
    with pytest.raises(ShapeMismatch):
        encoder(torch.rand(30, 32, 3))


def test_zero_image_zero_parameters_gives_zero_tokens():
    encoder = zero_all_parameters(ToyImageEncoder(patch=8, dim=16))
    grid = encoder(torch.zeros(32, 32, 3))
    assert torch.equal(grid.tokens, torch.zeros(16, 16))
    assert torch.equal(grid.class_token, torch.zeros(16))


def test_patchify_layout_row_major():
    image = torch.arange(16, dtype=torch.float32).reshape(4, 4, 1)
    patches = patchify(image, 2)
    assert patches.shape == (4, 4)
    assert patches[0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert patches[3].tolist() == [10.0, 11.0, 14.0, 15.0]


def test_image_encoder_gradients_match_finite_differences():
    torch.manual_seed(0)
    encoder = ToyImageEncoder(patch=4, dim=4, n_heads=2).double()
    image = torch.rand(8, 8, 3, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(4 + 1, 4, dtype=torch.float64)

    def loss_fn():
        grid = encoder(image)
        combined = torch.cat([grid.tokens, grid.class_token.unsqueeze(0)])
        return (combined * probe).sum()

    params = [image] + list(encoder.parameters())
    check_gradients(loss_fn, params, rtol=1e-4, max_coords=10)


def test_multiscale_shapes_halve():
    encoder = ToyMultiScaleImageEncoder(patch=4, dim=8, n_scales=3)
    scales = encoder(torch.rand(64, 64, 3))
    assert [(g.h_tok, g.w_tok) for g in scales] == [(16, 16), (8, 8), (4, 4)]
    assert [g.scale_id for g in scales] == [0, 1, 2]


def test_multiscale_deterministic_given_seed():
    def build():
        torch.manual_seed(7)
        return ToyMultiScaleImageEncoder(patch=4, dim=8, n_scales=2)

    image = torch.rand(32, 32, 3)
    means_a = [g.tokens.mean().item() for g in build()(image)]
    means_b = [g.tokens.mean().item() for g in build()(image)]
    assert means_a == means_b


def test_video_single_frame_matches_image_encoder():
    video_encoder = ToyVideoEncoder(patch=8, dim=16)
    clip = torch.rand(1, 32, 32, 3)
    video = video_encoder(clip)
    image_grid = video_encoder.frame_encoder(clip[0])
    assert torch.equal(video.tokens[0], image_grid.tokens)


def test_video_token_shapes():
    video = ToyVideoEncoder(patch=8, dim=16)(torch.rand(4, 32, 32, 3))
    assert video.tokens.shape == (4, 16, 16)
    assert video.t == 4
    assert video.class_token.shape == (16,)
    assert len(video.frame_times) == 4


def test_video_frame_permutation_equivariance():
    encoder = ToyVideoEncoder(patch=8, dim=16)
    clip = torch.rand(4, 32, 32, 3)
    perm = [2, 0, 3, 1]
    base = encoder(clip)
    shuffled = encoder(clip[perm])
    assert torch.equal(shuffled.tokens, base.tokens[perm])
    # clip class token is a mean over frames: permutation invariant
    assert torch.allclose(shuffled.class_token, base.class_token, atol=1e-6)


def test_video_max_frames_cap():
    encoder = ToyVideoEncoder(patch=8, dim=16, max_frames=4)
    encoder(torch.rand(4, 32, 32, 3))
    with pytest.raises(ShapeMismatch):
        encoder(torch.rand(5, 32, 32, 3))


@settings(max_examples=15, deadline=None)
@given(
    h_patches=st.integers(min_value=1, max_value=6),
    w_patches=st.integers(min_value=1, max_value=6),
    patch=st.sampled_from([2, 4]),
    t=st.integers(min_value=1, max_value=4),
)
def test_shape_contracts_hold_for_random_sizes(h_patches, w_patches, patch, t):
    torch.manual_seed(0)
    encoder = ToyVideoEncoder(patch=patch, dim=8, n_heads=2)
    clip = torch.rand(t, h_patches * patch, w_patches * patch, 3)
    video = encoder(clip)
    assert video.tokens.shape == (t, h_patches * w_patches, 8)
    assert torch.isfinite(video.tokens).all()
    assert torch.isfinite(video.class_token).all()


def test_token_grid_invariants_enforced():
    with pytest.raises(ShapeMismatch):
        TokenGrid(tokens=torch.zeros(5, 8), class_token=torch.zeros(8), h_tok=2, w_tok=2)
    with pytest.raises(ShapeMismatch):
        TokenGrid(tokens=torch.zeros(4, 8), class_token=torch.zeros(4), h_tok=2, w_tok=2)
    with pytest.raises(ShapeMismatch):
        VideoTokens(
            tokens=torch.zeros(2, 4, 8),
            class_token=torch.zeros(8),
            frame_times=(0.0,),
            h_tok=2,
            w_tok=2,
        )
    with pytest.raises(ShapeMismatch):
        MultiScaleTokens(
            [
                TokenGrid(tokens=torch.zeros(16, 8), class_token=torch.zeros(8), h_tok=4, w_tok=4),
                TokenGrid(tokens=torch.zeros(9, 8), class_token=torch.zeros(8), h_tok=3, w_tok=3),
            ]
        )


def test_parameter_checkpoint_round_trip(tmp_path):
    encoder = ToyImageEncoder(patch=8, dim=16)
    path = tmp_path / "encoder.stk"
    save_module(path, encoder, meta={"patch": 8})
    clone = ToyImageEncoder(patch=8, dim=16)
    meta = load_module(path, clone)
    assert meta == {"patch": 8}
    image = torch.rand(32, 32, 3)
    assert torch.equal(encoder(image).tokens, clone(image).tokens)
