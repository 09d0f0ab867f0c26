import numpy as np
import pytest

from tactile_vla import autodiff as ad
from tactile_vla.autodiff import Parameter, Tensor
from tactile_vla.encoders import (
    DualStreamBackbone, TactileEmbedding, TactileEncoder, ViT, ViTConfig, area_resize, fuse_streams, patchify,
    tactile_preprocess, unpatchify,
)
from tactile_vla.errors import ConfigError
from tactile_vla.fusion import (
    ConcatProjector, DepthVariant, FiLMGenerator, FiLMParams, film_apply, select_film_blocks,
)

SMALL = ViTConfig(image_size=16, patch_size=8, channels=3, embed_dim=8, blocks=3, heads=2, mlp_ratio=2.0)


def test_patchify_single_patch_is_raster_order():
    img = np.arange(64, dtype=float).reshape(8, 8, 1)
    out = patchify(img, 8)
    assert out.shape == (1, 64)
    np.testing.assert_array_equal(out[0], np.arange(64))


def test_patchify_token_order():
    img = np.zeros((16, 16, 1))
    img[:8, :8], img[:8, 8:], img[8:, :8], img[8:, 8:] = 1, 2, 3, 4
    out = patchify(img, 8)
    np.testing.assert_array_equal(out[:, 0], [1, 2, 3, 4])
    assert np.all(out == out[:, :1])


def test_patchify_constant_and_roundtrip():
    assert np.all(patchify(np.full((16, 16, 3), 0.7), 8) == 0.7)
    img = np.random.default_rng(0).random((2, 16, 24, 3))
    np.testing.assert_array_equal(unpatchify(patchify(img, 8), 8, 16, 24, 3), img)


def test_patchify_rejects_bad_size():
    with pytest.raises(ConfigError):
        patchify(np.zeros((10, 16, 1)), 8)


def test_vit_config_validation():
    with pytest.raises(ConfigError):
        ViTConfig(image_size=50)
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=30, heads=4)


def test_zero_film_is_bit_identical():
    vit = ViT(SMALL, np.random.default_rng(0))
    img = np.random.default_rng(1).random((2, 16, 16, 3))
    z = Tensor(np.zeros((2, 8)))
    film = {b: FiLMParams(z, z, b, "A") for b in range(3)}
    a, _ = vit(img)
    b, _ = vit(img, film)
    np.testing.assert_array_equal(a.data, b.data)


def test_film_changes_output_and_index_checked():
    vit = ViT(SMALL, np.random.default_rng(0))
    img = np.random.default_rng(1).random((1, 16, 16, 3))
    g = Tensor(np.full((1, 8), 0.5))
    a, _ = vit(img)
    b, _ = vit(img, {1: FiLMParams(g, g, 1, "A")})
    assert not np.allclose(a.data, b.data)
    with pytest.raises(ConfigError):
        vit(img, {3: FiLMParams(g, g, 3, "A")})


def test_vit_activations_per_block():
    vit = ViT(SMALL, np.random.default_rng(0))
    feats, acts = vit(np.zeros((16, 16, 3)))
    assert feats.shape == (4, 8) and len(acts) == 3


def test_fuse_streams():
    out = fuse_streams(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])))
    np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]])
    with pytest.raises(ad.ShapeError):
        fuse_streams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))


def test_dual_stream_streams_are_independent():
    bb = DualStreamBackbone(SMALL, np.random.default_rng(0))
    assert not np.array_equal(bb.stream_a.patch_embed.weight.data, bb.stream_b.patch_embed.weight.data)
    out = bb(np.random.default_rng(2).random((16, 16, 3)))
    assert out.shape == (4, 16)


def test_area_resize_preserves_mean_and_constants():
    img = np.random.default_rng(0).random((48, 48, 2))
    out = area_resize(img, 32)
    assert out.shape == (32, 32, 2)
    np.testing.assert_allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(area_resize(np.full((48, 48, 1), 0.3), 32), 0.3)


def test_tactile_preprocess_boundaries():
    rng = np.random.default_rng(0)
    frames = [rng.random((32, 32, 3)) for _ in range(8)]
    bg = np.zeros((32, 32, 3))
    out = tactile_preprocess(frames, 0, bg)
    np.testing.assert_array_equal(out[..., :3], out[..., 3:])
    out = tactile_preprocess(frames, 7, bg)
    np.testing.assert_allclose(out[..., :3], frames[2])
    np.testing.assert_array_equal(tactile_preprocess(frames, 3, frames[3])[..., 3:], 0.0)
    with pytest.raises(ValueError):
        tactile_preprocess([], 0, bg)


def test_tactile_embedding_pooling():
    emb = TactileEmbedding(Tensor(np.array([[1.0, 3.0], [3.0, 5.0]])))
    np.testing.assert_array_equal(emb.pooled.data, [2, 4])


def test_tactile_encoder_deterministic():
    enc = TactileEncoder(rng=np.random.default_rng(0))
    img = np.random.default_rng(1).random((32, 32, 6))
    a, b = enc(img), enc(img.copy())
    np.testing.assert_array_equal(a.pooled.data, b.pooled.data)
    assert a.patch_features.shape == (16, 32) and a.pooled.shape == (32,)


# -- fusion -----------------------------------------------------------------


def test_film_apply_examples():
    F = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = film_apply(F, Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0])))
    np.testing.assert_array_equal(out.data, [[2, 3], [6, 5]])
    z = Tensor(np.zeros(2))
    np.testing.assert_array_equal(film_apply(F, z, z).data, F.data)
    out = film_apply(F, Tensor(np.array([-1.0, -1.0])), Tensor(np.array([7.0, -2.0])))
    np.testing.assert_array_equal(out.data, [[7, -2], [7, -2]])


def test_film_apply_batched_oracle_and_grad():
    rng = np.random.default_rng(0)
    F, g, b = Parameter(rng.standard_normal((2, 5, 4))), Parameter(rng.standard_normal((2, 4))), Parameter(rng.standard_normal((2, 4)))
    ref = F.data * (1 + g.data[:, None]) + b.data[:, None]
    np.testing.assert_allclose(film_apply(F, g, b).data, ref, atol=1e-15)
    w = rng.standard_normal((2, 5, 4))
    assert ad.grad_check(lambda: ad.tsum(ad.mul(film_apply(F, g, b), w)), [F, g, b]) < 1e-6


def test_film_apply_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        film_apply(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)), Tensor(np.zeros(4)))


@pytest.mark.parametrize("variant,expected", [
    ("Early", [0, 1]), ("Middle", [2, 3]), ("Late", [4, 5]), ("All", [0, 1, 2, 3, 4, 5]),
])
def test_select_film_blocks_six(variant, expected):
    assert select_film_blocks(variant, 6) == expected


def test_select_film_blocks_seven_and_errors():
    assert select_film_blocks(DepthVariant.EARLY, 7) == [0, 1, 2]
    with pytest.raises(ConfigError):
        select_film_blocks("Late", 2)
    with pytest.raises(ValueError):
        DepthVariant.parse("Deep")


def test_select_film_blocks_exhaustive():
    for B in range(3, 40):
        n = -(-B // 3)
        early, mid, late = (select_film_blocks(v, B) for v in ("Early", "Middle", "Late"))
        assert early == list(range(n)) and late == list(range(B - n, B))
        assert mid[0] == (B - n) // 2 and len(mid) == n
        for sel in (early, mid, late):
            assert sel == list(range(sel[0], sel[0] + n)) and 0 <= sel[0] and sel[-1] < B


def test_film_generator_zero_init_and_lookup():
    gen = FiLMGenerator(4, 8, [0, 2], np.random.default_rng(0))
    assert len(gen) == 4
    p = gen.generate(Tensor(np.random.default_rng(1).standard_normal((3, 4))), 2, "B")
    assert p.gamma.shape == (3, 8) and np.all(p.gamma.data == 0) and np.all(p.beta.data == 0)
    with pytest.raises(KeyError):
        gen.generate(Tensor(np.zeros(4)), 1, "A")


def test_film_generator_nonzero_after_one_step():
    gen = FiLMGenerator(4, 8, [0], np.random.default_rng(0))
    z = Tensor(np.random.default_rng(1).standard_normal((2, 4)))
    target = np.random.default_rng(2).standard_normal((2, 8))
    p = gen.generate(z, 0, "A")
    loss = ad.tsum(ad.mul(p.gamma, target))
    loss.backward()
    ad.adam_step(gen.parameters(), ad.AdamState(lr=1e-2))
    assert np.abs(gen.generate(z, 0, "A").gamma.data).max() > 0


def test_concat_projector_shape_zero_and_grad():
    rng = np.random.default_rng(0)
    proj = ConcatProjector(32, 96, 96, rng)
    x = Tensor(rng.standard_normal((16, 32)))
    assert proj(x).shape == (16, 96)
    for p in proj.parameters():
        p.data[...] = 0.0
    assert np.all(proj(x).data == 0)
    small = ConcatProjector(3, 4, 2, rng)
    xp = Parameter(rng.standard_normal((5, 3)))
    assert ad.grad_check(lambda: ad.tsum(ad.mul(small(xp), np.arange(10.0).reshape(5, 2))), [xp] + small.parameters()) < 1e-6
