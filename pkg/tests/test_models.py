import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idguide.models import (AttentionBlock, Conditioning, DenoiserModel, FaceEncoder, FeedForward,
                            IdAdapterBlock, IdentityEmbedder, ModelConfig, ToyDecoder, ToyEncoder,
                            cross_attention, decode, denoiser_forward, distribution_align, encode,
                            face_encoder_forward, feedforward, id_adapter_forward, identity_embed,
                            named_parameters, patchify, self_attention, unpatchify)
from idguide.numerics import SeededRng, Tape, Tensor, backprop
from idguide.numerics.gradcheck import check_gradients


def softmax(a):
    e = np.exp(a - a.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def attention_oracle(block, q_in, ctx):
    """Head-by-head loop with plain numpy."""
    d, h = block.model_dim, block.head_count
    dh = d // h
    q, k, v = q_in @ block.wq.data, ctx @ block.wk.data, ctx @ block.wv.data
    heads = []
    for j in range(h):
        sl = slice(j * dh, (j + 1) * dh)
        w = softmax(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
        heads.append(w @ v[:, sl])
    return q_in + np.concatenate(heads, -1) @ block.wo.data


def zero_block(dim, heads):
    z = Tensor(np.zeros((dim, dim)))
    return AttentionBlock(heads, z, z, z, z)


def test_attention_matches_oracle(gen):
    block = AttentionBlock.init(SeededRng(0), 4, 2)
    z, emb = gen.standard_normal((3, 4)), gen.standard_normal((4, 4))
    np.testing.assert_allclose(self_attention(block, z).data, attention_oracle(block, z, z), atol=1e-12)
    np.testing.assert_allclose(cross_attention(block, z, emb).data, attention_oracle(block, z, emb),
                               atol=1e-12)


def test_hand_set_three_token_attention():
    eye = Tensor(np.eye(2))
    block = AttentionBlock(1, eye, eye, eye, eye)
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    # row 0 logits: z0 . z_j / sqrt(2) = [1, 0, 1] / sqrt(2)
    w0 = np.exp(np.array([1.0, 0.0, 1.0]) / np.sqrt(2))
    w0 /= w0.sum()
    np.testing.assert_allclose(self_attention(block, z).data[0], z[0] + w0 @ z, atol=1e-12)


def test_single_token_attention_is_value_plus_residual(gen):
    block = AttentionBlock.init(SeededRng(1), 4, 2)
    z = gen.standard_normal((1, 4))
    want = z + z @ block.wv.data @ block.wo.data
    np.testing.assert_allclose(self_attention(block, z).data, want, atol=1e-12)


def test_identical_keys_give_uniform_mixing(gen):
    block = AttentionBlock.init(SeededRng(2), 4, 2)
    z = gen.standard_normal((2, 4))
    emb = np.tile(gen.standard_normal(4), (3, 1)) + 0.0
    emb[:, :] = emb[0]
    want = z + np.tile(emb[0] @ block.wv.data, (2, 1)) @ block.wo.data
    np.testing.assert_allclose(cross_attention(block, z, emb).data, want, atol=1e-12)


def test_zero_weights_are_pure_residual(gen):
    z = gen.standard_normal((5, 4))
    np.testing.assert_array_equal(self_attention(zero_block(4, 2), z).data, z)


def test_attention_dim_mismatch():
    block = AttentionBlock.init(SeededRng(0), 4, 2)
    with pytest.raises(ValueError):
        self_attention(block, np.zeros((3, 5)))
    with pytest.raises(ValueError):
        AttentionBlock.init(SeededRng(0), 5, 2)


def test_alignment_examples(gen):
    np.testing.assert_allclose(distribution_align([[1.0, 2.0, 3.0]], [[0.0, 10.0, 20.0]]).data,
                               [[0.0, 10.0, 20.0]], atol=1e-12)
    z = gen.standard_normal((2, 3, 4))
    np.testing.assert_allclose(distribution_align(z, z).data, z, atol=1e-12)
    # face already has the target's statistics
    img = 3.0 * z[::-1] + 1.0
    face = (z - z.mean((-2, -1), keepdims=True)) / z.std((-2, -1), keepdims=True)
    face = face * img.std((-2, -1), keepdims=True) + img.mean((-2, -1), keepdims=True)
    np.testing.assert_allclose(distribution_align(face, img).data, face, atol=1e-12)
    with pytest.raises(ValueError):
        distribution_align(np.zeros((2, 3)), np.zeros((3, 2)))


def test_alignment_invariants_over_random_pairs():
    from idguide.checks import alignment_errors
    stats, resid = alignment_errors(count=200, seed=3)
    assert stats <= 1e-9 and resid <= 1e-9


def _adapter(rng, dim=4, heads=2, alignment="full"):
    return IdAdapterBlock.init(rng, dim, heads, alignment)


def test_adapter_zero_weights_double_the_input(gen):
    ff = FeedForward.init(SeededRng(0), 4, 8)
    block = IdAdapterBlock(zero_block(4, 2), zero_block(4, 2), zero_block(4, 2), ff)
    z = gen.standard_normal((2, 3, 4))
    out = id_adapter_forward(block, z, gen.standard_normal((5, 4)), gen.standard_normal((2, 4)))
    np.testing.assert_allclose(out.data, 2.0 * z, atol=1e-12)


def test_adapter_symmetric_branches(gen):
    b = _adapter(SeededRng(4))
    b.cross_attn_face = b.cross_attn_img
    z, emb = gen.standard_normal((2, 3, 4)), gen.standard_normal((5, 4))
    branch = cross_attention(b.cross_attn_img, self_attention(b.self_attn, z), emb).data
    np.testing.assert_allclose(id_adapter_forward(b, z, emb, emb).data, 2.0 * branch, atol=1e-12)


def test_adapter_against_composition_oracle(gen):
    b = _adapter(SeededRng(5))
    z, e_img, e_face = gen.standard_normal((3, 4)), gen.standard_normal((5, 4)), gen.standard_normal((2, 4))
    zs = attention_oracle(b.self_attn, z, z)
    zi = attention_oracle(b.cross_attn_img, zs, e_img)
    zf = attention_oracle(b.cross_attn_face, zs, e_face)
    aligned = (zf - zf.mean()) / zf.std() * zi.std() + zi.mean()
    np.testing.assert_allclose(id_adapter_forward(b, z, e_img, e_face).data, aligned + zi, atol=1e-10)


def test_adapter_variants(gen):
    z, e_img, e_face = gen.standard_normal((3, 4)), gen.standard_normal((5, 4)), gen.standard_normal((2, 4))
    add = _adapter(SeededRng(6), alignment="addition")
    zs = attention_oracle(add.self_attn, z, z)
    zi = attention_oracle(add.cross_attn_img, zs, e_img)
    zf = attention_oracle(add.cross_attn_face, zs, e_face)
    np.testing.assert_allclose(id_adapter_forward(add, z, e_img, e_face).data, zf + zi, atol=1e-10)
    norm = _adapter(SeededRng(6), alignment="norm")
    np.testing.assert_allclose(id_adapter_forward(norm, z, e_img, e_face).data,
                               (zf - zf.mean()) / zf.std() + zi, atol=1e-10)
    with pytest.raises(ValueError):
        _adapter(SeededRng(0), alignment="bogus")


def test_face_encoder_identity_cases(gen):
    e_face, e_img = gen.standard_normal((4, 4)), gen.standard_normal((6, 4))
    np.testing.assert_array_equal(face_encoder_forward(FaceEncoder([], []), e_face, e_img).data, e_face)
    zff = FeedForward(*(Tensor(np.zeros(s)) for s in ((4, 8), (8,), (8, 4), (4,))))
    enc = FaceEncoder([zero_block(4, 2)] * 2, [zff] * 2)
    np.testing.assert_allclose(face_encoder_forward(enc, e_face, e_img).data, e_face, atol=1e-12)


def test_face_encoder_two_blocks_against_oracle(gen):
    enc = FaceEncoder.init(SeededRng(7), 4, 2, 2)
    e_face, e_img = gen.standard_normal((4, 4)), gen.standard_normal((6, 4))
    e = e_face
    for attn, ff in zip(enc.blocks, enc.ffs):
        e = attention_oracle(attn, e, e_img)
        e = e + np.tanh(e @ ff.w1.data + ff.b1.data) @ ff.w2.data + ff.b2.data
    np.testing.assert_allclose(face_encoder_forward(enc, e_face, e_img).data, e, atol=1e-10)
    assert enc.block_count == 2


SMALL = ModelConfig(latent_hw=2, latent_channels=3, model_dim=8, heads=2, adapter_blocks=1,
                    face_encoder_blocks=1, face_tokens=2, d_id=4)


def _cond(gen, cfg, frames):
    return Conditioning(gen.standard_normal((cfg.latent_hw, cfg.latent_hw, cfg.latent_channels)),
                        gen.standard_normal(cfg.d_id), gen.uniform(0, 1, (frames, 2)))


def test_denoiser_shape_and_determinism(gen):
    cfg = ModelConfig()
    cond = _cond(gen, cfg, 3)
    x = gen.standard_normal((3, 4, 4, 8))
    a = DenoiserModel.init(cfg, SeededRng(0))(x, 1.5, cond)
    b = DenoiserModel.init(cfg, SeededRng(0))(x, 1.5, cond)
    assert a.shape == x.shape
    assert a.tobytes() == b.tobytes()


def test_denoiser_regression_snapshot():
    cfg = ModelConfig()
    g = np.random.default_rng(0)
    cond = _cond(g, cfg, 2)
    out = DenoiserModel.init(cfg, SeededRng(0))(g.standard_normal((2, 4, 4, 8)), 0.7, cond)
    np.testing.assert_allclose(out[0, 0, 0, :3], SNAPSHOT, rtol=1e-10)


def test_frame_equivariance_without_temporal(gen):
    cfg = ModelConfig(use_temporal=False)
    model = DenoiserModel.init(cfg, SeededRng(1))
    cond = _cond(gen, cfg, 4)
    x = gen.standard_normal((4, 4, 4, 8))
    perm = np.array([2, 0, 3, 1])
    out = model(x, 2.0, cond)
    out_p = model(x[perm], 2.0, Conditioning(cond.ref_latent, cond.face_embedding, cond.pose[perm]))
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_temporal_layer_mixes_frames(gen):
    model = DenoiserModel.init(ModelConfig(), SeededRng(1))
    cond = _cond(gen, ModelConfig(), 3)
    x = gen.standard_normal((3, 4, 4, 8))
    out = model(x, 2.0, cond)
    x2 = x.copy()
    x2[2] += 1.0
    assert not np.allclose(model(x2, 2.0, cond)[0], out[0])


def test_denoiser_gradient_wrt_latent(gen):
    model = DenoiserModel.init(SMALL, SeededRng(2))
    cond = _cond(gen, SMALL, 2)
    w = Tensor(gen.standard_normal((2, 2, 2, 3)))

    def fn(x):
        return (denoiser_forward(model, x, 0.8, cond) * w).sum()

    assert check_gradients(fn, gen.standard_normal((2, 2, 2, 3))) < 1e-4


def test_denoiser_gradient_wrt_weights(gen):
    model = DenoiserModel.init(SMALL, SeededRng(3))
    cond = _cond(gen, SMALL, 2)
    x = gen.standard_normal((2, 2, 2, 3))
    tape = Tape()
    from idguide.models import bind
    bound = bind(model, tape)
    g = backprop(tape, (denoiser_forward(bound, x, 0.8, cond) ** 2).sum())
    params = named_parameters(bound)
    assert set(g) == set(params.values())
    assert all(np.all(np.isfinite(v)) for v in g.values())


def test_denoiser_rejects_bad_shapes(gen):
    model = DenoiserModel.init(SMALL, SeededRng(0))
    cond = _cond(gen, SMALL, 2)
    with pytest.raises(ValueError):
        model(np.zeros((2, 3, 3, 3)), 1.0, cond)
    with pytest.raises(ValueError):
        model(np.zeros((3, 2, 2, 3)), 1.0, cond)
    with pytest.raises(ValueError):
        model(np.zeros((2, 2, 2, 3)), -1.0, cond)


@settings(max_examples=20, deadline=None)
@given(dim=st.sampled_from([4, 6, 8]), heads=st.sampled_from([1, 2]), n=st.integers(1, 5),
       m=st.integers(1, 5), seed=st.integers(0, 1000))
def test_blocks_preserve_shape(dim, heads, n, m, seed):
    g = np.random.default_rng(seed)
    rng = SeededRng(seed)
    z, emb = g.standard_normal((2, n, dim)), g.standard_normal((m, dim))
    block = _adapter(rng, dim, heads)
    assert id_adapter_forward(block, z, emb, g.standard_normal((2, 1, dim))[0]).shape == z.shape
    assert feedforward(block.ff, z).shape == z.shape
    assert cross_attention(block.cross_attn_img, z, emb).shape == z.shape


def test_embedding_is_unit_norm_and_consistent(gen):
    emb = IdentityEmbedder.init(SeededRng(0))
    frames = gen.uniform(0, 1, (5, 16, 16, 3))
    e = identity_embed(emb, frames).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-6)
    same = identity_embed(emb, frames[[0, 0]]).data
    assert float(same[0] @ same[1]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        identity_embed(emb, np.zeros((16, 16)))


def test_patchify_round_trip(gen):
    frames = gen.uniform(0, 1, (2, 16, 16, 3))
    cells = patchify(frames, 4)
    assert cells.shape == (2, 4, 4, 48)
    np.testing.assert_array_equal(unpatchify(cells, 4).data, frames)
    np.testing.assert_array_equal(cells.data[0, 1, 2], frames[0, 4:8, 8:12].reshape(-1))


def test_decoder_encoder_shapes_and_zero_frame():
    dec, enc = ToyDecoder.init(SeededRng(0)), ToyEncoder.init(SeededRng(1))
    lat = encode(enc, np.zeros((16, 16, 3))).data
    assert lat.shape == (4, 4, 8)
    out = decode(dec, lat).data
    assert out.shape == (16, 16, 3) and np.all(np.isfinite(out))
    assert np.all((out > 0) & (out < 1))


SNAPSHOT = np.array([0.6670768849390006, -4.156539702781846, -1.947467475408808])
