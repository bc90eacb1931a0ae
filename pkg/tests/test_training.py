import numpy as np
import pytest

from idguide.data import DataConfig, generate_clips
from idguide.errors import (BadMagicError, CorruptManifestError, ManifestMismatchError,
                            TruncatedError, UnsupportedVersionError)
from idguide.models import (DenoiserModel, ModelConfig, decode, encode, identity_embed,
                            named_parameters)
from idguide.numerics import Adam, SeededRng
from idguide.training import (ModelBundle, TrainConfig, checkpoint_bytes, checkpoint_from_bytes,
                              evaluate_epoch, forward_diffuse, identity_gap, latent_mask,
                              load_bundle, load_checkpoint, masked_reconstruction_loss,
                              prepare_examples, pretrain_decoder, pretrain_identity_embedder,
                              reconstruction_psnr, save_bundle, save_checkpoint, train_denoiser,
                              train_epoch, _embedder_loss)

SMALL_MODEL = ModelConfig(model_dim=8, heads=2, adapter_blocks=1, face_encoder_blocks=1, face_tokens=2)
QUICK = TrainConfig(ae_steps=30, emb_steps=20, epochs=2)


@pytest.fixture(scope="module")
def small_setup():
    clips, splits = generate_clips(DataConfig(identities=2, clips_per_identity=2,
                                              heldout_per_identity=1, frames=4), 0)
    train = [c for c, s in zip(clips, splits) if s == "train"]
    dec, enc = pretrain_decoder(train, QUICK, SeededRng(1), hidden=16)
    emb = pretrain_identity_embedder(train, QUICK, SeededRng(2))
    return train, dec, enc, emb, prepare_examples(train, enc, emb)


def test_forward_diffuse_examples(gen):
    x0 = gen.standard_normal(4)
    np.testing.assert_array_equal(forward_diffuse(x0, 0.0, gen.standard_normal(4)), x0)
    np.testing.assert_array_equal(forward_diffuse(x0, 3.0, np.zeros(4)), x0)
    np.testing.assert_array_equal(forward_diffuse([1, 1], 2.0, [0.5, -0.5]), [2.0, 0.0])
    a, b = gen.standard_normal(3), gen.standard_normal(3)
    np.testing.assert_allclose(forward_diffuse(a + b, 1.3, np.zeros(3)),
                               forward_diffuse(a, 1.3, np.zeros(3)) + b)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(2), 1.0, np.zeros(3))
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(2), -1.0, np.zeros(2))


def test_masked_loss_examples(gen):
    z = gen.standard_normal((2, 3))
    assert masked_reconstruction_loss(z, z, np.ones(2)).item() == 0.0
    e = gen.standard_normal((2, 3))
    plain = np.mean((z - e) ** 2)
    assert masked_reconstruction_loss(z, e, np.zeros((2, 3))).item() == pytest.approx(plain)
    assert masked_reconstruction_loss([1.0, 1.0], [0.0, 0.0], [0.0, 1.0]).item() == pytest.approx(2.5)
    with pytest.raises(ValueError):
        masked_reconstruction_loss(np.zeros(3), np.zeros(4), np.zeros(3))


def test_masked_loss_at_least_plain_mse(gen):
    for _ in range(20):
        z, e = gen.standard_normal((2, 4, 4, 3)), gen.standard_normal((2, 4, 4, 3))
        m = (gen.uniform(size=(2, 4, 4)) < 0.3).astype(float)
        m[0, 0, 0] = 1.0
        assert masked_reconstruction_loss(z, e, m).item() >= np.mean((z - e) ** 2)
    e = z.copy()
    e[m == 0] += 1.0  # residual only off the mask
    assert masked_reconstruction_loss(z, e, m).item() == pytest.approx(np.mean((z - e) ** 2))


def test_masked_gradient_ratio():
    from idguide.checks import masked_gradient_ratio
    assert masked_gradient_ratio() == pytest.approx(4.0, abs=1e-9)


def test_latent_mask_nearest_and_binary():
    m = np.zeros((1, 16, 16), dtype=bool)
    m[0, 4:8, 8:12] = True
    lm = latent_mask(m, 4)
    assert lm.shape == (1, 4, 4)
    assert set(np.unique(lm)) <= {0.0, 1.0}
    assert lm[0, 1, 2] == 1.0 and lm.sum() == 1.0


def test_checkpoint_round_trip(tmp_path, gen):
    tensors = {"a": gen.standard_normal((2, 3)).astype(np.float32).astype(float), "b": np.arange(4.0)}
    save_checkpoint(tmp_path / "x.sanm", tensors, {"seed": 3})
    back, meta = load_checkpoint(tmp_path / "x.sanm")
    assert meta == {"seed": 3}
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    assert checkpoint_bytes(back, meta) == (tmp_path / "x.sanm").read_bytes()


def test_checkpoint_errors(gen):
    buf = checkpoint_bytes({"a": np.ones((2, 2))}, {})
    with pytest.raises(TruncatedError, match="truncated payload"):
        checkpoint_from_bytes(buf[:-4])
    with pytest.raises(ManifestMismatchError, match="manifest mismatch"):
        checkpoint_from_bytes(buf + b"\0\0\0\0")
    mismatched = buf.replace(b'"payload_bytes":16', b'"payload_bytes":20')
    with pytest.raises(ManifestMismatchError):
        checkpoint_from_bytes(mismatched + b"\0" * 4)
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        checkpoint_from_bytes(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    n = int.from_bytes(buf[8:12], "little")
    with pytest.raises(CorruptManifestError, match="corrupt manifest"):
        checkpoint_from_bytes(buf[:12] + b"{" * n + buf[12 + n:])
    with pytest.raises(TruncatedError):
        checkpoint_from_bytes(buf[:6])


def test_bundle_round_trip(tmp_path, small_setup):
    _, dec, enc, emb, _ = small_setup
    model = DenoiserModel.init(SMALL_MODEL, SeededRng(0))
    bundle = ModelBundle(dec, enc, emb, model, {"note": "x"})
    save_bundle(tmp_path / "b.sanm", bundle)
    back = load_bundle(tmp_path / "b.sanm")
    assert back.metadata == {"note": "x"}
    assert back.denoiser.config == SMALL_MODEL
    assert back.encoder.scale == pytest.approx(enc.scale, rel=1e-15)
    for k, v in bundle.tensors().items():
        np.testing.assert_array_equal(back.tensors()[k], v.astype(np.float32))
    save_bundle(tmp_path / "c.sanm", back)
    assert (tmp_path / "b.sanm").read_bytes() == (tmp_path / "c.sanm").read_bytes()


def test_zero_steps_fails_psnr_gate(small_setup):
    train = small_setup[0]
    dec, enc = pretrain_decoder(train, TrainConfig(ae_steps=0), SeededRng(1))
    assert reconstruction_psnr(enc, dec, train) < 25.0


def test_zero_frame_round_trip_is_finite(small_setup):
    _, dec, enc, _, _ = small_setup
    out = decode(dec, encode(enc, np.zeros((16, 16, 3)))).data
    assert np.all(np.isfinite(out))


def test_embedder_requires_two_identities(small_setup):
    train = small_setup[0]
    one = [c for c in train if c.identity_id == 0]
    with pytest.raises(ValueError):
        pretrain_identity_embedder(one, QUICK, SeededRng(0))


def test_embedder_deterministic(small_setup):
    train = small_setup[0]
    a = pretrain_identity_embedder(train, QUICK, SeededRng(2))
    b = pretrain_identity_embedder(train, QUICK, SeededRng(2))
    for k, v in named_parameters(a).items():
        assert v.data.tobytes() == named_parameters(b)[k].data.tobytes()


def test_vacuous_margin_leaves_same_pair_term(small_setup, gen):
    _, _, _, emb, _ = small_setup
    frames = gen.uniform(0, 1, (6, 16, 16, 3))
    ids = np.array([0, 0, 1, 1, 2, 2])
    e = identity_embed(emb, frames).data
    cos = e @ e.T
    same = (ids[:, None] == ids[None]) & ~np.eye(6, dtype=bool)
    want = np.mean(1 - cos[same])
    assert _embedder_loss(emb, frames, ids, 1.0).item() == pytest.approx(want, abs=1e-12)


def test_zero_learning_rate_keeps_weights(small_setup):
    examples = small_setup[4]
    model = DenoiserModel.init(SMALL_MODEL, SeededRng(0))
    cfg = TrainConfig(lr=0.0)
    new, stats = train_epoch(model, examples, Adam(0.0), cfg, SeededRng(5))
    for k, v in named_parameters(model).items():
        np.testing.assert_array_equal(named_parameters(new)[k].data, v.data)
    assert stats.mean_loss == pytest.approx(evaluate_epoch(model, examples, cfg, SeededRng(5)), rel=1e-12)
    assert stats.steps == len(examples)


def test_empty_dataset_rejected():
    model = DenoiserModel.init(SMALL_MODEL, SeededRng(0))
    with pytest.raises(ValueError):
        train_epoch(model, [], Adam(0.1), TrainConfig(), SeededRng(0))


def test_single_example_overfits(small_setup):
    example = small_setup[4][:1]
    cfg = TrainConfig(epochs=200, lr=3e-3, sigma_min=0.5, sigma_max=0.5)
    _, hist = train_denoiser(example, SMALL_MODEL, cfg)
    assert hist[-1].mean_loss < hist[0].mean_loss


def test_training_deterministic(small_setup):
    examples = small_setup[4]
    cfg = TrainConfig(epochs=2)
    a, ha = train_denoiser(examples, SMALL_MODEL, cfg)
    b, hb = train_denoiser(examples, SMALL_MODEL, cfg)
    assert [h.mean_loss for h in ha] == [h.mean_loss for h in hb]
    for k, v in named_parameters(a).items():
        assert v.data.tobytes() == named_parameters(b)[k].data.tobytes()


@pytest.mark.slow
def test_pretraining_gates(toy_run):
    from idguide.data import load_dataset
    bundle = load_bundle(toy_run["model"])
    held = load_dataset(toy_run["data"], "heldout")
    assert reconstruction_psnr(bundle.encoder, bundle.decoder, held) >= 25.0
    same, diff = identity_gap(bundle.embedder, held)
    assert same >= 0.9 and diff <= 0.5


@pytest.mark.slow
def test_two_identity_embedder_gap():
    clips, splits = generate_clips(DataConfig(identities=2, clips_per_identity=6), 4)
    train = [c for c, s in zip(clips, splits) if s == "train"]
    held = [c for c, s in zip(clips, splits) if s != "train"]
    emb = pretrain_identity_embedder(train, TrainConfig(), SeededRng(0))
    same, diff = identity_gap(emb, held)
    assert same - diff >= 0.4


@pytest.mark.slow
def test_full_training_halves_loss(toy_run):
    rows = (toy_run["train"] / "history.tsv").read_text().splitlines()[1:]
    losses = [float(r.split("\t")[1]) for r in rows]
    assert len(losses) == 20
    assert losses[-1] <= 0.5 * losses[0]
