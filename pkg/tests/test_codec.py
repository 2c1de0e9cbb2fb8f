import numpy as np
import pytest

from instructlight import numcore as nc
from instructlight.codec import (
    ConvCodec,
    IdentityCodec,
    ImageEncoder,
    build_codec,
    load_image,
    save_image,
)

from gradcheck import check_gradients, random_loss_weights, scalarize


def _image(seed=0, size=64):
    return np.random.default_rng(seed).uniform(size=(3, size, size)).astype(np.float32)


# ---------------------------------------------------------------------------
# identity codec
# ---------------------------------------------------------------------------

def test_identity_codec_passthrough_bitwise():
    codec = IdentityCodec()
    x = _image()
    z = codec.encode(x)
    np.testing.assert_array_equal(z.data, x)
    back = codec.decode(z)
    assert back.data.tobytes() == x.tobytes()


def test_identity_decode_clamps_out_of_range():
    codec = IdentityCodec()
    z = np.array([[[-0.5, 0.5], [1.5, 1.0]]] * 3, dtype=np.float32)
    out = codec.decode(z).data
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# learned codec
# ---------------------------------------------------------------------------

def test_conv_codec_shape_contract():
    codec = ConvCodec(factor=4, latent_channels=4, rng=np.random.default_rng(0))
    z = codec.encode(_image())
    assert z.data.shape == (4, 16, 16)
    x = codec.decode(z)
    assert x.data.shape == (3, 64, 64)


def test_conv_codec_batch_shapes():
    codec = ConvCodec(factor=4, latent_channels=4, rng=np.random.default_rng(1))
    batch = np.stack([_image(i, 32) for i in range(2)])
    z = codec.encode(batch)
    assert z.data.shape == (2, 4, 8, 8)
    assert codec.decode(z).data.shape == (2, 3, 32, 32)


def test_conv_codec_decode_in_unit_range():
    codec = ConvCodec(factor=4, latent_channels=4, rng=np.random.default_rng(2))
    out = codec.decode(np.random.default_rng(3).normal(size=(4, 8, 8)).astype(np.float32)).data
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_conv_codec_latents_bounded():
    codec = ConvCodec(factor=4, latent_channels=4, rng=np.random.default_rng(4))
    z = codec.encode(_image(5)).data
    assert np.abs(z).max() <= 1.0


def test_conv_codec_rejects_indivisible_dims():
    codec = ConvCodec(factor=4, latent_channels=4, rng=np.random.default_rng(6))
    with pytest.raises(ValueError):
        codec.encode(np.zeros((3, 30, 30), dtype=np.float32))


def test_conv_codec_rejects_wrong_latent_channels():
    codec = ConvCodec(factor=4, latent_channels=4, rng=np.random.default_rng(7))
    with pytest.raises(ValueError):
        codec.decode(np.zeros((3, 8, 8), dtype=np.float32))


def test_build_codec_modes():
    assert isinstance(build_codec("identity"), IdentityCodec)
    assert isinstance(build_codec("learned", rng=np.random.default_rng(0)), ConvCodec)
    with pytest.raises(ValueError):
        build_codec("vae")


def test_conv_codec_gradients():
    rng = np.random.default_rng(8)
    codec = ConvCodec(factor=2, latent_channels=2, base=3, rng=rng, dtype=np.float64)
    x = nc.tensor(rng.uniform(0.2, 0.8, size=(1, 3, 4, 4)), dtype=np.float64, requires_grad=True)
    leaves = [x] + [p.tensor for p in codec.parameters()]

    def loss():
        rec = codec.decode(codec.encode(x))
        diff = nc.add(rec, nc.mul(x, -1.0))
        return nc.tmean(nc.mul(diff, diff))

    check_gradients(loss, leaves)


# ---------------------------------------------------------------------------
# conditioning image encoder
# ---------------------------------------------------------------------------

def test_image_encoder_matches_latent_shape():
    rng = np.random.default_rng(9)
    codec = ConvCodec(factor=4, latent_channels=4, rng=rng)
    enc = ImageEncoder(factor=4, latent_channels=4, rng=rng)
    img = _image(10)
    assert enc(img).data.shape == codec.encode(img).data.shape


def test_image_encoder_identity_mode_shape():
    enc = ImageEncoder(factor=1, latent_channels=3, rng=np.random.default_rng(11))
    img = _image(12, 32)
    assert enc(img).data.shape == (3, 32, 32)


def test_image_encoder_zero_image_is_finite():
    enc = ImageEncoder(factor=4, latent_channels=4, rng=np.random.default_rng(13))
    out = enc(np.zeros((3, 32, 32), dtype=np.float32)).data
    assert np.isfinite(out).all()


def test_image_encoder_distinct_inputs_distinct_latents():
    enc = ImageEncoder(factor=4, latent_channels=4, rng=np.random.default_rng(14))
    a = enc(_image(15)).data
    b = enc(_image(16)).data
    assert np.linalg.norm(a - b) > 0


def test_image_encoder_rejects_indivisible():
    enc = ImageEncoder(factor=4, latent_channels=4, rng=np.random.default_rng(17))
    with pytest.raises(ValueError):
        enc(np.zeros((3, 33, 32), dtype=np.float32))


# ---------------------------------------------------------------------------
# PNG io
# ---------------------------------------------------------------------------

def test_png_roundtrip(tmp_path):
    img = _image(18, 16)
    path = tmp_path / "img.png"
    save_image(img, path)
    back = load_image(path)
    quantized = (np.clip(img, 0, 1) * 255.0 + 0.5).astype(np.uint8).astype(np.float32) / 255.0
    np.testing.assert_allclose(back, quantized, atol=1e-7)


def test_png_clamps_before_write(tmp_path):
    img = np.full((3, 8, 8), 1.7, dtype=np.float32)
    path = tmp_path / "clamped.png"
    save_image(img, path)
    assert load_image(path).max() == 1.0
