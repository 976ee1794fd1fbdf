"""Orthonormality and Parseval oracles for the patch codec, PPM round trips,
and stage-1 training behavior."""

import numpy as np
import pytest

from rqlib import codebook as cbm
from rqlib import patchcodec as pc
from rqlib import rqcore as rq
from rqlib import synthetic
from rqlib.errors import DimensionError, ValidationError

RNG = np.random.default_rng(31)


def test_basis_is_orthonormal():
    for f in (1, 2, 4):
        B = pc.patch_basis(f)
        np.testing.assert_allclose(B @ B.T, np.eye(3 * f * f), atol=1e-12)


def test_zigzag_order_is_frequency_ranked():
    zz = pc.zigzag_order(4)
    assert zz[0] == (0, 0)
    assert len(zz) == 16
    totals = [u + v for u, v in zz]
    assert totals == sorted(totals)


def test_encode_constant_gray_hits_only_dc_rows():
    img = np.full((8, 8, 3), 0.37)
    Z = pc.PatchCodec.orthonormal(4, 48).encode(img)
    coeffs = Z.reshape(-1, 48)
    assert (np.abs(coeffs[:, 3:]) < 1e-12).all()
    assert (np.abs(coeffs[:, :3]) > 0.1).all()


def test_f1_identity_transform():
    img = RNG.random((5, 7, 3))
    codec = pc.PatchCodec.orthonormal(1, 3)
    np.testing.assert_array_equal(codec.encode(img), img)


def test_parseval_energy_preserved():
    img = RNG.random((8, 8, 3))
    codec = pc.PatchCodec.orthonormal(4, 48)
    patches = pc.patchify(img, 4).reshape(-1, 48)
    coeffs = codec.encode(img).reshape(-1, 48)
    np.testing.assert_allclose((patches ** 2).sum(axis=1),
                               (coeffs ** 2).sum(axis=1), atol=1e-9)


def test_full_basis_round_trip():
    img = RNG.random((16, 16, 3)) * 0.6 + 0.2
    codec = pc.PatchCodec.orthonormal(4, 48)
    np.testing.assert_allclose(codec.decode(codec.encode(img)), img, atol=1e-9)


def test_zero_feature_map_decodes_to_black():
    codec = pc.PatchCodec.orthonormal(2, 12)
    img = codec.decode(np.zeros((3, 3, 12)))
    np.testing.assert_array_equal(img, np.zeros((6, 6, 3)))


def test_truncation_error_equals_discarded_energy():
    # build an image from a known full-coefficient tensor with a safe DC bias
    # so the decode clamp stays inactive
    full = pc.PatchCodec.orthonormal(4, 48)
    coeffs = RNG.normal(size=(2, 2, 48)) * 0.02
    coeffs[:, :, :3] = 0.5 * 4  # DC of each channel -> flat 0.5 background
    img = full.decode(coeffs)
    for n_z in (3, 12, 30):
        trunc = pc.PatchCodec.orthonormal(4, n_z)
        recon = trunc.decode(trunc.encode(img))
        discarded = (coeffs[:, :, n_z:] ** 2).sum()
        err = ((img - recon) ** 2).sum()
        np.testing.assert_allclose(err, discarded, atol=1e-9)


def test_orthonormal_mode_caps_n_z():
    with pytest.raises(ValidationError):
        pc.PatchCodec.orthonormal(2, 13)


def test_recon_loss_examples():
    X = RNG.random((4, 4, 3))
    assert pc.recon_loss(X, X) == 0.0
    assert pc.recon_loss(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0
    Y = RNG.random((4, 4, 3))
    naive = sum((X[i, j, c] - Y[i, j, c]) ** 2
                for i in range(4) for j in range(4) for c in range(3)) / 48
    np.testing.assert_allclose(pc.recon_loss(X, Y), naive, rtol=1e-12)
    with pytest.raises(DimensionError):
        pc.recon_loss(X, np.zeros((2, 2, 3)))


def test_ppm_round_trip_bit_exact(tmp_path):
    img = RNG.random((12, 10, 3))
    p1 = tmp_path / "a.ppm"
    p2 = tmp_path / "b.ppm"
    pc.save_ppm(img, p1)
    loaded = pc.load_ppm(p1)
    pc.save_ppm(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.min() >= 0.0 and loaded.max() <= 1.0


def test_ppm_header_with_comment(tmp_path):
    raw = b"P6\n# a comment\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0])
    p = tmp_path / "c.ppm"
    p.write_bytes(raw)
    img = pc.load_ppm(p)
    np.testing.assert_allclose(img[0, 0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(img[0, 1], [0.0, 1.0, 0.0])


def test_autoencoder_training_reduces_loss():
    imgs = synthetic.make_images(16, 8, seed=5)
    cfg = pc.Stage1Config(f=2, n_z=6, mode="trainable", quantize=False, beta=0.0,
                          epochs=50, batch_size=8, lr=3e-3, seed=0)
    res = pc.train_stage1(imgs, cfg)
    assert res.metrics[-1]["recon"] < res.metrics[0]["recon"]


def test_frozen_codec_training_is_ema_kmeans():
    imgs = synthetic.make_images(8, 8, seed=6)
    cfg = pc.Stage1Config(f=2, n_z=12, mode="orthonormal", codebook_size=8, depth=1,
                          epochs=3, batch_size=len(imgs), decay=0.9, seed=4,
                          restart_every=0)
    res = pc.train_stage1(imgs, cfg)

    # independent loop: same init, same batches (full-batch, fixed order at
    # depth 1), same EMA recurrences
    codec = pc.PatchCodec.orthonormal(2, 12)
    feats = np.concatenate([codec.encode(X).reshape(-1, 12) for X in imgs])
    cb = cbm.init_codebook(feats, 8, np.random.default_rng([4, 2]))
    order_rng = np.random.default_rng([4, 1])
    for _ in range(3):
        order = order_rng.permutation(len(imgs))
        batch = np.concatenate([codec.encode(imgs[i]).reshape(-1, 12) for i in order])
        cbm.ema_update(cb, batch, cbm.nearest_code_batch(batch, cb), 0.9)
    np.testing.assert_allclose(res.codebook.embeddings, cb.embeddings, rtol=1e-10)


def test_full_pipeline_improves_and_refines():
    imgs = synthetic.make_images(16, 8, seed=5)
    cfg = pc.Stage1Config(f=2, n_z=6, mode="trainable", codebook_size=32, depth=4,
                          beta=0.25, epochs=60, batch_size=8, lr=3e-3, seed=0)
    res = pc.train_stage1(imgs, cfg)
    assert res.metrics[-1]["recon"] < res.metrics[0]["recon"]
    mses = np.stack([pc.per_depth_mse(X, res.codec, res.codebook, 4) for X in imgs])
    assert (np.diff(mses.mean(axis=0)) <= 0).all()


def test_training_rejects_empty_dataset():
    with pytest.raises(ValidationError, match="no input images"):
        pc.train_stage1([], pc.Stage1Config())


def test_training_determinism():
    imgs = synthetic.make_images(8, 8, seed=9)
    cfg = pc.Stage1Config(f=2, n_z=6, mode="trainable", codebook_size=16, depth=2,
                          epochs=5, batch_size=4, lr=1e-3, seed=3)
    r1 = pc.train_stage1(imgs, cfg)
    r2 = pc.train_stage1(imgs, cfg)
    np.testing.assert_array_equal(r1.codec.enc, r2.codec.enc)
    np.testing.assert_array_equal(r1.codebook.embeddings, r2.codebook.embeddings)
    assert r1.metrics == r2.metrics


def test_per_depth_codebooks_training_runs():
    imgs = synthetic.make_images(8, 8, seed=9)
    cfg = pc.Stage1Config(f=2, n_z=6, mode="orthonormal", codebook_size=16, depth=2,
                          epochs=4, batch_size=8, seed=3, per_depth_codebooks=True)
    res = pc.train_stage1(imgs, cfg)
    assert isinstance(res.codebook, list) and len(res.codebook) == 2
    assert all(b.size == 8 for b in res.codebook)
    mses = np.stack([pc.per_depth_mse(X, res.codec, res.codebook, 2) for X in imgs])
    assert mses.shape == (8, 2)


def test_deeper_stacks_strictly_reduce_held_out_error():
    train = synthetic.make_images(48, 32, seed=21)
    held = synthetic.make_images(12, 32, seed=22)
    results = []
    for depth in (1, 2, 4, 8):
        cfg = pc.Stage1Config(f=4, n_z=48, mode="orthonormal", codebook_size=64,
                              depth=depth, epochs=30, batch_size=16, seed=0)
        res = pc.train_stage1(train, cfg)
        mses = np.stack([pc.per_depth_mse(X, res.codec, res.codebook, depth)
                         for X in held])
        results.append(mses[:, -1].mean())
    assert all(b < a for a, b in zip(results, results[1:]))


def test_usage_count_sums_to_quantized_vectors_per_depth():
    imgs = synthetic.make_images(8, 8, seed=6)
    cfg = pc.Stage1Config(f=2, n_z=12, mode="orthonormal", codebook_size=8, depth=3,
                          epochs=2, batch_size=len(imgs), seed=4)
    res = pc.train_stage1(imgs, cfg)
    # one full-batch update per epoch: each depth saw every position once
    np.testing.assert_array_equal(res.codebook.usage_count.sum(axis=1),
                                  [8 * 16] * 3)


def test_synthetic_images_are_valid_and_deterministic():
    a = synthetic.make_images(3, 16, seed=2)
    b = synthetic.make_images(3, 16, seed=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert x.shape == (16, 16, 3)
        assert x.min() >= 0.0 and x.max() <= 1.0
