import numpy as np
import pytest

from armfusion import nn
from armfusion.io import save_features
from armfusion.nn import ShapeError
from armfusion.synthetic import SyntheticConfig, generate_synthetic
from armfusion.training import TrainConfig, TrainingDiverged
from armfusion.visual import (EncoderFeatures, FileFeatures, VisualConfig, VisualModel, extract_features,
                              mean_image_baseline, pooled_frame_features, predict_next_frame, train_visual)

from gradcheck import MAX_SKIPPED, TOL, max_relative_error, numeric_grads, relu_pattern, skipped_fraction

SMALL = VisualConfig(window_size=2, bottleneck=8, encoder_channels=(4, 4), decoder_channels=1,
                     train=TrainConfig(lr=2.0, epochs=15, batch_size=16, patience=15))


def _blobs(n, size=8, seed=0):
    """Windows of 2 frames with a single bright pixel each; next frame repeats the last one."""
    rng = np.random.default_rng(seed)
    frames = np.zeros((n, 2, 1, size, size), np.float32)
    for i in range(n):
        for t in range(2):
            r, c = rng.integers(0, size, 2)
            frames[i, t, 0, max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = 1.0
    return frames.reshape(n, 2, size, size), frames[:, 1]


def test_zero_next_frames_learned():
    windows, _ = _blobs(96)
    zeros = np.zeros((96, 1, 8, 8), np.float32)
    model, _ = train_visual(SMALL, windows[:64], zeros[:64], windows[64:], zeros[64:])
    pred, _ = model.predict(windows[64:])
    assert np.mean(pred.astype(np.float64) ** 2) < 1e-3


def test_copy_last_frame_beats_mean_image():
    windows, nxt = _blobs(400, seed=1)
    cfg = VisualConfig(window_size=2, bottleneck=32, encoder_channels=(8, 8), decoder_channels=2,
                       train=TrainConfig(lr=5.0, epochs=25, batch_size=16, patience=25))
    model, _ = train_visual(cfg, windows[:300], nxt[:300], windows[300:], nxt[300:])
    pred, _ = model.predict(windows[300:])
    val = float(np.mean((pred.astype(np.float64) - nxt[300:]) ** 2))
    assert val < mean_image_baseline(nxt[:300], nxt[300:])


def test_mean_image_baseline_is_exact_oracle():
    rng = np.random.default_rng(3)
    train, held = rng.random((10, 1, 3, 3)), rng.random((5, 1, 3, 3))
    mean = train.mean(axis=0)
    assert mean_image_baseline(train, held) == pytest.approx(np.mean((held - mean) ** 2), abs=1e-15)
    # the mean is the best constant on its own data
    assert mean_image_baseline(train, train) <= np.mean((train - train[0]) ** 2)


def test_training_is_deterministic():
    windows, nxt = _blobs(48, seed=2)
    a, ha = train_visual(SMALL, windows[:32], nxt[:32], windows[32:], nxt[32:])
    b, hb = train_visual(SMALL, windows[:32], nxt[:32], windows[32:], nxt[32:])
    assert ha == hb
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_divergence_reports_epoch():
    windows, nxt = _blobs(32, seed=4)
    cfg = VisualConfig(window_size=2, bottleneck=8, encoder_channels=(4, 4), decoder_channels=1,
                       train=TrainConfig(lr=1e30, epochs=3, batch_size=16))
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_visual(cfg, windows[:16], nxt[:16], windows[16:], nxt[16:])


def test_zero_weights_give_half_frame():
    model = VisualModel(SMALL, (1, 8, 8), seed=0)
    model.set_parameters([np.zeros_like(p) for p in model.parameters()])
    frame, z = predict_next_frame(model, np.random.default_rng(0).random((2, 1, 8, 8)))
    assert frame.shape == (1, 8, 8) and np.all(frame == 0.5)
    assert z.shape == (SMALL.bottleneck,)


def test_predict_is_pure_and_in_range():
    model = VisualModel(SMALL, (1, 8, 8), seed=5)
    for p in model.parameters():
        p *= 20  # push logits into saturation
    window = np.random.default_rng(1).random((2, 1, 8, 8))
    f1, z1 = predict_next_frame(model, window)
    f2, z2 = predict_next_frame(model, window.copy())
    assert np.array_equal(f1, f2) and np.array_equal(z1, z2)
    assert f1.min() >= 0 and f1.max() <= 1
    assert np.all(np.isfinite(z1))


def test_geometry_errors():
    model = VisualModel(SMALL, (1, 8, 8))
    with pytest.raises(ShapeError):
        predict_next_frame(model, np.zeros((3, 1, 8, 8)))
    with pytest.raises(ShapeError):
        predict_next_frame(model, np.zeros((2, 1, 6, 6)))
    with pytest.raises((ShapeError, nn.ConfigError)):
        VisualModel(SMALL, (1, 7, 8))


def test_decoder_matches_frame_geometry():
    model = VisualModel(VisualConfig(), (1, 32, 32))
    assert model.decoder.output_shape == (1, 32, 32)
    assert model.encoder.output_shape == (64,)


def test_encoder_and_file_feature_sources(tmp_path):
    model = VisualModel(SMALL, (1, 8, 8), seed=2)
    window = np.random.default_rng(9).random((2, 1, 8, 8))
    src = EncoderFeatures(model)
    np.testing.assert_array_equal(extract_features(src, window), predict_next_frame(model, window)[1])
    assert src.dim == SMALL.bottleneck

    table = {"t0:0": np.array([1.0, 2.0, 3.0], np.float32), "t0:1": np.array([-1.0, 0.5, 0.0], np.float32)}
    save_features(tmp_path / "f.dmlf", table)
    fsrc = FileFeatures(tmp_path / "f.dmlf")
    assert fsrc.dim == 3
    assert np.array_equal(extract_features(fsrc, None, "t0:1"), table["t0:1"])
    with pytest.raises(KeyError, match="t9:0"):
        extract_features(fsrc, None, "t9:0")


def test_pooled_frame_features_keys_and_values():
    trajs = generate_synthetic(SyntheticConfig(n_traj=2, steps_per_traj=6, image_size=16, seed=1))
    feats = pooled_frame_features(trajs, window_size=3, pool=8)
    assert sorted(feats) == sorted(f"{t.id}:{i}" for t in trajs for i in range(3))
    img = trajs[1].images[2 + 1, 0].astype(np.float64)  # window start 1 ends at step 3
    expect = img.reshape(2, 8, 2, 8).mean(axis=(1, 3)).ravel()
    np.testing.assert_allclose(feats[f"{trajs[1].id}:1"], expect, rtol=1e-6)


def test_gradient_check_full_encoder_decoder():
    cfg = VisualConfig(window_size=2, bottleneck=3, encoder_channels=(2, 2), decoder_channels=1)
    model = VisualModel(cfg, (1, 4, 4), seed=4)
    model.encoder.astype(np.float64)
    model.decoder.astype(np.float64)
    rng = np.random.default_rng(7)
    for p in model.parameters():
        if p.ndim == 1:
            p[...] = rng.standard_normal(p.shape) * 0.1
    x = rng.random((2, 2, 4, 4))
    target = rng.random((2, 1, 4, 4))

    def loss():
        _, y, _ = model._forward(x)
        return nn.mse_loss(y, target)[0]

    analytic = model.loss_and_grads((x, target))[1]
    sig = relu_pattern([model.encoder, model.decoder], lambda: [x, nn.forward(model.encoder, x)[0]])
    numeric = numeric_grads(loss, model.parameters(), signature=sig)
    assert skipped_fraction(numeric) <= MAX_SKIPPED
    assert max_relative_error(analytic, numeric) < TOL
