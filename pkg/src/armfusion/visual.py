"""Next-frame predictor: a small conv encoder/decoder over a channel-stacked image window."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import nn
from .io import load_features
from .nn import LayerSpec, Network, ShapeError
from .training import TrainConfig, batched, fit


@dataclass(frozen=True)
class VisualConfig:
    window_size: int = 3
    bottleneck: int = 64
    encoder_channels: tuple[int, int] = (8, 16)
    decoder_channels: int = 2
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=10.0, epochs=12, batch_size=32))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VisualConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["train"] = TrainConfig(**d["train"])
        return cls(**d)


def encoder_specs(cfg: VisualConfig) -> list[LayerSpec]:
    c1, c2 = cfg.encoder_channels
    return [nn.conv(c1, 4, 2, 1), nn.relu(), nn.conv(c2, 4, 2, 1), nn.relu(),
            nn.flatten(), nn.dense(cfg.bottleneck), nn.relu()]


def decoder_specs(cfg: VisualConfig, frame_shape) -> list[LayerSpec]:
    c, h, w = frame_shape
    k = cfg.decoder_channels
    return [nn.dense(k * h * w), nn.reshape(k, h, w), nn.conv(c, 3, 1, 1), nn.sigmoid()]


class VisualModel:
    def __init__(self, config: VisualConfig, frame_shape, seed: int = 0):
        self.config = config
        self.frame_shape = tuple(frame_shape)
        c, h, w = self.frame_shape
        self.encoder = Network(encoder_specs(config), (config.window_size * c, h, w), seed)
        self.decoder = Network(decoder_specs(config, self.frame_shape), self.encoder.output_shape, seed + 1)
        if self.decoder.output_shape != self.frame_shape:
            raise ShapeError(f"decoder emits {self.decoder.output_shape}, frames are {self.frame_shape}")

    @property
    def feature_dim(self) -> int:
        return self.config.bottleneck

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def set_parameters(self, arrays):
        k = len(self.encoder.parameters())
        self.encoder.set_parameters(arrays[:k])
        self.decoder.set_parameters(arrays[k:])

    def mark_updated(self):
        self.encoder.version += 1
        self.decoder.version += 1

    def _as_windows(self, windows):
        windows = np.asarray(windows, dtype=self.parameters()[0].dtype)
        c, h, w = self.frame_shape
        ws = self.config.window_size
        if windows.ndim == 5:  # [N, window, c, h, w]
            if windows.shape[1:] != (ws, c, h, w):
                raise ShapeError(f"window shape {windows.shape[1:]} != {(ws, c, h, w)}")
            windows = windows.reshape(len(windows), ws * c, h, w)
        if windows.shape[1:] != self.encoder.input_shape:
            raise ShapeError(f"stacked window shape {windows.shape[1:]} != {self.encoder.input_shape}")
        return windows

    def _forward(self, windows):
        z, enc_cache = nn.forward(self.encoder, windows)
        y, dec_cache = nn.forward(self.decoder, z)
        return z, y, (enc_cache, dec_cache)

    def loss_and_grads(self, data):
        windows, target = data
        _, y, (enc_cache, dec_cache) = self._forward(self._as_windows(windows))
        loss, g = nn.mse_loss(y, target)
        dec_grads, dz = nn.backward(self.decoder, dec_cache, g)
        enc_grads, _ = nn.backward(self.encoder, enc_cache, dz)
        return loss, enc_grads + dec_grads

    def _predict_batch(self, windows):
        z, y, _ = self._forward(self._as_windows(windows))
        return np.clip(y, 0.0, 1.0), z

    def predict(self, windows, batch_size=256):
        """Predicted next frames (clamped to [0, 1]) and bottleneck features for a batch."""
        return batched(self._predict_batch, [windows], batch_size)

    def evaluate_loss(self, data):
        windows, target = data
        pred, _ = self.predict(windows)
        return float(np.mean(np.square(pred - target, dtype=np.float64)))


def train_visual(config: VisualConfig, train_windows, train_next, val_windows, val_next, seed=None):
    """Fit a VisualModel on per-pixel MSE; returns ``(model, history)``."""
    tcfg = config.train if seed is None else TrainConfig(**{**asdict(config.train), "seed": seed})
    frame_shape = train_next.shape[1:]
    model = VisualModel(config, frame_shape, seed=tcfg.seed)
    # start the output unit at the mean training pixel instead of 0.5
    mean = float(np.clip(np.mean(train_next), 1e-3, 1 - 1e-3))
    model.decoder.layers[-2].params["bias"][:] = np.log(mean / (1 - mean))
    history = fit(model, (train_windows, train_next), (val_windows, val_next), tcfg)
    return model, history


def predict_next_frame(model: VisualModel, past_images):
    """Single window ``[window, c, h, w]`` -> (frame ``[c, h, w]``, bottleneck ``[d]``)."""
    past_images = np.asarray(past_images)
    if past_images.ndim != 4 or len(past_images) != model.config.window_size:
        raise ShapeError(f"expected a window of {model.config.window_size} frames, got shape {past_images.shape}")
    frame, z = model.predict(past_images[None])
    return frame[0], z[0]


def mean_image_baseline(train_next, eval_next) -> float:
    """MSE of predicting the training-set mean next frame everywhere."""
    mean = np.mean(np.asarray(train_next, dtype=np.float64), axis=0)
    return float(np.mean((np.asarray(eval_next, dtype=np.float64) - mean) ** 2))


# --------------------------------------------------------------------------
# Feature sources


class FeatureSource(Protocol):
    dim: int

    def extract(self, key: str | None, window) -> np.ndarray: ...


class EncoderFeatures:
    """Bottleneck of a trained VisualModel."""

    def __init__(self, model: VisualModel):
        self.model = model
        self.dim = model.feature_dim

    def extract(self, key, window):
        return predict_next_frame(self.model, window)[1]

    def extract_batch(self, keys, windows):
        return self.model.predict(windows)[1]


class FileFeatures:
    """Precomputed vectors (e.g. from a pretrained backbone) looked up by sample key."""

    def __init__(self, path):
        self.path = Path(path)
        self.dim, self.table = load_features(self.path)

    def extract(self, key, window=None):
        try:
            return self.table[key]
        except KeyError:
            raise KeyError(f"sample key {key!r} not found in {self.path}") from None

    def extract_batch(self, keys, windows=None):
        return np.stack([self.extract(k) for k in keys]) if keys else np.zeros((0, self.dim), np.float32)


def extract_features(source: FeatureSource, window, key: str | None = None) -> np.ndarray:
    vec = np.asarray(source.extract(key, window))
    if vec.shape != (source.dim,):
        raise ShapeError(f"feature source returned shape {vec.shape}, declared dim {source.dim}")
    return vec


def pooled_frame_features(trajectories, window_size: int = 3, pool: int = 4) -> dict[str, np.ndarray]:
    """Fixed, untrained descriptor per sample: the last window frame, average-pooled.

    Stands in for a frozen external backbone when exercising the file-backed
    feature path. Keys match :func:`dataset.sample_key`.
    """
    from .dataset import sample_key

    out = {}
    for traj in trajectories:
        imgs = np.asarray(traj.images, dtype=np.float64)
        t, c, h, w = imgs.shape
        if h % pool or w % pool:
            raise ShapeError(f"pool size {pool} does not divide frame {h}x{w}")
        pooled = imgs.reshape(t, c, h // pool, pool, w // pool, pool).mean(axis=(3, 5)).reshape(t, -1)
        for start in range(max(0, t - window_size)):
            out[sample_key(traj.id, start)] = pooled[start + window_size - 1].astype(np.float32)
    return out
