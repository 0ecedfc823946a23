"""Late-fusion action head over frozen visual and state model outputs.

Two head kinds exist. The ``conv`` head convolves the predicted next frame,
flattens, appends the predicted next state and finishes with dense layers. The
``mlp`` head concatenates a visual feature vector with the predicted state.
The visual part always comes first in the concatenation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import Network, ShapeError
from .training import TrainConfig, batched, fit

HEAD_KINDS = ("conv", "mlp")


@dataclass(frozen=True)
class FusionConfig:
    head_kind: str = "conv"
    conv_channels: tuple[int, ...] = (8, 16)
    trunk_units: int = 8
    hidden: tuple[int, ...] = (128, 128)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.1, epochs=40, batch_size=32, weight_decay=3e-4))

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        d["hidden"] = tuple(d["hidden"])
        d["train"] = TrainConfig(**d["train"])
        return cls(**d)


def fuse_inputs(visual, state, head_kind: str):
    """Combine one sample's (or a batch's) visual and state outputs.

    ``mlp``: ``[visual || state]`` along the last axis. ``conv``: the frame is
    kept spatial and returned with the state, which the head appends after
    flattening its convolutional features.
    """
    state = np.asarray(state)
    if head_kind == "mlp":
        visual = np.asarray(visual)
        if visual.ndim != state.ndim or visual.shape[:-1] != state.shape[:-1]:
            raise ShapeError(f"cannot concatenate visual {visual.shape} with state {state.shape}")
        return np.concatenate([visual, state], axis=-1)
    if head_kind == "conv":
        frame = np.asarray(visual)
        if frame.ndim not in (3, 4):
            raise ShapeError(f"conv head needs a [c, h, w] frame, got {frame.shape}")
        return frame, state
    raise ValueError(f"unknown head kind {head_kind!r}")


class FusionHead:
    """Action head. ``frame_shape`` enables the conv trunk; ``vector_dim`` is the
    length of everything concatenated after it (visual features and/or state)."""

    def __init__(self, config: FusionConfig, action_dim: int, vector_dim: int,
                 frame_shape=None, seed: int = 0):
        self.config = config
        self.action_dim = action_dim
        self.vector_dim = vector_dim
        self.frame_shape = tuple(frame_shape) if frame_shape is not None else None
        trunk_out = 0
        self.trunk = None
        if self.frame_shape is not None:
            specs = []
            for ch in config.conv_channels:
                specs += [nn.conv(ch, 4, 2, 1), nn.relu()]
            specs.append(nn.flatten())
            if config.trunk_units:
                # linear projection: a narrow relu layer here tends to die early
                specs.append(nn.dense(config.trunk_units))
            self.trunk = Network(specs, self.frame_shape, seed)
            trunk_out = self.trunk.output_shape[0]
        if trunk_out + vector_dim == 0:
            raise ShapeError("fusion head has no inputs")
        tail = []
        for units in config.hidden:
            tail += [nn.dense(units), nn.relu()]
        tail.append(nn.dense(action_dim))
        self.tail = Network(tail, (trunk_out + vector_dim,), seed + 1)

    @property
    def input_dim(self) -> int:
        return self.tail.input_shape[0]

    def parameters(self):
        return (self.trunk.parameters() if self.trunk else []) + self.tail.parameters()

    def set_parameters(self, arrays):
        k = len(self.trunk.parameters()) if self.trunk else 0
        if self.trunk:
            self.trunk.set_parameters(arrays[:k])
        self.tail.set_parameters(arrays[k:])

    def mark_updated(self):
        if self.trunk:
            self.trunk.version += 1
        self.tail.version += 1

    def _split(self, data):
        if self.trunk is not None and self.vector_dim:
            frames, vectors, target = data
        elif self.trunk is not None:
            frames, target = data
            vectors = None
        else:
            vectors, target = data
            frames = None
        return frames, vectors, target

    def _forward(self, frames, vectors):
        if vectors is None:
            vectors = np.zeros((len(frames), 0), np.float32)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.shape[1:] != (self.vector_dim,):
            raise ShapeError(f"fusion head expects vectors of length {self.vector_dim}, got {vectors.shape[1:]}")
        trunk_cache = None
        parts = []
        if self.trunk is not None:
            feats, trunk_cache = nn.forward(self.trunk, np.asarray(frames, dtype=np.float32))
            parts.append(feats)
        parts.append(vectors)
        z = np.concatenate(parts, axis=1)
        y, tail_cache = nn.forward(self.tail, z)
        return y, (trunk_cache, tail_cache)

    def forward(self, frames, vectors):
        return self._forward(frames, vectors)[0]

    def loss_and_grads(self, data):
        frames, vectors, target = self._split(data)
        y, (trunk_cache, tail_cache) = self._forward(frames, vectors)
        loss, g = nn.mse_loss(y, target)
        grads, dz = self.backward(trunk_cache, tail_cache, g)
        return loss, grads

    def backward(self, trunk_cache, tail_cache, g):
        tail_grads, dz = nn.backward(self.tail, tail_cache, g)
        trunk_grads = []
        if self.trunk is not None:
            k = self.trunk.output_shape[0]
            trunk_grads, _ = nn.backward(self.trunk, trunk_cache, dz[:, :k])
        return trunk_grads + tail_grads, dz

    def predict(self, frames, vectors, batch_size=512):
        if frames is None:
            return batched(lambda v: self.forward(None, v), [vectors], batch_size)
        if vectors is None:
            return batched(lambda f: self.forward(f, None), [frames], batch_size)
        return batched(self.forward, [frames, vectors], batch_size)

    def evaluate_loss(self, data):
        frames, vectors, target = self._split(data)
        pred = self.predict(frames, vectors)
        return float(np.mean(np.square(pred - target, dtype=np.float64)))


def _data(frames, vectors, target):
    if frames is None:
        return (vectors, target)
    if vectors is None or vectors.shape[1] == 0:
        return (frames, target)
    return (frames, vectors, target)


def train_head(config: FusionConfig, train, val, action_dim, seed=None):
    """Train a head on ``(frames | None, vectors | None, targets)`` triples.

    Returns ``(head, history)``. Targets are normalized actions.
    """
    tcfg = config.train if seed is None else TrainConfig(**{**asdict(config.train), "seed": seed})
    frames, vectors, _ = train
    vector_dim = 0 if vectors is None else vectors.shape[1]
    frame_shape = None if frames is None else frames.shape[1:]
    head = FusionHead(config, action_dim, vector_dim, frame_shape, seed=tcfg.seed)
    history = fit(head, _data(*train), _data(*val), tcfg)
    return head, history
