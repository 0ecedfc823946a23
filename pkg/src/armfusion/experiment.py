"""Experiment config, staged pipeline training, bundles, evaluation and the comparison runner."""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from multiprocessing.pool import ThreadPool
from pathlib import Path

import numpy as np

from .dataset import (
    Normalizer,
    SampleBatch,
    batch_from_trajectories,
    dataset_fingerprint,
    fit_normalizer,
    load_dataset,
    split_dataset,
)
from .fusion import FusionConfig, FusionHead, train_head
from .io import FormatError, file_digest, load_checkpoint, save_checkpoint
from .metrics import MetricsReport, compute_metrics
from .nn import ShapeError
from .parallel import worker_count
from .state import (
    ForestParams,
    GDConfig,
    fit_forest,
    fit_gd,
    state_model_from_checkpoint,
    state_model_to_checkpoint,
)
from .synthetic import SyntheticConfig, generate_synthetic
from .training import TrainConfig
from .visual import FileFeatures, VisualConfig, VisualModel, mean_image_baseline, train_visual

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
REPORT_VERSION = 1
STATE_KINDS = ("forest", "gd")
META_TAG = b"META"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed to load or did not line up with its neighbours."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"{stage} stage: {detail}")
        self.stage = stage


# --------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment document. ``dataset`` (a manifest path) overrides the synthetic fields."""

    dataset: str | None = None
    n_traj: int = 200
    steps_per_traj: int = 50
    image_size: int = 32
    data_seed: int = 7
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    window_size: int = 3
    visual_bottleneck: int = 64
    visual_lr: float = 10.0
    visual_epochs: int = 12
    visual_batch_size: int = 32
    visual_patience: int = 10
    n_trees: int = 50
    max_depth: int = 12
    min_samples_leaf: int = 2
    feature_subsample: int | None = None
    gd_lr: float = 0.05
    gd_epochs: int = 1000
    gd_l2: float = 0.0
    head_kind: str = "conv"
    fusion_conv_channels: tuple[int, ...] = (8, 16)
    fusion_trunk_units: int = 8
    fusion_hidden: tuple[int, ...] = (128, 128)
    fusion_lr: float = 0.1
    fusion_epochs: int = 40
    fusion_batch_size: int = 32
    fusion_weight_decay: float = 3e-4
    fusion_patience: int = 10
    state_model: str = "forest"
    grid_state_models: tuple[str, ...] = STATE_KINDS
    features_file: str | None = None
    ablations: bool = True

    def __post_init__(self):
        for kind in (self.state_model, *self.grid_state_models):
            if kind not in STATE_KINDS:
                raise ConfigError(f"unknown state model {kind!r}; expected one of {STATE_KINDS}")
        if len(self.split_ratios) != 3:
            raise ConfigError("split_ratios needs three entries (train, val, test)")
        FusionConfig(head_kind=self.head_kind)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        for key in ("split_ratios", "fusion_conv_channels", "fusion_hidden", "grid_state_models"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = cls.from_dict(doc)
        # relative paths are taken from the config file's directory
        updates = {}
        for key in ("dataset", "features_file"):
            val = getattr(cfg, key)
            if val is not None and not Path(val).is_absolute():
                updates[key] = str(path.parent / val)
        return cls.from_dict({**cfg.to_dict(), **updates}) if updates else cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(n_traj=self.n_traj, steps_per_traj=self.steps_per_traj,
                               image_size=self.image_size, seed=self.data_seed, window_size=self.window_size)

    def visual_config(self) -> VisualConfig:
        return VisualConfig(
            window_size=self.window_size, bottleneck=self.visual_bottleneck,
            train=TrainConfig(lr=self.visual_lr, epochs=self.visual_epochs, batch_size=self.visual_batch_size,
                              patience=self.visual_patience, seed=self.stage_seed("visual")))

    def forest_params(self) -> ForestParams:
        return ForestParams(n_trees=self.n_trees, max_depth=self.max_depth,
                            min_samples_leaf=self.min_samples_leaf, feature_subsample=self.feature_subsample)

    def gd_config(self) -> GDConfig:
        return GDConfig(lr=self.gd_lr, epochs=self.gd_epochs, l2=self.gd_l2)

    def fusion_config(self, head_kind: str | None = None) -> FusionConfig:
        return FusionConfig(
            head_kind=head_kind or self.head_kind, conv_channels=self.fusion_conv_channels,
            trunk_units=self.fusion_trunk_units, hidden=self.fusion_hidden,
            train=TrainConfig(lr=self.fusion_lr, epochs=self.fusion_epochs, batch_size=self.fusion_batch_size,
                              weight_decay=self.fusion_weight_decay, patience=self.fusion_patience,
                              seed=self.stage_seed("fusion")))

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed derived from the master seed, stable across runs and platforms."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1)[0] & 0x7FFFFFFF)

    def seeds(self) -> dict[str, int]:
        return {"master": self.seed, "data": self.data_seed,
                **{s: self.stage_seed(s) for s in ("split", "visual", "state", "fusion")}}


# --------------------------------------------------------------------------
# Data


@dataclass
class PreparedData:
    train: SampleBatch
    val: SampleBatch
    test: SampleBatch
    normalizer: Normalizer
    fingerprint: str
    split_ids: dict[str, list[str]]

    def split(self, name: str) -> SampleBatch:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def frame_shape(self):
        return self.train.next_images.shape[1:]

    @property
    def action_dim(self) -> int:
        return self.train.actions.shape[1]

    @property
    def joint_count(self) -> int:
        return (self.train.states.shape[1] - 1) // 3


def load_trajectories(config: ExperimentConfig):
    if config.dataset:
        return load_dataset(config.dataset)
    return generate_synthetic(config.synthetic())


def prepare_data(config: ExperimentConfig, trajectories=None) -> PreparedData:
    trajs = load_trajectories(config) if trajectories is None else trajectories
    train, val, test = split_dataset(trajs, config.split_ratios, seed=config.stage_seed("split"))
    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part:
            raise ConfigError(f"{name} split is empty; use more trajectories")
    batches = [batch_from_trajectories(p, config.window_size) for p in (train, val, test)]
    return PreparedData(*batches, normalizer=fit_normalizer(train), fingerprint=dataset_fingerprint(trajs),
                        split_ids={n: [t.id for t in p] for n, p in zip(("train", "val", "test"), (train, val, test))})


# --------------------------------------------------------------------------
# Model 2 wrapper


class StateModel:
    """Regressor over normalized states that predicts the increment to the next state."""

    def __init__(self, kind: str, regressor):
        self.kind = kind
        self.regressor = regressor

    def predict(self, z_states) -> np.ndarray:
        z = np.asarray(z_states, dtype=np.float64)
        return (z + self.regressor.predict(z)).astype(np.float32)


def train_state_model(kind: str, config: ExperimentConfig, data: PreparedData) -> StateModel:
    nz = data.normalizer
    x = nz.apply_state(data.train.states).astype(np.float64)
    y = nz.apply_state(data.train.next_states).astype(np.float64) - x
    if kind == "forest":
        reg = fit_forest(x, y, config.forest_params(), seed=config.stage_seed("state"))
    elif kind == "gd":
        reg = fit_gd(x, y, config.gd_config())
    else:
        raise ConfigError(f"unknown state model {kind!r}")
    return StateModel(kind, reg)


def state_metrics(model: StateModel, data: PreparedData, split: str) -> MetricsReport:
    b = data.split(split)
    nz = data.normalizer
    pred = model.predict(nz.apply_state(b.states))
    return compute_metrics(pred, nz.apply_state(b.next_states), model=model.kind, split=split)


# --------------------------------------------------------------------------
# Head inputs


def head_inputs(head_kind: str, visual_out, state_out, modality: str = "both"):
    """``(frames | None, vectors | None)`` for a head given the upstream outputs.

    ``visual_out`` is the predicted frame batch for the conv head and a feature
    batch for the mlp head. ``modality`` selects the ablations.
    """
    if modality not in ("both", "image", "state"):
        raise ValueError(f"unknown modality {modality!r}")
    vis = None if modality == "state" else visual_out
    st = None if modality == "image" else np.asarray(state_out, dtype=np.float32)
    if head_kind == "conv":
        return vis, st
    parts = [p for p in (vis, st) if p is not None]
    return None, np.concatenate(parts, axis=1).astype(np.float32)


class UpstreamCache:
    """Per-split outputs of the frozen visual and state models, computed once."""

    def __init__(self, data: PreparedData, visual: VisualModel | None, state_models: dict, features=None):
        self.data = data
        self.frames, self.bottleneck, self.states, self.file_feats = {}, {}, {}, {}
        for split in ("train", "val", "test"):
            b = data.split(split)
            if visual is not None:
                self.frames[split], self.bottleneck[split] = visual.predict(b.windows)
            z = data.normalizer.apply_state(b.states)
            self.states[split] = {k: m.predict(z) for k, m in state_models.items()}
            if features is not None:
                self.file_feats[split] = features.extract_batch(b.keys)

    def visual(self, backend: str, head_kind: str, split: str):
        if backend == "file":
            return self.file_feats[split]
        return self.frames[split] if head_kind == "conv" else self.bottleneck[split]

    def triple(self, backend, head_kind, state_kind, split, modality="both"):
        frames, vectors = head_inputs(head_kind, self.visual(backend, head_kind, split),
                                      self.states[split].get(state_kind), modality)
        target = self.data.normalizer.apply_action(self.data.split(split).actions).astype(np.float32)
        return frames, vectors, target


def fit_head(config: ExperimentConfig, cache: UpstreamCache, backend: str, head_kind: str,
             state_kind: str, modality: str = "both"):
    fcfg = config.fusion_config(head_kind)
    train = cache.triple(backend, head_kind, state_kind, "train", modality)
    val = cache.triple(backend, head_kind, state_kind, "val", modality)
    return train_head(fcfg, train, val, cache.data.action_dim)


def head_metrics(head: FusionHead, cache: UpstreamCache, backend, head_kind, state_kind, split,
                 modality="both", label="") -> dict:
    frames, vectors, target = cache.triple(backend, head_kind, state_kind, split, modality)
    pred = head.predict(frames, vectors)
    nz = cache.data.normalizer
    norm = compute_metrics(pred, target, model=label, split=split)
    denorm = compute_metrics(nz.invert_action(pred), cache.data.split(split).actions, model=label, split=split)
    return {"normalized": norm, "denormalized": denorm}


# --------------------------------------------------------------------------
# Checkpoints and bundles


def _meta_section(meta: dict) -> dict[bytes, bytes]:
    return {META_TAG: json.dumps(meta, sort_keys=True).encode()}


def _read_meta(sections, path) -> dict:
    if META_TAG not in sections:
        raise FormatError(f"{path}: checkpoint has no META section")
    return json.loads(sections[META_TAG].decode())


def save_visual(path, model: VisualModel) -> None:
    meta = {"model": "visual", "config": model.config.to_dict(), "frame_shape": list(model.frame_shape)}
    save_checkpoint(path, model.parameters(), _meta_section(meta))


def load_visual(path) -> VisualModel:
    tensors, sections = load_checkpoint(path)
    meta = _read_meta(sections, path)
    if meta.get("model") != "visual":
        raise FormatError(f"{path}: not a visual checkpoint")
    model = VisualModel(VisualConfig.from_dict(meta["config"]), meta["frame_shape"])
    _set_params(model, tensors, path)
    return model


def save_state(path, model: StateModel) -> None:
    tensors, sections, meta = state_model_to_checkpoint(model.regressor)
    save_checkpoint(path, tensors, {**sections, **_meta_section({"model": "state", "residual": True, **meta})})


def load_state(path) -> StateModel:
    tensors, sections = load_checkpoint(path)
    meta = _read_meta(sections, path)
    if meta.get("model") != "state":
        raise FormatError(f"{path}: not a state-model checkpoint")
    return StateModel(meta["kind"], state_model_from_checkpoint(tensors, sections, meta))


def save_head(path, head: FusionHead) -> None:
    meta = {"model": "fusion", "config": head.config.to_dict(), "action_dim": head.action_dim,
            "vector_dim": head.vector_dim,
            "frame_shape": list(head.frame_shape) if head.frame_shape is not None else None}
    save_checkpoint(path, head.parameters(), _meta_section(meta))


def load_head(path) -> FusionHead:
    tensors, sections = load_checkpoint(path)
    meta = _read_meta(sections, path)
    if meta.get("model") != "fusion":
        raise FormatError(f"{path}: not a fusion checkpoint")
    head = FusionHead(FusionConfig.from_dict(meta["config"]), meta["action_dim"], meta["vector_dim"],
                      meta["frame_shape"])
    _set_params(head, tensors, path)
    return head


def _set_params(model, tensors, path):
    expected = [p.shape for p in model.parameters()]
    got = [t.shape for t in tensors]
    if expected != got:
        raise ShapeError(f"{path}: parameter shapes {got} do not match the architecture {expected}")
    model.set_parameters([t.astype(np.float32) for t in tensors])


def model_checksum(save_fn, model, scratch: Path) -> str:
    """Digest of a model's serialized form (used for the frozen-upstream check)."""
    save_fn(scratch, model)
    digest = file_digest(scratch)
    scratch.unlink()
    return digest


@dataclass
class Pipeline:
    visual: VisualModel
    state: StateModel
    head: FusionHead
    normalizer: Normalizer
    head_kind: str
    features: FileFeatures | None = None
    manifest: dict = field(default_factory=dict)

    def predict_normalized(self, windows, states, keys=None) -> np.ndarray:
        z_next = self.state.predict(self.normalizer.apply_state(states))
        if self.features is not None:
            if keys is None:
                raise ValueError("file-backed features need sample keys")
            visual_out = self.features.extract_batch(list(keys))
        else:
            frames, bottleneck = self.visual.predict(np.asarray(windows, dtype=np.float32))
            visual_out = frames if self.head_kind == "conv" else bottleneck
        f, v = head_inputs(self.head_kind, visual_out, z_next)
        return self.head.predict(f, v)

    def predict(self, windows, states, keys=None) -> np.ndarray:
        return self.normalizer.invert_action(self.predict_normalized(windows, states, keys))


def predict_action(pipeline: Pipeline, past_images, current_state, key: str | None = None) -> np.ndarray:
    """Denormalized action for one window ``[w, c, h, w]`` and one state vector."""
    past_images = np.asarray(past_images, dtype=np.float32)
    current_state = np.asarray(current_state, dtype=np.float32)
    ws = pipeline.visual.config.window_size
    if past_images.ndim != 4 or len(past_images) != ws:
        raise ShapeError(f"expected a window of {ws} frames, got shape {past_images.shape}")
    if tuple(past_images.shape[1:]) != pipeline.visual.frame_shape:
        raise ShapeError(f"frame shape {past_images.shape[1:]} != {pipeline.visual.frame_shape}")
    if current_state.shape != pipeline.normalizer.state_mean.shape:
        raise ShapeError(f"state length {current_state.shape} != {pipeline.normalizer.state_mean.shape}")
    window = past_images.reshape(1, -1, *past_images.shape[2:])
    return pipeline.predict(window, current_state[None], None if key is None else [key])[0]


def save_bundle(out_dir, config: ExperimentConfig, data: PreparedData, visual: VisualModel,
                state: StateModel, head: FusionHead, features_file=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {"visual_ckpt": "visual.dmlw", "state_ckpt": "state.dmlw", "fusion_ckpt": "fusion.dmlw"}
    if not (out / names["visual_ckpt"]).exists():
        save_visual(out / names["visual_ckpt"], visual)
    if not (out / names["state_ckpt"]).exists():
        save_state(out / names["state_ckpt"], state)
    save_head(out / names["fusion_ckpt"], head)
    doc = {
        "version": BUNDLE_VERSION,
        **names,
        "normalizer": data.normalizer.to_dict(),
        "dataset_hash": data.fingerprint,
        "head_kind": head.config.head_kind,
        "seeds": config.seeds(),
        "state_kind": state.kind,
        "window_size": config.window_size,
        "features_file": str(features_file) if features_file else None,
        "digests": {k: file_digest(out / v) for k, v in names.items()},
        "config": config.to_dict(),
    }
    path = out / "bundle.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path) -> Pipeline:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("bundle", f"cannot read {path}: {exc}") from None
    if doc.get("version") != BUNDLE_VERSION:
        raise StageError("bundle", f"unsupported bundle version {doc.get('version')!r}")
    root = path.parent
    stages = {}
    for stage, key, loader in (("visual", "visual_ckpt", load_visual), ("state", "state_ckpt", load_state),
                               ("fusion", "fusion_ckpt", load_head)):
        ckpt = root / doc[key]
        try:
            stages[stage] = loader(ckpt)
        except (OSError, FormatError, ShapeError, KeyError, ValueError) as exc:
            raise StageError(stage, str(exc)) from None
        want = doc.get("digests", {}).get(key)
        if want and file_digest(ckpt) != want:
            raise StageError(stage, f"{ckpt.name} does not match the digest recorded in the bundle")
    nz = Normalizer.from_dict(doc["normalizer"])
    visual, state, head = stages["visual"], stages["state"], stages["fusion"]
    features = None
    if doc.get("features_file"):
        try:
            features = FileFeatures(doc["features_file"])
        except (OSError, FormatError) as exc:
            raise StageError("features", str(exc)) from None
    _check_geometry(doc, visual, state, head, nz, features)
    return Pipeline(visual, state, head, nz, doc["head_kind"], features, doc)


def _check_geometry(doc, visual, state, head, nz, features):
    if head.config.head_kind != doc["head_kind"]:
        raise StageError("fusion", f"head kind {head.config.head_kind!r} != bundle {doc['head_kind']!r}")
    if visual.config.window_size != doc.get("window_size", visual.config.window_size):
        raise StageError("visual", "window size differs from the bundle")
    state_len = len(nz.state_mean)
    if head.action_dim != len(nz.action_min):
        raise StageError("fusion", f"head emits {head.action_dim} actions, normalizer has {len(nz.action_min)}")
    if doc["head_kind"] == "conv":
        if head.frame_shape != visual.frame_shape:
            raise StageError("fusion", f"head frame {head.frame_shape} != visual frame {visual.frame_shape}")
        if head.vector_dim != state_len:
            raise StageError("fusion", f"head expects {head.vector_dim} state values, normalizer has {state_len}")
    else:
        vis_dim = features.dim if features is not None else visual.feature_dim
        if head.vector_dim != vis_dim + state_len:
            raise StageError("fusion", f"head expects {head.vector_dim} inputs, upstream provides "
                                       f"{vis_dim} + {state_len}")
    n_feat = getattr(state.regressor, "n_features", None)
    if n_feat is None:
        n_feat = state.regressor.weights.shape[1]
    if n_feat != state_len:
        raise StageError("state", f"regressor takes {n_feat} features, normalizer has {state_len}")


# --------------------------------------------------------------------------
# Staged training (CLI ``train``)


def train_stages(config: ExperimentConfig, stage: str, out_dir) -> dict:
    """Train ``visual``, ``state``, ``fusion`` or ``all`` into ``out_dir``.

    Later stages load earlier checkpoints from ``out_dir``; the fusion stage
    verifies they are byte-identical afterwards and writes ``bundle.json``.
    """
    if stage not in ("visual", "state", "fusion", "all"):
        raise ConfigError(f"unknown stage {stage!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(config)
    result = {}
    if stage in ("visual", "all"):
        b, v = data.train, data.val
        model, hist = train_visual(config.visual_config(), b.windows, b.next_images, v.windows, v.next_images)
        save_visual(out / "visual.dmlw", model)
        result["visual_history"] = hist
    if stage in ("state", "all"):
        model = train_state_model(config.state_model, config, data)
        save_state(out / "state.dmlw", model)
    if stage in ("fusion", "all"):
        try:
            visual = load_visual(out / "visual.dmlw")
        except (OSError, FormatError, ShapeError) as exc:
            raise StageError("visual", f"train the visual stage first ({exc})") from None
        try:
            state = load_state(out / "state.dmlw")
        except (OSError, FormatError, ShapeError) as exc:
            raise StageError("state", f"train the state stage first ({exc})") from None
        before = {n: file_digest(out / n) for n in ("visual.dmlw", "state.dmlw")}
        features = FileFeatures(config.features_file) if config.features_file else None
        backend = "file" if features is not None else "encoder"
        head_kind = "mlp" if features is not None else config.head_kind
        cache = UpstreamCache(data, visual, {state.kind: state}, features)
        head, hist = fit_head(config, cache, backend, head_kind, state.kind)
        after = {n: model_checksum(fn, m, out / f".check-{n}") for n, fn, m in
                 (("visual.dmlw", save_visual, visual), ("state.dmlw", save_state, state))}
        if before != after:
            raise StageError("fusion", "upstream checkpoints changed during fusion training")
        result["bundle"] = str(save_bundle(out, config, data, visual, state, head, config.features_file))
        result["fusion_history"] = hist
    return result


# --------------------------------------------------------------------------
# Evaluation


def evaluate(pipeline: Pipeline, batch: SampleBatch, split: str = "test", label: str = "pipeline") -> dict:
    """Normalized (headline) and denormalized action metrics of a pipeline on a batch."""
    if len(batch) == 0:
        raise ValueError(f"split {split!r} is empty")
    nz = pipeline.normalizer
    pred = pipeline.predict_normalized(batch.windows, batch.states, batch.keys)
    norm = compute_metrics(pred, nz.apply_action(batch.actions), model=label, split=split)
    denorm = compute_metrics(nz.invert_action(pred), batch.actions, model=label, split=split)
    return {"normalized": norm, "denormalized": denorm}


def evaluate_bundle(bundle_path, data_path, split: str) -> dict:
    pipeline = load_bundle(bundle_path)
    trajs = load_dataset(data_path)
    if dataset_fingerprint(trajs) != pipeline.manifest["dataset_hash"]:
        log.warning("dataset fingerprint differs from the one the bundle was trained on")
    cfg = ExperimentConfig.from_dict(pipeline.manifest["config"])
    data = prepare_data(cfg, trajs)
    return evaluate(pipeline, data.split(split), split)


# --------------------------------------------------------------------------
# Comparison runner


@dataclass
class Cell:
    visual_backend: str
    state_model: str
    status: str = "ok"
    normalized: MetricsReport | None = None
    denormalized: MetricsReport | None = None
    error: str | None = None

    @property
    def label(self) -> str:
        return f"{self.visual_backend} + {self.state_model}"


@dataclass
class ComparisonResult:
    report: dict
    cells: list[Cell]
    text: str

    @property
    def ok(self) -> bool:
        return all(c.status == "ok" for c in self.cells) and self.report.get("status") == "ok"


def _metrics_dict(m: MetricsReport | None):
    if m is None:
        return None
    return {"mse": m.mse, "mae": m.mae, "rmse": m.rmse, "n": m.n}


def run_comparison(config: ExperimentConfig, out_dir=None) -> ComparisonResult:
    """Train and score every (visual backend x state model) cell plus the unimodal ablations.

    A failing cell is recorded as failed and the remaining cells still run.
    """
    data = prepare_data(config)
    b, v, t = data.train, data.val, data.test
    visual, _ = train_visual(config.visual_config(), b.windows, b.next_images, v.windows, v.next_images)
    visual_row = {
        "model": "encoder-decoder",
        "test": _metrics_dict(compute_metrics(visual.predict(t.windows)[0].reshape(len(t), -1),
                                              t.next_images.reshape(len(t), -1), split="test")),
        "mean_image_baseline_mse": mean_image_baseline(b.next_images, t.next_images),
    }
    kinds = list(dict.fromkeys(config.grid_state_models))
    state_models, state_rows = {}, []
    for kind in kinds:
        state_models[kind] = train_state_model(kind, config, data)
        state_rows.append({"model": kind, "test": _metrics_dict(state_metrics(state_models[kind], data, "test"))})
    features = FileFeatures(config.features_file) if config.features_file else None
    cache = UpstreamCache(data, visual, state_models, features)

    backends = ["encoder"] + (["file"] if features is not None else [])
    cells = [Cell(bk, kind) for bk in backends for kind in kinds]

    def run_cell(cell: Cell) -> Cell:
        head_kind = "mlp" if cell.visual_backend == "file" else config.head_kind
        try:
            head, _ = fit_head(config, cache, cell.visual_backend, head_kind, cell.state_model)
            m = head_metrics(head, cache, cell.visual_backend, head_kind, cell.state_model, "test", label=cell.label)
            cell.normalized, cell.denormalized = m["normalized"], m["denormalized"]
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.error("cell %s failed: %s", cell.label, exc)
            cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
        return cell

    jobs = [(run_cell, c) for c in cells]
    ablation_rows = []
    if config.ablations:
        primary = config.state_model if config.state_model in kinds else kinds[0]
        for modality in ("image", "state"):
            cell = Cell("encoder", primary)
            jobs.append((lambda c, m=modality: _run_ablation(config, cache, c, m), cell))
            ablation_rows.append((modality, cell))
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPool(workers) as pool:
            pool.starmap(lambda fn, c: fn(c), jobs)
    else:
        for fn, c in jobs:
            fn(c)

    report = {
        "version": REPORT_VERSION,
        "columns": ["mse", "mae", "rmse"],
        "metric_averaging": "element-wise mean over all N x A residuals; headline on [-1, 1] normalized actions",
        "dataset_hash": data.fingerprint,
        "config": config.to_dict(),
        "seeds": config.seeds(),
        "visual": visual_row,
        "state": state_rows,
        "grid": [_cell_dict(c) for c in cells],
        "ablations": [],
    }
    if ablation_rows:
        fusion_cell = next(c for c in cells if c.visual_backend == "encoder"
                           and c.state_model == ablation_rows[0][1].state_model)
        report["ablations"] = [{**_cell_dict(fusion_cell), "modality": "both"}] + \
            [{**_cell_dict(c), "modality": m} for m, c in ablation_rows]
    all_cells = cells + [c for _, c in ablation_rows]
    report["status"] = "ok" if all(c.status == "ok" for c in all_cells) else "failed"
    text = format_report(report)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report_json(report))
        (out / "report.txt").write_text(text)
    return ComparisonResult(report, all_cells, text)


def _run_ablation(config, cache, cell: Cell, modality: str) -> Cell:
    try:
        head, _ = fit_head(config, cache, "encoder", config.head_kind, cell.state_model, modality)
        m = head_metrics(head, cache, "encoder", config.head_kind, cell.state_model, "test", modality,
                         label=f"{modality}-only")
        cell.normalized, cell.denormalized = m["normalized"], m["denormalized"]
    except Exception as exc:  # noqa: BLE001
        cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
    return cell


def _cell_dict(c: Cell) -> dict:
    return {"visual_backend": c.visual_backend, "state_model": c.state_model, "status": c.status,
            "normalized": _metrics_dict(c.normalized), "denormalized": _metrics_dict(c.denormalized),
            "error": c.error}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_digest(report: dict) -> str:
    return hashlib.sha256(report_json(report).encode()).hexdigest()


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.5g}"


def _table(title: str, header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return [title, line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in rows] + [""]


def format_report(report: dict) -> str:
    cols = ["MSE", "MAE", "RMSE"]
    out = []
    vis = report["visual"]
    out += _table("Model 1: next-frame prediction (per-pixel, test)", ["Model"] + cols, [
        [vis["model"]] + [_fmt(vis["test"][k]) for k in ("mse", "mae", "rmse")],
        ["mean image", _fmt(vis["mean_image_baseline_mse"]), "-", _fmt(vis["mean_image_baseline_mse"] ** 0.5)],
    ])
    out += _table("Model 2: next-state prediction (normalized, test)", ["Model"] + cols,
                  [[r["model"]] + [_fmt(r["test"][k]) for k in ("mse", "mae", "rmse")] for r in report["state"]])

    def cell_row(c, name):
        if c["status"] != "ok":
            return [name, "failed", "failed", "failed"]
        return [name] + [_fmt(c["normalized"][k]) for k in ("mse", "mae", "rmse")]

    out += _table("Model 3: fusion (normalized actions, test)", ["Model Combination"] + cols,
                  [cell_row(c, f"{c['visual_backend']} + {c['state_model']}") for c in report["grid"]])
    if report["ablations"]:
        out += _table("Ablations (normalized actions, test)", ["Inputs"] + cols,
                      [cell_row(c, c["modality"]) for c in report["ablations"]])
    return "\n".join(out)
