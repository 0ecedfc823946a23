"""Trajectory data model, on-disk manifest format, windowing, normalization and splits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .io import load_tensor, save_tensor

MANIFEST_VERSION = 1
DEFAULT_WINDOW = 3


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RobotState:
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    joint_efforts: np.ndarray
    gripper: float = 0.0

    def __post_init__(self):
        n = {len(self.joint_positions), len(self.joint_velocities), len(self.joint_efforts)}
        if len(n) != 1:
            raise DatasetError("joint position, velocity and effort vectors differ in length")
        if not np.all(np.isfinite(self.to_vector())):
            raise DatasetError("robot state has non-finite components")

    @property
    def joint_count(self) -> int:
        return len(self.joint_positions)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.joint_positions, self.joint_velocities, self.joint_efforts,
                               [self.gripper]]).astype(np.float32)

    @classmethod
    def from_vector(cls, vec, joint_count: int) -> "RobotState":
        vec = np.asarray(vec)
        if vec.shape != (state_dim(joint_count),):
            raise DatasetError(f"state vector of length {vec.shape} does not match J={joint_count}")
        j = joint_count
        return cls(vec[:j], vec[j : 2 * j], vec[2 * j : 3 * j], float(vec[3 * j]))


def state_dim(joint_count: int) -> int:
    return 3 * joint_count + 1


@dataclass
class Trajectory:
    """One episode stored column-wise.

    ``images`` is ``[T, c, h, w]`` with pixels in [0, 1], ``states`` is
    ``[T, 3J+1]`` laid out as positions, velocities, efforts, gripper, and
    ``actions`` is ``[T, A]``.
    """

    id: str
    environment_id: str
    images: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.images)

    @property
    def joint_count(self) -> int:
        return (self.states.shape[1] - 1) // 3

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def state(self, step: int) -> RobotState:
        return RobotState.from_vector(self.states[step], self.joint_count)

    def validate(self, joint_count=None, action_dim=None, image_shape=None) -> None:
        tid = self.id
        if self.images.ndim != 4:
            raise DatasetError(f"trajectory {tid}: images must be [steps, c, h, w], got {self.images.shape}")
        steps = len(self.images)
        for name, arr in (("states", self.states), ("actions", self.actions)):
            if arr.ndim != 2 or len(arr) != steps:
                raise DatasetError(f"trajectory {tid}: {name} shape {arr.shape} does not cover {steps} steps")
        if image_shape is not None and tuple(self.images.shape[1:]) != tuple(image_shape):
            raise DatasetError(f"trajectory {tid} step 0: image geometry {self.images.shape[1:]} != {tuple(image_shape)}")
        if self.images.shape[1] not in (1, 3):
            raise DatasetError(f"trajectory {tid} step 0: images need 1 or 3 channels")
        if joint_count is not None and self.states.shape[1] != state_dim(joint_count):
            raise DatasetError(f"trajectory {tid} step 0: state width {self.states.shape[1]} "
                               f"!= 3*J+1 for J={joint_count}")
        if (self.states.shape[1] - 1) % 3:
            raise DatasetError(f"trajectory {tid} step 0: state width {self.states.shape[1]} is not 3*J+1")
        if action_dim is not None and self.actions.shape[1] != action_dim:
            raise DatasetError(f"trajectory {tid} step 0: action width {self.actions.shape[1]} != {action_dim}")
        _first_bad(tid, "non-finite pixel", ~np.isfinite(self.images).reshape(steps, -1).all(axis=1))
        _first_bad(tid, "pixel outside [0, 1]",
                   ((self.images < 0) | (self.images > 1)).reshape(steps, -1).any(axis=1))
        _first_bad(tid, "non-finite state", ~np.isfinite(self.states).all(axis=1))
        g = self.states[:, -1]
        _first_bad(tid, "gripper outside [0, 1]", (g < 0) | (g > 1))
        _first_bad(tid, "non-finite action", ~np.isfinite(self.actions).all(axis=1))


def _first_bad(tid, what, mask):
    bad = np.flatnonzero(mask)
    if bad.size:
        raise DatasetError(f"trajectory {tid} step {int(bad[0])}: {what}")


@dataclass(frozen=True)
class Sample:
    trajectory_id: str
    start: int
    past_images: np.ndarray
    current_state: np.ndarray
    target_next_image: np.ndarray
    target_next_state: np.ndarray
    target_action: np.ndarray

    @property
    def key(self) -> str:
        return sample_key(self.trajectory_id, self.start)


def sample_key(trajectory_id: str, start: int) -> str:
    return f"{trajectory_id}:{start}"


def window_samples(traj: Trajectory, window_size: int = DEFAULT_WINDOW) -> list[Sample]:
    """Sample ``i`` covers steps ``i .. i+w-1``; next-step targets sit at ``i+w``."""
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    out = []
    for i in range(max(0, len(traj) - window_size)):
        last = i + window_size - 1
        out.append(Sample(
            trajectory_id=traj.id,
            start=i,
            past_images=traj.images[i : i + window_size],
            current_state=traj.states[last],
            target_next_image=traj.images[last + 1],
            target_next_state=traj.states[last + 1],
            target_action=traj.actions[last],
        ))
    return out


@dataclass
class SampleBatch:
    """Stacked samples; the window is fused by channel stacking."""

    keys: list[str]
    windows: np.ndarray  # [N, w*c, h, w]
    states: np.ndarray
    next_images: np.ndarray
    next_states: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.keys)


def stack_samples(samples: Sequence[Sample]) -> SampleBatch:
    if not samples:
        raise DatasetError("no samples to stack")
    windows = np.stack([s.past_images for s in samples])
    n, w, c, h, wd = windows.shape
    return SampleBatch(
        keys=[s.key for s in samples],
        windows=windows.reshape(n, w * c, h, wd).astype(np.float32),
        states=np.stack([s.current_state for s in samples]).astype(np.float32),
        next_images=np.stack([s.target_next_image for s in samples]).astype(np.float32),
        next_states=np.stack([s.target_next_state for s in samples]).astype(np.float32),
        actions=np.stack([s.target_action for s in samples]).astype(np.float32),
    )


def batch_from_trajectories(trajectories, window_size=DEFAULT_WINDOW) -> SampleBatch:
    return stack_samples([s for t in trajectories for s in window_samples(t, window_size)])


# --------------------------------------------------------------------------
# Normalization


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray

    def _check(self, x, ref, what):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != len(ref):
            raise DatasetError(f"{what} has dimension {x.shape[-1]}, normalizer expects {len(ref)}")
        return x

    def apply_state(self, x):
        x = self._check(x, self.state_mean, "state")
        return (x - self.state_mean) / self.state_std

    def invert_state(self, z):
        z = self._check(z, self.state_mean, "state")
        return z * self.state_std + self.state_mean

    def apply_action(self, a):
        a = self._check(a, self.action_min, "action")
        span = self.action_max - self.action_min
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, 2.0 * (a - self.action_min) / safe - 1.0, 0.0)

    def invert_action(self, z):
        z = self._check(z, self.action_min, "action")
        span = self.action_max - self.action_min
        return (z + 1.0) * 0.5 * span + self.action_min

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("state_mean", "state_std", "action_min", "action_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(d[k], dtype=np.float64)
                      for k in ("state_mean", "state_std", "action_min", "action_max")})


def fit_normalizer(train: Sequence[Trajectory]) -> Normalizer:
    """Fit on the training split only; zero-variance state dims get std 1."""
    if not train:
        raise DatasetError("cannot fit a normalizer on zero trajectories")
    states = np.concatenate([t.states for t in train]).astype(np.float64)
    actions = np.concatenate([t.actions for t in train]).astype(np.float64)
    std = states.std(axis=0)
    return Normalizer(
        state_mean=states.mean(axis=0),
        state_std=np.where(std > 0, std, 1.0),
        action_min=actions.min(axis=0),
        action_max=actions.max(axis=0),
    )


# --------------------------------------------------------------------------
# Splits


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; equal remainders favour later partitions.

    Every partition with a positive ratio receives at least one trajectory.
    """
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    nonzero = [i for i, r in enumerate(ratios) if r > 0]
    if n < len(nonzero):
        raise DatasetError(f"{n} trajectories cannot fill {len(nonzero)} non-empty partitions")
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q + 1e-9)) for q in quotas]
    rema = [round(q - s, 9) for q, s in zip(quotas, sizes)]
    order = sorted(range(len(ratios)), key=lambda i: (-rema[i], -i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in nonzero:
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda k: (sizes[k], -k))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_dataset(trajectories: Sequence[Trajectory], ratios=(0.7, 0.15, 0.15), seed: int = 0):
    """Partition whole trajectories into (train, val, test)."""
    sizes = split_sizes(len(trajectories), ratios)
    perm = np.random.default_rng(seed).permutation(len(trajectories))
    parts, start = [], 0
    for size in sizes:
        idx = sorted(perm[start : start + size])
        parts.append([trajectories[i] for i in idx])
        start += size
    return tuple(parts)


# --------------------------------------------------------------------------
# Manifest format

_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "joint_count", "action_dim", "image", "trajectories"],
    "properties": {
        "format_version": {"const": MANIFEST_VERSION},
        "joint_count": {"type": "integer", "minimum": 1},
        "action_dim": {"type": "integer", "minimum": 1},
        "image": {
            "type": "object",
            "required": ["h", "w", "c"],
            "properties": {"h": {"type": "integer", "minimum": 1},
                           "w": {"type": "integer", "minimum": 1},
                           "c": {"enum": [1, 3]}},
        },
        "trajectories": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "environment_id", "steps", "files"],
                "properties": {
                    "id": {"type": "string"},
                    "environment_id": {"type": "string"},
                    "steps": {"type": "integer", "minimum": 0},
                    "files": {
                        "type": "object",
                        "required": ["images", "states", "actions"],
                        "properties": {k: {"type": "string"} for k in ("images", "states", "actions")},
                    },
                },
            },
        },
    },
}


def save_dataset(trajectories: Sequence[Trajectory], out_dir, manifest_name="manifest.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if trajectories:
        first = trajectories[0]
        j, a, (c, h, w) = first.joint_count, first.action_dim, first.image_shape
    else:
        j, a, (c, h, w) = 1, 1, (1, 1, 1)
    entries = []
    for t in trajectories:
        t.validate(j, a, (c, h, w))
        files = {}
        for kind in ("images", "states", "actions"):
            name = f"{t.id}.{kind}.dmlt"
            save_tensor(out / name, getattr(t, kind))
            files[kind] = name
        entries.append({"id": t.id, "environment_id": t.environment_id, "steps": len(t), "files": files})
    manifest = {"format_version": MANIFEST_VERSION, "joint_count": j, "action_dim": a,
                "image": {"h": h, "w": w, "c": c}, "trajectories": entries}
    path = out / manifest_name
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(manifest_path) -> list[Trajectory]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    try:
        jsonschema.validate(manifest, _MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DatasetError(f"invalid manifest {path}: {exc.message}") from None
    img = manifest["image"]
    shape = (img["c"], img["h"], img["w"])
    out = []
    for entry in manifest["trajectories"]:
        arrays = {}
        for kind, name in entry["files"].items():
            fp = path.parent / name
            if not fp.exists():
                raise DatasetError(f"trajectory {entry['id']}: missing {kind} file {name}")
            arrays[kind] = load_tensor(fp)
        traj = Trajectory(entry["id"], entry["environment_id"], **arrays)
        if len(traj.images) != entry["steps"]:
            raise DatasetError(f"trajectory {entry['id']}: manifest says {entry['steps']} steps, "
                               f"images hold {len(traj.images)}")
        traj.validate(manifest["joint_count"], manifest["action_dim"], shape)
        out.append(traj)
    return out


def dataset_fingerprint(trajectories: Sequence[Trajectory]) -> str:
    h = hashlib.sha256()
    for t in trajectories:
        h.update(t.id.encode() + b"\0" + t.environment_id.encode() + b"\0")
        for arr in (t.images, t.states, t.actions):
            a = np.ascontiguousarray(arr, dtype="<f4")
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()
