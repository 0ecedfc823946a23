import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armfusion.dataset import (
    DatasetError,
    RobotState,
    Trajectory,
    batch_from_trajectories,
    fit_normalizer,
    load_dataset,
    save_dataset,
    split_dataset,
    split_sizes,
    window_samples,
)


def make_traj(tid, steps, j=2, a=2, size=4, seed=0):
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((steps, 3 * j + 1)).astype(np.float32)
    states[:, -1] = rng.uniform(0, 1, steps)
    return Trajectory(
        tid, "env",
        images=rng.uniform(0, 1, (steps, 1, size, size)).astype(np.float32),
        states=states,
        actions=rng.standard_normal((steps, a)).astype(np.float32),
    )


def tagged_traj(tid, steps, tag):
    """Every array element encodes (tag, step) so windows can be traced back."""
    vals = tag * 1000 + np.arange(steps, dtype=np.float32)
    return Trajectory(tid, "env",
                      images=np.broadcast_to((vals / 1e5)[:, None, None, None], (steps, 1, 2, 2)).copy(),
                      states=np.stack([vals] * 3 + [np.zeros(steps, np.float32)], axis=1),
                      actions=vals[:, None].copy())


# ---- manifest round trip -------------------------------------------------


def test_empty_manifest_loads_empty_list(tmp_path):
    save_dataset([], tmp_path)
    assert load_dataset(tmp_path / "manifest.json") == []


def test_round_trip_is_bit_exact(tmp_path):
    traj = make_traj("t0", 5, j=6)
    save_dataset([traj], tmp_path)
    (back,) = load_dataset(tmp_path)
    assert back.id == "t0" and back.environment_id == "env"
    for name in ("images", "states", "actions"):
        a, b = getattr(traj, name), getattr(back, name)
        assert a.dtype == b.dtype and np.array_equal(a.view(np.uint32), b.view(np.uint32))


def test_manifest_layout_matches_schema(tmp_path):
    save_dataset([make_traj("a", 4, j=6), make_traj("b", 6, j=6, seed=1)], tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert set(doc) == {"format_version", "joint_count", "action_dim", "image", "trajectories"}
    assert doc["joint_count"] == 6 and doc["image"] == {"h": 4, "w": 4, "c": 1}
    assert [t["id"] for t in doc["trajectories"]] == ["a", "b"]
    assert set(doc["trajectories"][0]["files"]) == {"images", "states", "actions"}
    assert [t.id for t in load_dataset(tmp_path)] == ["a", "b"]


def test_missing_tensor_file_names_trajectory(tmp_path):
    save_dataset([make_traj("lost", 4)], tmp_path)
    (tmp_path / "lost.states.dmlt").unlink()
    with pytest.raises(DatasetError, match="lost"):
        load_dataset(tmp_path)


def test_mismatched_joint_count_rejected_with_step(tmp_path):
    save_dataset([make_traj("a", 4, j=2), make_traj("b", 4, j=2)], tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["joint_count"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match=r"trajectory a step 0"):
        load_dataset(tmp_path)


def test_invalid_pixel_reports_step(tmp_path):
    traj = make_traj("px", 5)
    traj.images[3, 0, 1, 1] = 1.5
    with pytest.raises(DatasetError, match="px step 3"):
        traj.validate()


def test_invalid_manifest_rejected(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1}))
    with pytest.raises(DatasetError, match="invalid manifest"):
        load_dataset(tmp_path)


def test_robot_state_vector_layout():
    s = RobotState(np.array([1.0, 2]), np.array([3.0, 4]), np.array([5.0, 6]), 0.5)
    assert s.to_vector().tolist() == [1, 2, 3, 4, 5, 6, 0.5]
    assert RobotState.from_vector(s.to_vector(), 2).gripper == 0.5
    with pytest.raises(DatasetError):
        RobotState(np.zeros(2), np.zeros(3), np.zeros(2))


# ---- windowing -------------------------------------------------------------


@pytest.mark.parametrize("steps,expected", [(50, 47), (3, 0), (2, 0), (4, 1)])
def test_window_sample_count(steps, expected):
    assert len(window_samples(make_traj("t", steps), 3)) == expected


def test_four_step_window_targets_step_three():
    traj = tagged_traj("t", 4, 0)
    (s,) = window_samples(traj, 3)
    assert s.current_state[0] == 2
    assert s.target_next_state[0] == 3
    assert s.target_next_image[0, 0, 0] == pytest.approx(3 / 1e5)
    assert s.target_action[0] == 2
    assert s.key == "t:0"


def test_windows_never_cross_trajectories():
    trajs = [tagged_traj(f"t{k}", 6 + k, k) for k in range(4)]
    batch = batch_from_trajectories(trajs, 3)
    codes = np.round(batch.windows.reshape(len(batch), -1).astype(np.float64) * 1e5)
    tags = np.floor(codes / 1000)
    # all pixels of a window and its targets share one trajectory tag
    assert np.all(tags == tags[:, :1])
    assert np.all(np.floor(batch.next_states[:, 0] / 1000) == tags[:, 0])
    steps = np.round(batch.windows[:, :, 0, 0].astype(np.float64) * 1e5) % 1000
    assert np.all(np.diff(steps, axis=1) == 1)


# ---- normalizer -------------------------------------------------------------


def test_normalizer_hand_values_and_constant_dims():
    t = Trajectory("t", "e", np.zeros((2, 1, 2, 2), np.float32),
                   states=np.array([[0, 5, 0, 0, 0, 0, 0], [2, 5, 0, 0, 0, 0, 0]], np.float32),
                   actions=np.array([[-3.0], [1.0]], np.float32))
    nz = fit_normalizer([t])
    z = nz.apply_state(t.states)
    assert z[:, 0].tolist() == [-1, 1]
    assert nz.state_std[1] == 1.0 and np.all(z[:, 1] == 0)
    assert nz.apply_action(t.actions).ravel().tolist() == [-1, 1]
    with pytest.raises(DatasetError):
        nz.apply_state(np.zeros(3))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_normalizer_round_trip(seed):
    rng = np.random.default_rng(seed)
    trajs = [make_traj(f"t{i}", 6, seed=seed + i) for i in range(3)]
    nz = fit_normalizer(trajs)
    x = rng.standard_normal((20, 7)) * 3
    a = rng.standard_normal((20, 2)) * 3
    assert np.allclose(nz.invert_state(nz.apply_state(x)), x, atol=1e-6)
    assert np.allclose(nz.invert_action(nz.apply_action(a)), a, atol=1e-6)
    train_actions = np.concatenate([t.actions for t in trajs])
    za = nz.apply_action(train_actions)
    assert za.min() >= -1 - 1e-12 and za.max() <= 1 + 1e-12


# ---- splits --------------------------------------------------------------------


def test_split_sizes_largest_remainder():
    assert split_sizes(10, (0.7, 0.15, 0.15)) == [7, 1, 2]
    assert split_sizes(10, (1, 0, 0)) == [10, 0, 0]
    assert split_sizes(200, (0.7, 0.15, 0.15)) == [140, 30, 30]
    assert split_sizes(3, (0.8, 0.1, 0.1)) == [1, 1, 1]


def test_split_errors():
    with pytest.raises(DatasetError):
        split_sizes(2, (0.7, 0.15, 0.15))
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.2, 0.2))


@given(st.integers(3, 60), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_split_is_disjoint_exhaustive_and_deterministic(n, seed):
    trajs = [make_traj(f"t{i}", 1) for i in range(n)]
    parts = split_dataset(trajs, (0.7, 0.15, 0.15), seed)
    ids = [t.id for p in parts for t in p]
    assert sorted(ids) == sorted(t.id for t in trajs) and len(set(ids)) == n
    again = split_dataset(trajs, (0.7, 0.15, 0.15), seed)
    assert [[t.id for t in p] for p in parts] == [[t.id for t in p] for p in again]
    assert all(len(p) > 0 for p in parts)
