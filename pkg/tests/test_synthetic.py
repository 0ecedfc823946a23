import numpy as np
import pytest

from armfusion.dataset import state_dim
from armfusion.synthetic import (
    SyntheticConfig,
    control_torque,
    forward_kinematics,
    generate_synthetic,
    jacobian,
    render_frame,
    simulate_episode,
)

SMALL = SyntheticConfig(n_traj=6, steps_per_traj=12, image_size=16, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL)


def test_seeded_generation_is_bit_identical(small):
    again = generate_synthetic(SMALL)
    for a, b in zip(small, again):
        for name in ("images", "states", "actions"):
            assert np.array_equal(getattr(a, name), getattr(b, name))


def test_shapes_and_ranges(small):
    assert len(small) == 6
    for t in small:
        assert t.images.shape == (12, 1, 16, 16)
        assert t.states.shape == (12, state_dim(6))
        assert t.actions.shape == (12, 2)
        assert t.images.min() >= 0 and t.images.max() <= 1
        t.validate(6, 2, (1, 16, 16))
        # joints beyond the planar two are zero padding
        j = t.joint_count
        for block in (t.states[:, 2:j], t.states[:, j + 2 : 2 * j], t.states[:, 2 * j + 2 : 3 * j]):
            assert np.all(block == 0)


def test_dynamics_replay_oracle(small):
    """Replaying theta += omega*dt, omega += action*dt reproduces every stored next state."""
    dt = SMALL.dt
    for t in small:
        j = t.joint_count
        th = t.states[:, 0:2].astype(np.float64)
        om = t.states[:, j : j + 2].astype(np.float64)
        a = t.actions.astype(np.float64)
        assert np.max(np.abs(th[1:] - (th[:-1] + om[:-1] * dt))) < 1e-6
        assert np.max(np.abs(om[1:] - (om[:-1] + a[:-1] * dt))) < 1e-6


def test_zero_torque_episode_keeps_pose():
    theta0 = np.array([0.4, 1.1])
    _, ee = forward_kinematics(theta0)
    traj = simulate_episode(theta0, np.zeros(2), ee, 10, SMALL)
    assert np.all(traj.states[:, 0:2] == traj.states[0, 0:2])
    assert np.allclose(traj.actions, 0, atol=1e-6)


def test_action_needs_both_target_and_state():
    theta = np.array([0.3, 1.0])
    omega = np.array([0.5, -0.2])
    a1 = control_torque(theta, omega, np.array([0.5, 0.2]), 8.0, 2.0)
    a2 = control_torque(theta, omega, np.array([-0.4, 0.6]), 8.0, 2.0)
    a3 = control_torque(theta + [1.0, 0], omega, np.array([0.5, 0.2]), 8.0, 2.0)
    assert not np.allclose(a1, a2) and not np.allclose(a1, a3)


def test_jacobian_matches_finite_differences():
    theta = np.array([0.7, -0.4])
    num = np.zeros((2, 2))
    for k in range(2):
        d = np.zeros(2)
        d[k] = 1e-6
        num[:, k] = (forward_kinematics(theta + d)[1] - forward_kinematics(theta - d)[1]) / 2e-6
    assert np.allclose(jacobian(theta), num, atol=1e-8)


def test_blob_marks_the_target():
    frame = render_frame(np.array([np.pi, 0.5]), np.array([0.6, 0.6]), 32)
    i, j = np.unravel_index(np.argmax(frame[0]), frame[0].shape)
    assert frame[0, i, j] == pytest.approx(1.0, abs=0.05)
    # upper-right quadrant in image coordinates (row 0 at the top)
    assert i < 16 and j > 16


def test_preconditions():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(image_size=8))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(steps_per_traj=3))
