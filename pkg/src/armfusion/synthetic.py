"""Synthetic two-link planar arm episodes.

Each episode draws a target point that is rendered into every frame as a bright
blob. The commanded torque is a Jacobian-transpose proportional law toward the
target plus velocity damping, so the correct action needs both the target
(image only) and the joint velocities (state only).

Joint efforts in the state are the static load torques of the arm held in a
vertical plane, a function of the joint angles alone. They deliberately do not
echo the command torque, which would let the state reveal the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DEFAULT_WINDOW, Trajectory

LINK_LENGTHS = (0.5, 0.5)
LOAD_GAINS = (1.0, 0.5)
VIEW_EXTENT = 1.1


@dataclass(frozen=True)
class SyntheticConfig:
    n_traj: int = 200
    steps_per_traj: int = 50
    image_size: int = 32
    seed: int = 7
    joint_count: int = 6
    dt: float = 0.05
    kp: float = 8.0
    kd: float = 2.0
    omega_scale: float = 6.0
    blob_sigma: float = 3.0
    window_size: int = DEFAULT_WINDOW


def forward_kinematics(theta):
    """Elbow and end-effector positions for angles ``theta = [..., 2]``."""
    theta = np.asarray(theta, dtype=np.float64)
    l1, l2 = LINK_LENGTHS
    t1, t12 = theta[..., 0], theta[..., 0] + theta[..., 1]
    elbow = np.stack([l1 * np.cos(t1), l1 * np.sin(t1)], axis=-1)
    ee = elbow + np.stack([l2 * np.cos(t12), l2 * np.sin(t12)], axis=-1)
    return elbow, ee


def jacobian(theta):
    l1, l2 = LINK_LENGTHS
    t1, t12 = theta[0], theta[0] + theta[1]
    return np.array([
        [-l1 * np.sin(t1) - l2 * np.sin(t12), -l2 * np.sin(t12)],
        [l1 * np.cos(t1) + l2 * np.cos(t12), l2 * np.cos(t12)],
    ])


def control_torque(theta, omega, target, kp, kd):
    _, ee = forward_kinematics(theta)
    return kp * jacobian(theta).T @ (np.asarray(target) - ee) - kd * np.asarray(omega)


def load_torque(theta):
    g1, g2 = LOAD_GAINS
    c12 = np.cos(theta[0] + theta[1])
    return np.array([g1 * np.cos(theta[0]) + g2 * c12, g2 * c12])


def _pixel_grid(size):
    centers = -VIEW_EXTENT + (np.arange(size) + 0.5) * (2 * VIEW_EXTENT / size)
    x = centers[None, :]
    y = centers[::-1, None]
    return np.broadcast_to(x, (size, size)), np.broadcast_to(y, (size, size))


def _segment_distance(px, py, a, b):
    ab = b - a
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / max(float(ab @ ab), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render_frame(theta, target, size, blob_sigma=3.0) -> np.ndarray:
    """Grayscale ``[1, size, size]`` frame: target blob at 1.0, links at 0.6.

    ``blob_sigma`` is the blob's Gaussian width in pixels.
    """
    px, py = _pixel_grid(size)
    pix = 2 * VIEW_EXTENT / size
    elbow, ee = forward_kinematics(theta)
    base = np.zeros(2)
    d = np.minimum(_segment_distance(px, py, base, elbow), _segment_distance(px, py, elbow, ee))
    links = 0.6 * np.exp(-0.5 * (d / (0.6 * pix)) ** 2)
    blob = np.exp(-0.5 * ((px - target[0]) ** 2 + (py - target[1]) ** 2) / (blob_sigma * pix) ** 2)
    return np.clip(np.maximum(links, blob), 0.0, 1.0)[None].astype(np.float32)


def step_dynamics(theta, omega, action, dt):
    """Explicit Euler: ``theta += omega*dt`` then ``omega += action*dt`` (old omega)."""
    return theta + omega * dt, omega + action * dt


def simulate_episode(theta0, omega0, target, steps, config: SyntheticConfig = SyntheticConfig(),
                     traj_id="traj", environment_id="synthetic-arm") -> Trajectory:
    j = config.joint_count
    if j < 2:
        raise ValueError("joint_count must be at least 2 for the planar arm")
    target = np.asarray(target, dtype=np.float64)
    theta = np.asarray(theta0, dtype=np.float32).astype(np.float64)
    omega = np.asarray(omega0, dtype=np.float32).astype(np.float64)
    images = np.empty((steps, 1, config.image_size, config.image_size), np.float32)
    states = np.zeros((steps, 3 * j + 1), np.float32)
    actions = np.empty((steps, 2), np.float32)
    for t in range(steps):
        action = control_torque(theta, omega, target, config.kp, config.kd).astype(np.float32)
        images[t] = render_frame(theta, target, config.image_size, config.blob_sigma)
        states[t, 0:2] = theta
        states[t, j : j + 2] = omega
        states[t, 2 * j : 2 * j + 2] = load_torque(theta)
        actions[t] = action
        # round-trip through float32 so stored values replay the dynamics exactly
        theta, omega = step_dynamics(theta, omega, action.astype(np.float64), config.dt)
        theta = theta.astype(np.float32).astype(np.float64)
        omega = omega.astype(np.float32).astype(np.float64)
    return Trajectory(traj_id, environment_id, images, states, actions)


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> list[Trajectory]:
    if config.image_size < 16:
        raise ValueError("image_size must be >= 16")
    if config.steps_per_traj < config.window_size + 1:
        raise ValueError(f"steps_per_traj must be >= {config.window_size + 1}")
    rng = np.random.default_rng(config.seed)
    out = []
    for k in range(config.n_traj):
        theta0 = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(0.3, 2.8)])
        omega0 = rng.uniform(-config.omega_scale, config.omega_scale, size=2)
        radius, angle = rng.uniform(0.25, 0.95), rng.uniform(-np.pi, np.pi)
        target = radius * np.array([np.cos(angle), np.sin(angle)])
        out.append(simulate_episode(theta0, omega0, target, config.steps_per_traj, config,
                                    traj_id=f"traj{k:05d}"))
    return out
