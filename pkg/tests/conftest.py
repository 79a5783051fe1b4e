import numpy as np
import pytest

from pano_ba.camera import CameraModel, PanoramaGeometry
from pano_ba.events import ResidualPairs, pair_events
from pano_ba.pano_map import PanoramaMap, build_valid_mask
from pano_ba.photometric import OptState
from pano_ba.simulate import EGMParams, simulate_events
from pano_ba.so3 import RotationTrajectory, exp_so3
from pano_scenes.motions import sinusoidal_yaw


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cam():
    return CameraModel(width=32, height=24, fx=30.0, fy=30.0, cx=16.0, cy=12.0)


@pytest.fixture
def geom():
    return PanoramaGeometry(256, 128)


def smooth_values(geom, amp_x=0.3, amp_y=0.2):
    """Gentle periodic map; gradient stays below ~0.009 per map pixel."""
    yy, xx = np.mgrid[0:geom.height, 0:geom.width] + 0.5
    return amp_x * np.sin(2 * np.pi * xx / geom.width) + amp_y * np.cos(np.pi * yy / geom.height)


def random_trajectory(rng, n_poses=5, duration=1.0, max_angle_deg=8.0):
    times = np.linspace(0.0, duration, n_poses)
    phi = rng.normal(scale=np.radians(max_angle_deg) / 2, size=(n_poses, 3))
    return RotationTrajectory(times, exp_so3(phi))


def random_pairs(rng, cam, traj, n=200, max_dt=0.3):
    """Synthetic residual pairs with both endpoints inside the trajectory span."""
    t0, t1 = traj.span
    dt = rng.uniform(0.01, max_dt, size=n)
    t = rng.uniform(t0 + max_dt, t1, size=n)
    order = np.argsort(t)
    return ResidualPairs(
        k=np.arange(n),
        t=t[order],
        t_prev=(t - dt)[order],
        x=rng.integers(0, cam.width, size=n),
        y=rng.integers(0, cam.height, size=n),
        pol=rng.choice([-1, 1], size=n),
    )


@pytest.fixture
def small_problem(rng, small_cam, geom):
    """Random 5-pose trajectory, random pairs and a noisy map on the pixels they touch."""
    traj = random_trajectory(rng)
    pairs = random_pairs(rng, small_cam, traj)
    mask = build_valid_mask(pairs, small_cam, geom, traj)
    values = np.where(mask, rng.normal(scale=0.15, size=geom.shape), 0.0)
    state = OptState(traj, PanoramaMap(geom, values, mask), small_cam, fix_first_pose=True)
    return state, pairs


@pytest.fixture
def smooth_scene(small_cam, geom):
    """Simulated events from a smooth map under a back-and-forth pan, with matching GT state."""
    gt_map = smooth_values(geom)
    gt_traj = sinusoidal_yaw(duration=2.0, amplitude_deg=60.0, freq_hz=0.5)
    stream = simulate_events(gt_map, small_cam, geom, gt_traj, EGMParams(0.2), dt_sample=1e-3)
    pairs = pair_events(stream).pairs
    mask = build_valid_mask(pairs, small_cam, geom, gt_traj)
    state = OptState(gt_traj, PanoramaMap(geom, gt_map, mask), small_cam)
    return {"gt_map": gt_map, "gt_traj": gt_traj, "stream": stream, "pairs": pairs, "state": state}
