import numpy as np

from pano_ba.so3 import RotationTrajectory, exp_so3

GT_RATE = 1000.0  # Hz, dense ground-truth sampling


def _times(duration, rate):
    n = int(round(duration * rate)) + 1
    return np.arange(n) / rate


def sinusoidal_yaw(duration=5.0, amplitude_deg=30.0, freq_hz=0.5, pitch_deg=0.0, rate=GT_RATE):
    """Back-and-forth pan about the vertical (y) axis, optional pitch wobble at twice the rate."""
    t = _times(duration, rate)
    yaw = np.radians(amplitude_deg) * np.sin(2 * np.pi * freq_hz * t)
    pitch = np.radians(pitch_deg) * np.sin(4 * np.pi * freq_hz * t)
    phi = np.stack([pitch, yaw, np.zeros_like(t)], axis=-1)
    return RotationTrajectory(t, exp_so3(phi), check_uniform=False)


def constant_rate(duration=2.0, rate_deg_s=20.0, axis=(0.0, 1.0, 0.0), rate=GT_RATE):
    t = _times(duration, rate)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return RotationTrajectory(t, exp_so3(np.radians(rate_deg_s) * t[:, None] * axis), check_uniform=False)


def static(duration=1.0, rate=GT_RATE):
    t = _times(duration, rate)
    return RotationTrajectory(t, np.broadcast_to(np.eye(3), (t.size, 3, 3)).copy(), check_uniform=False)


def perturb_trajectory(traj, rms_deg=1.0, seed=0, keep_first=True):
    """Left-multiply control poses by random rotations with the given RMS angle."""
    rng = np.random.default_rng(seed)
    sigma = np.radians(rms_deg) / np.sqrt(3.0)
    noise = rng.normal(scale=sigma, size=(len(traj), 3))
    if keep_first:
        noise[0] = 0.0
    return traj.retract(noise)
