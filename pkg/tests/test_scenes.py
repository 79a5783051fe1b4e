from pathlib import Path

import numpy as np
import pytest

from pano_ba.so3 import geodesic_angle
from pano_scenes.motions import constant_rate, perturb_trajectory, sinusoidal_yaw, static
from pano_scenes.scenes import SCENES, load_scene_presets, make_scene

PRESETS = Path(__file__).resolve().parents[1] / "config" / "scenes.yaml"


@pytest.mark.parametrize("name", SCENES)
def test_scenes_have_map_shape(name):
    img = make_scene(name, (64, 128))
    assert img.shape == (64, 128)
    assert np.all(np.isfinite(img))


def test_noise_scene_is_normalized_and_seeded():
    a = make_scene("noise", (64, 128), amplitude=0.4, seed=2)
    b = make_scene("noise", (64, 128), amplitude=0.4, seed=2)
    np.testing.assert_array_equal(a, b)
    assert a.mean() == pytest.approx(0.0, abs=1e-12)
    assert a.std() == pytest.approx(0.4)


def test_unknown_scene():
    with pytest.raises(ValueError, match="unknown scene"):
        make_scene("mandelbrot", (4, 8))


def test_presets_resolve_to_scenes():
    presets = load_scene_presets(PRESETS)
    assert presets["desk"]["scene"] == "noise"
    assert presets["checkerboard"]["scene"] == "checkerboard"
    for p in presets.values():
        assert p["scene"] in SCENES
        make_scene(p["scene"], (32, 64), **p["params"])


def test_sinusoidal_yaw_reaches_amplitude():
    traj = sinusoidal_yaw(duration=1.0, amplitude_deg=30.0, freq_hz=0.5)
    ang = np.degrees(geodesic_angle(traj.rotations[0], traj.rotations))
    assert ang.max() == pytest.approx(30.0, abs=1e-6)
    assert traj.span == (0.0, 1.0)


def test_constant_rate_and_static():
    traj = constant_rate(duration=2.0, rate_deg_s=10.0)
    assert np.degrees(geodesic_angle(traj.rotations[0], traj.rotations[-1])) == pytest.approx(20.0)
    assert np.all(static(0.5).rotations == np.eye(3))


def test_perturbation_rms_and_anchor():
    base = constant_rate(duration=10.0, rate_deg_s=5.0).resample(100.0)
    noisy = perturb_trajectory(base, rms_deg=1.0, seed=4)
    ang = np.degrees(geodesic_angle(base.rotations, noisy.rotations))
    assert ang[0] == pytest.approx(0.0, abs=1e-9)
    assert np.sqrt(np.mean(ang ** 2)) == pytest.approx(1.0, rel=0.1)
