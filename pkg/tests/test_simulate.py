import numpy as np
import pytest

from pano_ba.errors import AliasingError, ConfigError
from pano_ba.photometric import residuals
from pano_ba.simulate import EGMParams, bilinear_sample, nearest_sample, simulate_events
from pano_scenes.motions import constant_rate, sinusoidal_yaw, static
from pano_scenes.scenes import make_scene


def _step_map(geom, col=133, height=0.4):
    values = np.zeros(geom.shape)
    values[:, col:] = height
    return values


def test_bilinear_sample_wraps_azimuth_and_clamps_rows():
    values = np.arange(12.0).reshape(3, 4)
    # pixel centers read back exactly
    assert bilinear_sample(values, np.array([1.5, 1.5])) == pytest.approx(5.0)
    # halfway between last and first column
    assert bilinear_sample(values, np.array([4.0, 0.5])) == pytest.approx(1.5)
    assert bilinear_sample(values, np.array([0.5, 0.0])) == pytest.approx(0.0)
    assert bilinear_sample(values, np.array([0.5, 3.0])) == pytest.approx(8.0)


def test_nearest_sample_matches_pixel_lookup():
    values = np.arange(12.0).reshape(3, 4)
    assert nearest_sample(values, np.array([1.99, 1.0])) == 5.0
    assert nearest_sample(values, np.array([4.2, 0.5])) == 0.0
    assert nearest_sample(values, np.array([0.5, 7.0])) == 8.0


def test_step_edge_fires_two_positive_events_at_crossings(small_cam, geom):
    traj = constant_rate(duration=1.0, rate_deg_s=20.0)
    stream = simulate_events(_step_map(geom), small_cam, geom, traj, EGMParams(0.2), dt_sample=1e-3)
    centre = (stream.x == 16) & (stream.y == 12)
    np.testing.assert_array_equal(stream.pol[centre], [1, 1])
    # the edge ramps over [132.5, 133.5] px; one map pixel is 360/256 degrees
    t_first, t_second = stream.t[centre]
    assert t_first == pytest.approx(7.03125 / 20.0, abs=1e-6)
    # the top of the ramp is a kink, so the second crossing is only resolved to one sample step
    assert 7.734375 / 20.0 - 1e-6 <= t_second <= 7.734375 / 20.0 + 1e-3 + 1e-6
    assert stream.is_sorted()
    assert np.all(stream.pol > 0)


def test_nearest_readout_fires_both_events_in_the_border_step(small_cam, geom):
    traj = constant_rate(duration=1.0, rate_deg_s=20.0)
    # coarse enough to alias the bilinear readout
    stream = simulate_events(_step_map(geom), small_cam, geom, traj, EGMParams(0.2), dt_sample=0.05,
                             sampling="nearest")
    centre = (stream.x == 16) & (stream.y == 12)
    np.testing.assert_array_equal(stream.pol[centre], [1, 1])
    # the map steps at column 133.0, reached after five map pixels
    t_border = 7.03125 / 20.0
    assert np.all(np.abs(stream.t[centre] - t_border) <= 0.05 + 1e-6)
    assert stream.t[centre][0] <= stream.t[centre][1]
    assert stream.is_sorted()


def test_static_camera_or_flat_map_fires_nothing(small_cam, geom):
    assert len(simulate_events(_step_map(geom), small_cam, geom, static(0.5), EGMParams(), 1e-3)) == 0
    flat = np.full(geom.shape, 0.3)
    assert len(simulate_events(flat, small_cam, geom, constant_rate(0.5), EGMParams(), 1e-3)) == 0


def test_asymmetric_thresholds(small_cam, geom):
    traj = constant_rate(duration=1.0, rate_deg_s=20.0)
    stream = simulate_events(_step_map(geom), small_cam, geom, traj,
                             EGMParams(contrast_pos=0.4, contrast_neg=0.1), dt_sample=1e-3)
    centre = (stream.x == 16) & (stream.y == 12)
    np.testing.assert_array_equal(stream.pol[centre], [1])


def test_coarse_sampling_raises_aliasing_error(small_cam, geom):
    with pytest.raises(AliasingError, match="dt_sample"):
        simulate_events(_step_map(geom), small_cam, geom, constant_rate(1.0), EGMParams(0.2), dt_sample=0.05)


def test_parameter_validation(small_cam, geom):
    with pytest.raises(ConfigError):
        EGMParams(contrast=0.0)
    with pytest.raises(ConfigError):
        simulate_events(np.zeros((4, 8)), small_cam, geom, static(0.1), EGMParams(), 1e-3)
    with pytest.raises(ConfigError):
        simulate_events(np.zeros(geom.shape), small_cam, geom, static(0.1), EGMParams(), 0.0)
    with pytest.raises(ConfigError, match="sampling"):
        simulate_events(np.zeros(geom.shape), small_cam, geom, static(0.1), EGMParams(), 1e-3, sampling="cubic")


def test_ground_truth_residuals_are_small(smooth_scene):
    ev = residuals(smooth_scene["state"], smooth_scene["pairs"], 0.2)
    assert ev.eps.size > 100
    assert ev.n_skipped == 0
    assert np.max(np.abs(ev.eps)) <= 0.02


@pytest.mark.parametrize("sampling", ["bilinear", "nearest"])
def test_closed_back_and_forth_pan_balances_polarities(small_cam, geom, sampling):
    gt_map = make_scene("noise", geom.shape, sigma=4.0, amplitude=0.5, seed=2)
    # one full period: the camera ends where it started
    traj = sinusoidal_yaw(duration=2.0, amplitude_deg=30.0, freq_hz=0.5)
    stream = simulate_events(gt_map, small_cam, geom, traj, EGMParams(0.2), dt_sample=5e-4, sampling=sampling)
    assert np.any(stream.pol > 0) and np.any(stream.pol < 0)
    net = np.zeros((small_cam.height, small_cam.width), dtype=int)
    np.add.at(net, (stream.y, stream.x), stream.pol.astype(int))
    assert np.abs(net).max() <= 1
