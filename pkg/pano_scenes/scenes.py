import numpy as np
import yaml
from scipy.ndimage import gaussian_filter

SCENES = ("noise", "checkerboard", "edges", "sinusoid")


def load_scene_presets(yaml_path):
    with open(yaml_path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f) or {}
    presets = {}
    for p in data.get('scenes', []):
        p = dict(p)
        name = p.pop('name')
        presets[name] = {'scene': p.pop('scene', name), 'params': p}
    return presets


def _smooth(img, sigma):
    # azimuth is periodic, rows are not
    if not sigma:
        return img
    return gaussian_filter(img, sigma=sigma, mode=('nearest', 'wrap'))


def bandlimited_noise(shape, sigma=6.0, amplitude=0.5, seed=0):
    rng = np.random.default_rng(seed)
    img = _smooth(rng.standard_normal(shape), sigma)
    img -= img.mean()
    std = img.std()
    return img * (amplitude / std) if std > 0 else img


def checkerboard(shape, cells=8, low=-0.5, high=0.5, blur=2.0):
    H, W = shape
    size = max(H // cells, 1)
    yy, xx = np.mgrid[0:H, 0:W]
    board = np.where(((yy // size) + (xx // size)) % 2 == 0, low, high).astype(float)
    return _smooth(board, blur)


def step_edge_grid(shape, spacing=32, height=0.4, blur=1.5):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    img = height * ((xx // spacing) % 2) + height * ((yy // spacing) % 2)
    return _smooth(img.astype(float), blur)


def sinusoid(shape, amplitude=0.3, periods=(4, 2)):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    return amplitude * np.sin(2 * np.pi * periods[0] * xx / W) * np.cos(np.pi * periods[1] * yy / H)


def make_scene(name, shape, **kw):
    if name == 'noise':
        return bandlimited_noise(shape, **kw)
    if name == 'checkerboard':
        return checkerboard(shape, **kw)
    if name == 'edges':
        return step_edge_grid(shape, **kw)
    if name == 'sinusoid':
        return sinusoid(shape, **kw)
    raise ValueError(f"unknown scene {name!r}; choose from {SCENES}")
