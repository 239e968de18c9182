import numpy as np
import pytest

from bumpvo.image import gaussian_blur


def smoothed_noise(width, height, seed, sigma=1.5, lo=0, hi=255):
    """Band-limited random texture: blurred uniform noise stretched to [lo, hi].
    Rich in corners and gradients at one scale."""
    rng = np.random.default_rng(seed)
    img = gaussian_blur(rng.uniform(0.0, 255.0, size=(height, width)), sigma)
    img -= img.min()
    if img.max() > 0:
        img *= (hi - lo) / img.max()
    return img + lo


def multiscale_noise(width, height, seed, scales=(12.0, 4.0, 1.5),
                     weights=(0.55, 0.3, 0.15)):
    """Texture with dominant coarse structure plus fine detail, like natural
    images: wide convergence basins for coarse-to-fine flow, sharp corners
    for detection."""
    rng = np.random.default_rng(seed)
    img = np.zeros((height, width))
    for sigma, wgt in zip(scales, weights):
        layer = gaussian_blur(rng.uniform(-1.0, 1.0, size=(height, width)), sigma)
        layer /= max(np.abs(layer).max(), 1e-12)
        img += wgt * layer
    img -= img.min()
    img *= 255.0 / img.max()
    return img


def rodrigues(axis, angle):
    """Axis-angle to rotation matrix; independent of the package quaternions."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


@pytest.fixture
def noise_image():
    return smoothed_noise
