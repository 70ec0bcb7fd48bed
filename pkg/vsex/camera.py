"""
Camera measurement model.

A low-resolution camera looks at the (x_1, x_2) plane through a Gaussian
point-spread function whose width grows with the depth x_3:

    h_i(x) = amplitude * exp(-||g_i - (x_1, x_2)||^2 / (2 max(x_3, floor)))

Measurements add white Gaussian noise with variance sigma_w2 per pixel.
The noise variance is calibrated to a target signal-to-measurement-noise
ratio (SMNR) over a set of clean sequences.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
import torch

from vsex.errors import ConfigError, DegenerateSignalError
from vsex.mathcore import RngStream


@dataclass
class CameraConfig:
    """
    Pixel grid and point-spread parameters.

    Attributes:
        res_x (int): Pixels along x_1.
        res_y (int): Pixels along x_2.
        range_x (tuple): Inclusive x_1 extent of the grid.
        range_y (tuple): Inclusive x_2 extent of the grid.
        amplitude (float): Peak pixel intensity.
        depth_floor (float): Lower clamp on x_3 inside the exponent.
    """

    res_x: int = 8
    res_y: int = 8
    range_x: Tuple[float, float] = (-30.0, 30.0)
    range_y: Tuple[float, float] = (-40.0, 40.0)
    amplitude: float = 10.0
    depth_floor: float = 1e-3
    _grid: np.ndarray = field(
        init=False, repr=False, compare=False, default=None
    )

    def __post_init__(self):
        self.range_x = tuple(float(v) for v in self.range_x)
        self.range_y = tuple(float(v) for v in self.range_y)
        if self.res_x < 2 or self.res_y < 2:
            raise ConfigError("Camera needs at least 2 pixels per axis")
        for lo, hi in (self.range_x, self.range_y):
            if not hi > lo:
                raise ConfigError(f"Empty camera range ({lo}, {hi})")
        if self.amplitude <= 0:
            raise ConfigError("amplitude must be positive")
        if self.depth_floor <= 0:
            raise ConfigError("depth_floor must be positive")

    @property
    def n(self) -> int:
        return self.res_x * self.res_y

    def to_dict(self) -> dict:
        return {
            "res_x": self.res_x,
            "res_y": self.res_y,
            "range_x": list(self.range_x),
            "range_y": list(self.range_y),
            "amplitude": self.amplitude,
            "depth_floor": self.depth_floor,
        }


def _axis(lo: float, hi: float, count: int) -> np.ndarray:
    # centre + half-width * symmetric integers keeps c_k == -c_{R-1-k}
    # bit-exactly when the range is symmetric
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    k = np.arange(count, dtype=np.float64)
    return mid + half * (2.0 * k - (count - 1)) / (count - 1)


def pixel_grid(cfg: CameraConfig) -> np.ndarray:
    """
    Pixel centres as an (n, 2) array in row-major order: x_1 varies fastest,
    then x_2.
    """
    if cfg._grid is None:
        gx = _axis(*cfg.range_x, cfg.res_x)
        gy = _axis(*cfg.range_y, cfg.res_y)
        X, Y = np.meshgrid(gx, gy)
        cfg._grid = np.stack([X.ravel(), Y.ravel()], axis=-1)
    return cfg._grid


def measure_clean(x, cfg: CameraConfig):
    """
    Noise-free pixel intensities h(x) for states of shape (..., 3).

    Returns an array (or tensor, for tensor input) of shape (..., n) with
    entries in [0, amplitude].
    """
    grid = pixel_grid(cfg)
    if isinstance(x, torch.Tensor):
        g = torch.as_tensor(grid, dtype=x.dtype)
        depth = torch.clamp(x[..., 2], min=cfg.depth_floor)
        dist2 = ((g - x[..., None, :2]) ** 2).sum(-1)
        return cfg.amplitude * torch.exp(-dist2 / (2.0 * depth[..., None]))
    x = np.asarray(x, dtype=np.float64)
    depth = np.maximum(x[..., 2], cfg.depth_floor)
    dist2 = ((grid - x[..., None, :2]) ** 2).sum(-1)
    return cfg.amplitude * np.exp(-dist2 / (2.0 * depth[..., None]))


def measure_noisy(
    x, cfg: CameraConfig, sigma_w2: float, stream: RngStream
) -> np.ndarray:
    """h(x) plus N(0, sigma_w2 I) pixel noise drawn from stream."""
    if sigma_w2 < 0:
        raise ConfigError(f"sigma_w2 must be non-negative, got {sigma_w2}")
    clean = measure_clean(x, cfg)
    return clean + np.sqrt(sigma_w2) * stream.normal(clean.shape)


def signal_power_db(clean_set: Sequence[np.ndarray]) -> np.ndarray:
    """
    Per-sequence 10 log10 sum_t ||h_t - mean_t h||^2, with the expectation
    estimated by the temporal mean pixel vector of that sequence.

    Raises:
        DegenerateSignalError: If a sequence has no temporal variation.
    """
    if len(clean_set) == 0:
        raise DegenerateSignalError("No clean sequences given")
    powers = []
    for i, clean in enumerate(clean_set):
        clean = np.asarray(clean, dtype=np.float64)
        centred = clean - clean.mean(axis=0, keepdims=True)
        power = float(np.sum(centred * centred))
        if not power > 0:
            raise DegenerateSignalError(
                f"Clean sequence {i} has zero signal power"
            )
        powers.append(10.0 * np.log10(power))
    return np.asarray(powers)


def calibrate_sigma_w(
    clean_set: Sequence[np.ndarray], target_smnr_db: float
) -> float:
    """
    Noise variance that puts the set at target_smnr_db.

    SMNR = mean_i[10 log10 P_i] - 10 log10(n sigma_w2), so the inversion is
    closed form.
    """
    mean_db = float(np.mean(signal_power_db(clean_set)))
    n = np.asarray(clean_set[0]).shape[-1]
    sigma_w2 = 10.0 ** ((mean_db - target_smnr_db) / 10.0) / n
    logging.debug(
        f"[CAMERA] sigma_w2 = {sigma_w2:.6g} for SMNR {target_smnr_db:g} dB"
    )
    return sigma_w2


def smnr_db(clean_set: Sequence[np.ndarray], sigma_w2: float) -> float:
    """SMNR of a clean set under white pixel noise of variance sigma_w2."""
    if not sigma_w2 > 0:
        raise ConfigError(f"sigma_w2 must be positive, got {sigma_w2}")
    powers = signal_power_db(clean_set)
    n = np.asarray(clean_set[0]).shape[-1]
    return float(np.mean(powers) - 10.0 * np.log10(n * sigma_w2))
