"""
Bootstrap particle filter baseline.

Knows both the Lorenz transition and the camera: particles are propagated
through the transition prior, weighted by the measurement likelihood in
the log domain, and resampled systematically when the effective sample
size drops below half the cloud.
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from vsex.camera import CameraConfig, measure_clean
from vsex.errors import ConfigError, DegenerateFilterError
from vsex.lorenz import LorenzConfig, step as lorenz_step
from vsex.mathcore import RngStream, gaussian_logpdf

INIT_MEAN = np.array([0.0, 0.0, 25.0])
INIT_STD = 20.0


@dataclass
class PfConfig:
    """
    Attributes:
        particles (int): Cloud size P.
        seed (int): Root seed; sequence i uses substream ("pf", i).
        ess_fraction (float): Resample when ESS < ess_fraction * P.
    """

    particles: int = 500
    seed: int = 0
    ess_fraction: float = 0.5

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigError("particles must be >= 1")
        if not 0.0 < self.ess_fraction <= 1.0:
            raise ConfigError("ess_fraction must lie in (0, 1]")


@dataclass
class ParticleCloud:
    particles: np.ndarray
    log_weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.log_weights)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def pf_init(P: int, stream: RngStream) -> ParticleCloud:
    """P particles from N([0, 0, 25], 20^2 I) with uniform weights."""
    if P < 1:
        raise ConfigError("P must be >= 1")
    particles = INIT_MEAN + INIT_STD * stream.normal((P, 3))
    return ParticleCloud(particles, np.full(P, -np.log(P)))


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """
    Ancestor indices for positions (u + k) / P, k = 0..P-1.

    Index j is copied floor or ceil of P * w_j times.
    """
    weights = np.asarray(weights, dtype=np.float64)
    P = len(weights)
    positions = (u + np.arange(P)) / P
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    indices = np.searchsorted(cumulative, positions, side="right")
    return np.minimum(indices, P - 1)


def effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / np.sum(np.square(weights))


def bootstrap_step(
    cloud: ParticleCloud,
    y: np.ndarray,
    propagate: Callable[[np.ndarray, RngStream], np.ndarray],
    log_likelihood: Callable[[np.ndarray, np.ndarray], np.ndarray],
    stream: RngStream,
    ess_fraction: float = 0.5,
    t: int = 0,
) -> Tuple[ParticleCloud, np.ndarray]:
    """
    One propagate-weight-estimate-resample cycle.

    Returns the updated cloud and the weighted particle mean computed
    before resampling.

    Raises:
        DegenerateFilterError: If every weight underflows.
    """
    particles = propagate(cloud.particles, stream)
    loglik = log_likelihood(y, particles)
    loglik = np.where(np.isfinite(loglik), loglik, -np.inf)
    log_w = cloud.log_weights + loglik
    norm = logsumexp(log_w)
    if not np.isfinite(norm):
        logging.error(f"[PF] Filter degenerated at step {t}")
        raise DegenerateFilterError(t)
    log_w = log_w - norm
    weights = np.exp(log_w)
    estimate = weights @ particles
    P = len(weights)
    if effective_sample_size(weights) < ess_fraction * P:
        ancestors = systematic_resample(weights, float(stream.uniform()))
        particles = particles[ancestors]
        log_w = np.full(P, -np.log(P))
    return ParticleCloud(particles, log_w), estimate


def pf_step(
    cloud: ParticleCloud,
    y_t: np.ndarray,
    lorenz_cfg: LorenzConfig,
    camera_cfg: CameraConfig,
    sigma_w2: float,
    stream: RngStream,
    t: int = 0,
) -> Tuple[ParticleCloud, np.ndarray]:
    """bootstrap_step specialised to the Lorenz transition and camera."""
    noise_std = np.sqrt(lorenz_cfg.sigma_e2)
    var_w = np.full(camera_cfg.n, sigma_w2)

    def propagate(particles, s):
        noise = noise_std * s.normal(particles.shape)
        with np.errstate(over="ignore", invalid="ignore"):
            return lorenz_step(particles, noise, lorenz_cfg)

    def log_likelihood(y, particles):
        with np.errstate(over="ignore", invalid="ignore"):
            clean = measure_clean(particles, camera_cfg)
            return gaussian_logpdf(y, clean, var_w)

    return bootstrap_step(cloud, y_t, propagate, log_likelihood, stream, t=t)


def pf_run(
    y: np.ndarray,
    lorenz_cfg: LorenzConfig,
    camera_cfg: CameraConfig,
    sigma_w2: float,
    P: int,
    stream: RngStream,
) -> np.ndarray:
    """Filter a whole sequence y (T, n); returns (T, 3) weighted means."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 1:
        raise ConfigError("Sequence must have at least one step")
    cloud = pf_init(P, stream.child("init"))
    step_stream = stream.child("steps")
    estimates = np.empty((len(y), 3))
    for t, y_t in enumerate(y):
        cloud, estimates[t] = pf_step(
            cloud, y_t, lorenz_cfg, camera_cfg, sigma_w2, step_stream, t
        )
    return estimates


def _run_sequence(args) -> np.ndarray:
    y, lorenz_cfg, camera_cfg, sigma_w2, P, seed, index = args
    stream = RngStream(seed).child("pf", index)
    return pf_run(y, lorenz_cfg, camera_cfg, sigma_w2, P, stream)


def pf_run_batch(
    Y: Sequence[np.ndarray],
    lorenz_cfg: LorenzConfig,
    camera_cfg: CameraConfig,
    sigma_w2: float,
    config: PfConfig,
    max_workers: int = 1,
    show_progress: bool = False,
) -> List[np.ndarray]:
    """
    Filter every sequence of a set, optionally in a process pool.

    Sequence i always uses substream ("pf", i) of config.seed, so results do
    not depend on the worker count.
    """
    tasks = [
        (y, lorenz_cfg, camera_cfg, sigma_w2, config.particles, config.seed, i)
        for i, y in enumerate(Y)
    ]
    logging.info(
        f"[PF] Filtering {len(tasks)} sequences with "
        f"{config.particles} particles"
    )
    if max_workers <= 1:
        return [
            _run_sequence(task)
            for task in tqdm(
                tasks, desc="Particle filter", disable=not show_progress
            )
        ]
    results = [None] * len(tasks)
    with ProcessPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {
            executor.submit(_run_sequence, task): task[-1] for task in tasks
        }
        for future in tqdm(
            as_completed(future_to_index),
            total=len(future_to_index),
            desc="Particle filter",
            disable=not show_progress,
        ):
            index = future_to_index[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logging.error(f"[PF] Failed on sequence {index}: {e}")
                raise
    return results
