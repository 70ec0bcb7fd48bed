"""
Stochastic Lorenz system used as the ground-truth process.

The state evolves as x_{t+1} = F(x_t) x_t + e_t, where F is a truncated
Taylor exponential of the Lorenz matrix frozen at the current x_1 and
e_t ~ N(0, sigma_e2 I_3). Trajectories feed dataset generation and the
particle filter; VSE training never sees them.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from vsex.errors import ConfigError, SimulationDivergedError
from vsex.mathcore import RngStream, taylor_expm

DIVERGENCE_LIMIT = 1e6


@dataclass
class LorenzConfig:
    """
    Parameters of the discretised stochastic Lorenz system.

    Attributes:
        delta (float): Step size in seconds.
        sigma_e2 (float): Process-noise variance per axis (0.1 is -10 dB).
        taylor_order (int): Order of the truncated matrix exponential.
        x0 (tuple): Initial state.
        burn_in (int): Leading steps simulated and discarded.
    """

    delta: float = 0.02
    sigma_e2: float = 0.1
    taylor_order: int = 5
    x0: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    burn_in: int = 0

    def __post_init__(self):
        self.x0 = tuple(float(v) for v in self.x0)
        if self.delta <= 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.sigma_e2 < 0:
            raise ConfigError(
                f"sigma_e2 must be non-negative, got {self.sigma_e2}"
            )
        if self.taylor_order < 1:
            raise ConfigError(
                f"taylor_order must be >= 1, got {self.taylor_order}"
            )
        if len(self.x0) != 3:
            raise ConfigError("x0 must have three entries")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be non-negative")


@dataclass
class StateTrajectory:
    states: np.ndarray
    seed: int
    stream_id: int


def lorenz_matrix(x1) -> np.ndarray:
    """Lorenz coefficient matrix for one x_1 or a stack of them."""
    x1 = np.asarray(x1, dtype=np.float64)
    A = np.zeros(x1.shape + (3, 3))
    A[..., 0, 0] = -10.0
    A[..., 0, 1] = 10.0
    A[..., 1, 0] = 28.0
    A[..., 1, 1] = -1.0
    A[..., 1, 2] = -x1
    A[..., 2, 1] = x1
    A[..., 2, 2] = -8.0 / 3.0
    return A


def transition_matrix(x: np.ndarray, cfg: LorenzConfig) -> np.ndarray:
    """F(x) = taylor_expm(delta * A(x_1)); x may be (3,) or (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    return taylor_expm(cfg.delta * lorenz_matrix(x[..., 0]), cfg.taylor_order)


def step(x: np.ndarray, noise: np.ndarray, cfg: LorenzConfig) -> np.ndarray:
    """One transition F(x) x + noise, vectorised over leading axes."""
    x = np.asarray(x, dtype=np.float64)
    F = transition_matrix(x, cfg)
    return np.einsum("...ij,...j->...i", F, x) + noise


def simulate(cfg: LorenzConfig, T: int, stream: RngStream) -> StateTrajectory:
    """
    Simulate T states after burn_in discarded steps.

    The first returned state is one noisy step past x0. Noise is drawn one
    step at a time, so a shorter run is a bit-exact prefix of a longer one.

    Raises:
        SimulationDivergedError: If a state leaves the divergence guard.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    scale = np.sqrt(cfg.sigma_e2)
    x = np.array(cfg.x0, dtype=np.float64)
    states = np.empty((T, 3))
    for k in range(cfg.burn_in + T):
        x = step(x, scale * stream.normal(3), cfg)
        peak = float(np.max(np.abs(x)))
        if not np.isfinite(peak) or peak > DIVERGENCE_LIMIT:
            logging.warning(
                f"[LORENZ] Stream {stream.stream_id} diverged at step {k}"
            )
            raise SimulationDivergedError(k, peak)
        if k >= cfg.burn_in:
            states[k - cfg.burn_in] = x
    return StateTrajectory(
        states=states,
        seed=stream.seed,
        stream_id=stream.stream_id,
    )
