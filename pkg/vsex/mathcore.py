"""
Numerical core for vsex.

Gaussian primitives on diagonal covariances, the closed-form KL divergence,
the truncated Taylor matrix exponential, reparameterized sampling and the
seeded random streams every other module draws from.

The Gaussian functions accept either numpy arrays or torch tensors and
return the same kind; the torch path stays differentiable.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

from vsex.errors import ContractError, DomainError

VARIANCE_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))

Array = Union[np.ndarray, torch.Tensor]


def _xp(*arrays):
    """Return the array module (torch or numpy) matching the inputs."""
    if any(isinstance(a, torch.Tensor) for a in arrays):
        return torch
    return np


def _check_positive(var_diag: Array) -> None:
    if isinstance(var_diag, torch.Tensor):
        bad = bool((var_diag <= 0).any()) or bool(torch.isnan(var_diag).any())
    else:
        var_diag = np.asarray(var_diag)
        bad = bool(np.any(var_diag <= 0)) or bool(np.any(np.isnan(var_diag)))
    if bad:
        raise DomainError("Gaussian variance must be strictly positive")


@dataclass
class GaussianBelief:
    """
    Gaussian with diagonal covariance over a trailing state axis.

    Attributes:
        mean: (..., m) mean vector(s).
        var_diag: (..., m) variances, each at least VARIANCE_FLOOR.
    """

    mean: Array
    var_diag: Array

    def __post_init__(self):
        if tuple(self.mean.shape) != tuple(self.var_diag.shape):
            raise ContractError(
                f"Belief mean shape {tuple(self.mean.shape)} does not match "
                f"variance shape {tuple(self.var_diag.shape)}"
            )

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    def validate(self) -> "GaussianBelief":
        xp = _xp(self.var_diag)
        if bool(xp.any(self.var_diag < VARIANCE_FLOOR)):
            raise DomainError(
                f"Belief variance below the floor {VARIANCE_FLOOR:g}"
            )
        return self

    def numpy(self) -> "GaussianBelief":
        if isinstance(self.mean, torch.Tensor):
            return GaussianBelief(
                self.mean.detach().cpu().numpy(),
                self.var_diag.detach().cpu().numpy(),
            )
        return self


def gaussian_logpdf(y: Array, mean: Array, var_diag: Array) -> Array:
    """
    log N(y; mean, diag(var_diag)), summed over the last axis.

    Evaluated in the log domain; leading axes broadcast.

    Raises:
        DomainError: If any variance is not strictly positive.
    """
    _check_positive(var_diag)
    xp = _xp(y, mean, var_diag)
    if xp is torch:
        y, mean, var_diag = (as_tensor(a) for a in (y, mean, var_diag))
    else:
        y, mean, var_diag = (
            np.asarray(a, dtype=np.float64) for a in (y, mean, var_diag)
        )
    resid = y - mean
    return -0.5 * (LOG_2PI + xp.log(var_diag) + resid * resid / var_diag).sum(
        -1
    )


def kl_gauss_diag(q: GaussianBelief, p: GaussianBelief) -> Array:
    """
    Closed-form KL(q || p) for diagonal Gaussians, summed over the state
    axis.

    Raises:
        ContractError: If the two beliefs have different dimensions.
    """
    if tuple(q.mean.shape) != tuple(p.mean.shape):
        raise ContractError(
            f"KL between beliefs of shapes {tuple(q.mean.shape)} and "
            f"{tuple(p.mean.shape)}"
        )
    xp = _xp(q.mean, p.mean)
    diff = q.mean - p.mean
    ratio = q.var_diag / p.var_diag
    return 0.5 * (
        ratio + diff * diff / p.var_diag - 1.0 - xp.log(ratio)
    ).sum(-1)


def taylor_expm(A: np.ndarray, order: int) -> np.ndarray:
    """
    Truncated Taylor series sum_{j=0..order} A^j / j!.

    Works on a single (m, m) matrix or a stack (..., m, m).
    """
    if order < 0:
        raise DomainError(f"Taylor order must be >= 0, got {order}")
    A = np.asarray(A, dtype=np.float64)
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    result = eye.copy()
    term = eye
    for j in range(1, order + 1):
        term = term @ A / j
        result = result + term
    return result


def reparam_sample(belief: GaussianBelief, eps: Array) -> Array:
    """mean + sqrt(var_diag) * eps; eps broadcasts against the belief."""
    xp = _xp(belief.var_diag, eps)
    return belief.mean + xp.sqrt(belief.var_diag) * eps


def derive_stream_id(stream_id: int, *keys) -> int:
    digest = hashlib.blake2b(
        repr((stream_id,) + tuple(keys)).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """
    Counter-based random stream keyed by (seed, stream_id).

    A Philox generator is seeded from the pair, so equal pairs reproduce
    equal draw sequences and distinct stream ids never alias. Every draw
    is counted in RngStream.total_draws, which lets callers audit paths
    that must stay sampling-free.
    """

    seed: int
    stream_id: int = 0
    _generator: np.random.Generator = field(
        init=False, repr=False, compare=False
    )

    total_draws = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream_id < 2**64):
            raise DomainError("seed and stream_id must be unsigned 64-bit")
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id,)
        )
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, *keys) -> "RngStream":
        """Independent substream named by keys, e.g. child("noise", 3)."""
        return RngStream(self.seed, derive_stream_id(self.stream_id, *keys))

    def normal(self, size) -> np.ndarray:
        draws = self._generator.standard_normal(size)
        RngStream.total_draws += int(np.size(draws))
        return draws

    def uniform(self, size=None):
        draws = self._generator.random(size)
        RngStream.total_draws += int(np.size(draws))
        return draws

    def permutation(self, n: int) -> np.ndarray:
        RngStream.total_draws += n
        return self._generator.permutation(n)


def rng_normal(stream: RngStream, count: int) -> np.ndarray:
    """Draw count standard normals from the stream, advancing it."""
    return stream.normal(count)


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)

