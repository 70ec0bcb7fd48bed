"""
Metrics and the NMSE-versus-SMNR experiment.

NMSE compares element-wise absolute values of states and estimates, which
makes it blind to the camera's mirror-image ambiguity. A sequence that is
matched exactly has NMSE of minus infinity; it is reported as "exact".
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from vsex.camera import CameraConfig, measure_clean, smnr_db
from vsex.datasets import generate
from vsex.errors import ContractError, DegenerateMetricError
from vsex.errors import MissingCheckpointError
from vsex.lorenz import LorenzConfig
from vsex.particle_filter import PfConfig, pf_run_batch
from vsex.utils import write_csv
from vsex.vse import infer, load_model

EXACT = "exact"
SWEEP_COLUMNS = ("smnr_db", "method", "nmse_db", "seconds", "seed")


def format_nmse(value: float) -> str:
    return EXACT if value == -np.inf else f"{value:.6f}"


@dataclass
class EvalResult:
    """
    Attributes:
        nmse_db (float): Mean of the per-sequence values; -inf when some
            sequence is matched exactly (see ``exact``).
        per_sequence_nmse_db (np.ndarray): One value per sequence.
        smnr_db (float): SMNR of the evaluated set, NaN when unknown.
        inference_seconds (float): Wall time of the inference call.
    """

    nmse_db: float
    per_sequence_nmse_db: np.ndarray
    smnr_db: float = float("nan")
    inference_seconds: float = 0.0

    @property
    def exact(self) -> bool:
        return self.nmse_db == -np.inf

    @property
    def label(self) -> str:
        return format_nmse(self.nmse_db)


def abs_e(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def nmse_db(
    truth: Sequence[np.ndarray], estimates: Sequence[np.ndarray]
) -> EvalResult:
    """
    Phase-invariant NMSE in dB, averaged over sequences.

    Per sequence: 10 log10(sum_t ||abs_e(x_t) - abs_e(xh_t)||^2 /
    sum_t ||x_t||^2).

    Raises:
        ContractError: If the shapes differ.
        DegenerateMetricError: If a truth sequence has zero energy.
    """
    if len(truth) != len(estimates):
        raise ContractError(
            f"{len(truth)} truth sequences but {len(estimates)} estimates"
        )
    values = []
    for i, (x, xh) in enumerate(zip(truth, estimates)):
        x = np.asarray(x, dtype=np.float64)
        xh = np.asarray(xh, dtype=np.float64)
        if x.shape != xh.shape:
            raise ContractError(
                f"Sequence {i}: truth {x.shape} vs estimate {xh.shape}"
            )
        energy = np.sum(x * x)
        if not energy > 0:
            raise DegenerateMetricError(f"Truth sequence {i} has zero energy")
        diff = abs_e(x) - abs_e(xh)
        error = np.sum(diff * diff)
        values.append(
            -np.inf if error == 0 else 10.0 * np.log10(error / energy)
        )
    per_sequence = np.asarray(values)
    return EvalResult(float(np.mean(per_sequence)), per_sequence)


def measured_smnr_db(
    clean_set: Sequence[np.ndarray], sigma_w2: float
) -> float:
    """SMNR of clean measurements at noise variance sigma_w2."""
    value = smnr_db(clean_set, sigma_w2)
    logging.debug(f"[EVAL] Measured SMNR {value:.9f} dB")
    return value


@dataclass
class SweepConfig:
    """
    Test-set generation and baseline settings for the SMNR sweep.

    Every SMNR draws its test trajectories from the same seed, so the sets
    differ only in their noise level.
    """

    n_seq: int = 20
    T: int = 200
    seed: int = 0
    lorenz: LorenzConfig = field(default_factory=LorenzConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    pf: PfConfig = field(default_factory=PfConfig)
    max_workers: int = 1
    show_progress: bool = False


@dataclass
class SweepRow:
    smnr_db: float
    method: str
    nmse_db: float
    seconds: float
    seed: int

    def as_row(self) -> dict:
        return {
            "smnr_db": f"{self.smnr_db:g}",
            "method": self.method,
            "nmse_db": format_nmse(self.nmse_db),
            "seconds": f"{self.seconds:.6f}",
            "seed": self.seed,
        }


def run_vse(checkpoint: str, Y: np.ndarray) -> Tuple[np.ndarray, float]:
    """Posterior-mean estimates for every sequence and the inference time."""
    model, _, _ = load_model(checkpoint)
    estimates = []
    seconds = 0.0
    for y in Y:
        started = time.perf_counter()
        _, xh = infer(model, y)
        seconds += time.perf_counter() - started
        estimates.append(xh)
    return np.stack(estimates), seconds


def sweep(
    methods: Dict[str, object],
    smnr_list: Sequence[float],
    config: SweepConfig,
    output_csv: Optional[str] = None,
) -> List[SweepRow]:
    """
    NMSE of each method at each SMNR on freshly generated test sets.

    Args:
        methods: Any of "vse" (mapping SMNR -> checkpoint path), "pf"
            (a PfConfig, or None for ``config.pf``) and "zero" (the
            all-zero estimator).
        smnr_list: SMNR values in dB.
        config: Test-set and baseline settings.
        output_csv: Optional path for the results table.

    Raises:
        MissingCheckpointError: If "vse" lacks a checkpoint for an SMNR.
    """
    if "vse" in methods:
        for smnr in smnr_list:
            if _lookup(methods["vse"], smnr) is None:
                raise MissingCheckpointError(smnr)
    rows = []
    for smnr in smnr_list:
        data = generate(
            config.n_seq,
            config.T,
            smnr,
            config.lorenz,
            config.camera,
            config.seed,
            config.max_workers,
        )
        truth = data.states
        sigma_w2 = data.meta["sigma_w2"]
        for method in methods:
            if method == "vse":
                estimates, seconds = run_vse(
                    _lookup(methods["vse"], smnr), data.measurements
                )
            elif method == "pf":
                pf_cfg = methods["pf"] or config.pf
                started = time.perf_counter()
                estimates = pf_run_batch(
                    data.measurements,
                    config.lorenz,
                    config.camera,
                    sigma_w2,
                    pf_cfg,
                    config.max_workers,
                    config.show_progress,
                )
                seconds = time.perf_counter() - started
            elif method == "zero":
                estimates, seconds = np.zeros_like(truth), 0.0
            else:
                raise ContractError(f"Unknown sweep method {method!r}")
            result = nmse_db(truth, estimates)
            logging.info(
                f"[SWEEP] {smnr:g} dB {method}: NMSE {result.label} dB "
                f"in {seconds:.3f} s"
            )
            rows.append(
                SweepRow(smnr, method, result.nmse_db, seconds, config.seed)
            )
    if output_csv:
        write_csv((r.as_row() for r in rows), output_csv, SWEEP_COLUMNS)
    return rows


def _lookup(checkpoints: Dict[float, str], smnr: float) -> Optional[str]:
    for key, path in checkpoints.items():
        if float(key) == float(smnr):
            return path
    return None


def evaluate_dataset(truth_data, estimates: np.ndarray) -> EvalResult:
    """NMSE of estimates against a dataset's states, with its SMNR."""
    result = nmse_db(truth_data.states, estimates)
    camera = CameraConfig(**truth_data.meta["camera"])
    clean = measure_clean(truth_data.states, camera)
    result.smnr_db = measured_smnr_db(clean, truth_data.meta["sigma_w2"])
    return result
