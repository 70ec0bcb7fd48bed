"""
Dataset generation and the VSEDATA file format.

A dataset is N measurement sequences (N, T, n) simulated from the
stochastic Lorenz system through the camera at a target SMNR, plus the
ground-truth states (N, T, m) kept for evaluation only.

File layout (little-endian):

    header  magic "VSEDATA" | u32 version | u64 N | u64 T | u64 n | u64 m
            | u32 flags
    payload f64 measurements, then f64 states when FLAG_STATES is set
    trailer u64 CRC-64 of header and payload

with the generation meta in a JSON sidecar ``<path>.json``.
"""

import logging
import struct
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict
from typing import Optional, Tuple

import crcmod.predefined
import numpy as np
from tqdm import tqdm

from vsex.camera import (
    CameraConfig,
    calibrate_sigma_w,
    measure_clean,
    smnr_db,
)
from vsex.errors import (
    ChecksumError,
    ConfigError,
    ContractError,
    FormatError,
    SimulationDivergedError,
    TruncatedFileError,
    VersionError,
)
from vsex.lorenz import LorenzConfig, simulate
from vsex.mathcore import RngStream
from vsex.utils import atomic_write, read_json, write_json

DATA_MAGIC = b"VSEDATA"
DATA_VERSION = 1
FLAG_STATES = 1
FLAG_ESTIMATES = 2
HEADER = struct.Struct("<7sIQQQQI")
TRAILER = struct.Struct("<Q")
MAX_ATTEMPTS = 16

N_TRAIN, T_TRAIN = 1000, 200
N_TEST, T_TEST = 100, 1000

crc64 = crcmod.predefined.mkCrcFun("crc-64")


class SequenceDataset:
    """
    Measurements with optional ground-truth states and generation meta.

    With ``audit`` enabled every read of ``states`` is counted in
    ``state_reads``, which lets training prove it stayed unsupervised.
    """

    def __init__(
        self,
        measurements: np.ndarray,
        states: Optional[np.ndarray] = None,
        meta: Optional[dict] = None,
        audit: bool = False,
    ):
        measurements = np.asarray(measurements, dtype=np.float64)
        if measurements.ndim != 3:
            raise ContractError(
                f"measurements must be (N, T, n), got {measurements.shape}"
            )
        if states is not None:
            states = np.asarray(states, dtype=np.float64)
            if states.ndim != 3 or states.shape[:2] != measurements.shape[:2]:
                raise ContractError(
                    f"states {states.shape} do not match measurements "
                    f"{measurements.shape} in N and T"
                )
        self.measurements = measurements
        self._states = states
        self.meta = dict(meta or {})
        self.audit = audit
        self.state_reads = 0

    @property
    def states(self) -> Optional[np.ndarray]:
        if self.audit:
            self.state_reads += 1
            logging.debug(f"[DATA] State read #{self.state_reads}")
        return self._states

    @property
    def has_states(self) -> bool:
        return self._states is not None

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        N, T, n = self.measurements.shape
        m = self._states.shape[2] if self._states is not None else 0
        return N, T, n, m

    def head(self, count: int) -> "SequenceDataset":
        """The first count sequences, sharing meta and audit state."""
        subset = SequenceDataset(
            self.measurements[:count],
            None if self._states is None else self._states[:count],
            self.meta,
            self.audit,
        )
        subset.state_reads = self.state_reads
        return subset

    def clean_measurements(self) -> np.ndarray:
        """Noise-free camera images of the stored states."""
        camera = CameraConfig(**self.meta["camera"])
        return measure_clean(self.states, camera)


def _simulate_sequence(args) -> Tuple[np.ndarray, int]:
    lorenz_cfg, T, seed, index = args
    root = RngStream(seed)
    for attempt in range(MAX_ATTEMPTS):
        keys = ("simulate", index) if attempt == 0 else (
            "simulate", index, attempt
        )
        try:
            return simulate(lorenz_cfg, T, root.child(*keys)).states, attempt
        except SimulationDivergedError as e:
            logging.warning(
                f"[DATA] Sequence {index} attempt {attempt} diverged at "
                f"step {e.step}; regenerating"
            )
    raise SimulationDivergedError(-1, float("inf"))


def _simulate_all(lorenz_cfg, n_seq, T, seed, max_workers, show_progress):
    tasks = [(lorenz_cfg, T, seed, i) for i in range(n_seq)]
    results = [None] * n_seq
    if max_workers <= 1:
        for task in tqdm(
            tasks, desc="Simulating", disable=not show_progress
        ):
            results[task[-1]] = _simulate_sequence(task)
        return results
    with ProcessPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {
            executor.submit(_simulate_sequence, task): task[-1]
            for task in tasks
        }
        for future in tqdm(
            as_completed(future_to_index),
            total=len(future_to_index),
            desc="Simulating",
            disable=not show_progress,
        ):
            index = future_to_index[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logging.error(
                    f"[DATA] Failed simulating sequence {index}: {e}"
                )
                raise
    return results


def generate(
    n_seq: int,
    T: int,
    target_smnr_db: float,
    lorenz_cfg: LorenzConfig,
    camera_cfg: CameraConfig,
    seed: int,
    max_workers: int = 1,
    show_progress: bool = False,
) -> SequenceDataset:
    """
    Simulate n_seq Lorenz trajectories, image them, calibrate the pixel
    noise on this set to target_smnr_db and add it.

    Sequence i uses substreams ("simulate", i) and ("noise", i) of seed; a
    diverged simulation is retried on ("simulate", i, attempt) and listed
    in meta["regenerated"].
    """
    if n_seq < 1 or T < 1:
        raise ConfigError("n_seq and T must be >= 1")
    logging.info(
        f"[DATA] Generating {n_seq} x {T} sequences at "
        f"{target_smnr_db:g} dB (seed {seed})"
    )
    simulated = _simulate_all(
        lorenz_cfg, n_seq, T, seed, max_workers, show_progress
    )
    states = np.stack([s for s, _ in simulated])
    regenerated = [
        {"sequence": i, "attempts": a}
        for i, (_, a) in enumerate(simulated)
        if a > 0
    ]
    clean = measure_clean(states, camera_cfg)
    sigma_w2 = calibrate_sigma_w(clean, target_smnr_db)
    root = RngStream(seed)
    noise = np.stack(
        [root.child("noise", i).normal(clean.shape[1:]) for i in range(n_seq)]
    )
    measurements = clean + np.sqrt(sigma_w2) * noise
    measured = smnr_db(clean, sigma_w2)
    lorenz_meta = asdict(lorenz_cfg)
    lorenz_meta["x0"] = list(lorenz_cfg.x0)
    meta = {
        "format": "VSEDATA",
        "version": DATA_VERSION,
        "n_seq": n_seq,
        "T": T,
        "seed": seed,
        "target_smnr_db": target_smnr_db,
        "measured_smnr_db": measured,
        "sigma_w2": sigma_w2,
        "lorenz": lorenz_meta,
        "camera": camera_cfg.to_dict(),
        "regenerated": regenerated,
    }
    logging.info(
        f"[DATA] sigma_w2 = {sigma_w2:.6g}, measured SMNR {measured:.6f} dB"
    )
    return SequenceDataset(measurements, states, meta)


def save(dataset: SequenceDataset, path: str) -> None:
    """Write dataset to path in the VSEDATA layout plus JSON sidecar."""
    N, T, n, m = dataset.shape
    flags = 0
    if dataset.has_states:
        flags |= FLAG_STATES
    if dataset.meta.get("method"):
        flags |= FLAG_ESTIMATES
    chunks = [
        HEADER.pack(DATA_MAGIC, DATA_VERSION, N, T, n, m, flags),
        np.ascontiguousarray(dataset.measurements, dtype="<f8").tobytes(),
    ]
    if dataset.has_states:
        chunks.append(
            np.ascontiguousarray(dataset._states, dtype="<f8").tobytes()
        )
    body = b"".join(chunks)
    atomic_write(path, body + TRAILER.pack(crc64(body)))
    write_json(dataset.meta, path + ".json")
    logging.info(f"[DATA] Saved {N} x {T} sequences to {path}")


def load(path: str, audit: bool = False) -> SequenceDataset:
    """
    Read a VSEDATA file and its sidecar.

    Raises:
        FormatError: Bad magic or unreadable sidecar.
        VersionError: Different format version.
        TruncatedFileError: File shorter than its header announces.
        ChecksumError: CRC-64 mismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size + TRAILER.size:
        raise TruncatedFileError(f"{path} is too short for a VSEDATA file")
    magic, version, N, T, n, m, flags = HEADER.unpack_from(blob)
    if magic != DATA_MAGIC:
        raise FormatError(f"{path} is not a VSEDATA file")
    if version != DATA_VERSION:
        raise VersionError(version, DATA_VERSION, path)
    has_states = bool(flags & FLAG_STATES)
    payload = 8 * N * T * (n + (m if has_states else 0))
    expected = HEADER.size + payload + TRAILER.size
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path} has {len(blob)} bytes, header announces {expected}"
        )
    if len(blob) > expected:
        raise FormatError(f"{path} has trailing bytes after the checksum")
    body = blob[: HEADER.size + payload]
    (stored,) = TRAILER.unpack_from(blob, HEADER.size + payload)
    if crc64(body) != stored:
        logging.error(f"[DATA] Checksum mismatch in {path}")
        raise ChecksumError(f"{path} failed its CRC-64 check")
    offset = HEADER.size
    measurements = np.frombuffer(
        blob, dtype="<f8", count=N * T * n, offset=offset
    ).reshape(N, T, n)
    states = None
    if has_states:
        offset += 8 * N * T * n
        states = np.frombuffer(
            blob, dtype="<f8", count=N * T * m, offset=offset
        ).reshape(N, T, m)
    try:
        meta = read_json(path + ".json")
    except (OSError, ValueError) as e:
        raise FormatError(f"Cannot read dataset sidecar {path}.json") from e
    logging.info(f"[DATA] Loaded {N} x {T} sequences from {path}")
    return SequenceDataset(
        measurements.astype(np.float64),
        None if states is None else states.astype(np.float64),
        meta,
        audit,
    )


def estimates_dataset(
    estimates: np.ndarray, method: str, source_meta: dict
) -> SequenceDataset:
    """Wrap state estimates (N, T, m) for storage with a method tag."""
    meta = {
        "format": "VSEDATA",
        "version": DATA_VERSION,
        "method": method,
        "source": {
            k: source_meta.get(k)
            for k in ("seed", "target_smnr_db", "sigma_w2", "n_seq", "T")
        },
    }
    return SequenceDataset(np.asarray(estimates), None, meta)
