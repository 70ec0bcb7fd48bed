"""
Variational state estimation.

Two GRU stacks are trained jointly from measurements alone:

- the prior network maps y_{1:t-1} to p(x_t | y_{1:t-1}; theta),
- the posterior network maps y_{1:t} to q(x_t | y_{1:t}; psi).

Each step contributes E_q[log p(y_t | x_t)] - KL(q || p) to the evidence
lower bound; the expectation uses reparameterized samples pushed through
the known measurement model. At inference only the posterior network runs,
and it draws no random numbers.
"""

import copy
import functools
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from vsex.camera import CameraConfig, measure_clean
from vsex.errors import ConfigError, ContractError, TrainingInstabilityError
from vsex.mathcore import (
    GaussianBelief,
    RngStream,
    gaussian_logpdf,
    kl_gauss_diag,
    reparam_sample,
)
from vsex.neuralnet import (
    DTYPE,
    AdamState,
    GruStack,
    adam_step,
    backward,
    config_hash,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

Measure = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class TrainConfig:
    """
    Network sizes and optimisation settings for VSE training.

    Defaults follow the desk setup: two GRU layers of 80 units, a 128-unit
    head, L=10 samples, batch 128, 500 epochs, Adam from 1e-3.
    """

    state_dim: int = 3
    hidden_dim: int = 80
    num_layers: int = 2
    head_dim: int = 128
    samples: int = 10
    batch_size: int = 128
    epochs: int = 500
    lr: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 20
    lr_min: float = 1e-5
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    early_stop_patience: int = 60
    seed: int = 0
    state_offset: Tuple[float, ...] = (0.0, 0.0, 25.0)
    state_scale: float = 10.0
    show_progress: bool = False

    def __post_init__(self):
        self.state_offset = tuple(float(v) for v in self.state_offset)
        for name in ("state_dim", "hidden_dim", "num_layers", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.samples < 1:
            raise ConfigError("samples (L) must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if len(self.state_offset) != self.state_dim:
            raise ConfigError("state_offset length must equal state_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["state_offset"] = list(self.state_offset)
        d.pop("show_progress")
        return d


class VseModel(nn.Module):
    """
    The prior network (theta), the posterior network (psi) and the known
    measurement model they are trained against.
    """

    def __init__(
        self,
        prior_net: GruStack,
        post_net: GruStack,
        measure: Measure,
        sigma_w2: float,
        samples: int = 10,
        camera: Optional[CameraConfig] = None,
    ):
        super().__init__()
        if prior_net.input_dim != post_net.input_dim:
            raise ContractError(
                "Prior and posterior networks take different input widths"
            )
        if prior_net.state_dim != post_net.state_dim:
            raise ContractError(
                "Prior and posterior networks emit different state widths"
            )
        if sigma_w2 <= 0:
            raise ConfigError(f"sigma_w2 must be positive, got {sigma_w2}")
        self.prior_net = prior_net
        self.post_net = post_net
        self.measure = measure
        self.sigma_w2 = float(sigma_w2)
        self.samples = samples
        self.camera = camera

    @property
    def input_dim(self) -> int:
        return self.post_net.input_dim

    @property
    def state_dim(self) -> int:
        return self.post_net.state_dim

    @classmethod
    def build(
        cls,
        config: TrainConfig,
        input_dim: int,
        sigma_w2: float,
        measure: Optional[Measure] = None,
        camera: Optional[CameraConfig] = None,
        stream: Optional[RngStream] = None,
    ) -> "VseModel":
        """Fresh model; weights drawn from stream (default: seed's "init")."""
        if measure is None:
            if camera is None:
                raise ConfigError("Either a measure or a camera is required")
            measure = camera_measure(camera)
        stream = stream or RngStream(config.seed).child("init")
        nets = []
        for role in ("prior", "post"):
            net = GruStack(
                input_dim,
                config.state_dim,
                config.hidden_dim,
                config.num_layers,
                config.head_dim,
                config.state_offset,
                config.state_scale,
            )
            nets.append(init_params(net, stream.child(role)))
        return cls(nets[0], nets[1], measure, sigma_w2, config.samples, camera)


def camera_measure(camera: CameraConfig) -> Measure:
    return functools.partial(measure_clean, cfg=camera)


@dataclass
class ElboReport:
    """Per-step reconstruction and KL terms (nats) and their total."""

    reconstruction: np.ndarray
    kl: np.ndarray
    total: float


def _as_input(y) -> torch.Tensor:
    if not torch.is_tensor(y):
        y = torch.as_tensor(np.asarray(y))
    return y.to(DTYPE)


def prior_sequence(theta: GruStack, y) -> GaussianBelief:
    """
    Prior beliefs p(x_t | y_{1:t-1}) for t = 1..T.

    The network reads y_{t-1} at step t and a zero vector at t = 1.
    """
    y = _as_input(y)
    if y.shape[-2] < 1:
        raise ContractError("Sequence must have at least one step")
    shifted = torch.cat([torch.zeros_like(y[..., :1, :]), y[..., :-1, :]], -2)
    return theta(shifted)


def posterior_sequence(psi: GruStack, y) -> GaussianBelief:
    """Posterior beliefs q(x_t | y_{1:t}) for t = 1..T."""
    y = _as_input(y)
    if y.shape[-2] < 1:
        raise ContractError("Sequence must have at least one step")
    return psi(y)


def draw_eps(stream: RngStream, batch_shape, samples: int, dim: int):
    """Standard-normal perturbations of shape batch_shape + (L, m)."""
    shape = tuple(batch_shape) + (samples, dim)
    return torch.as_tensor(stream.normal(shape), dtype=DTYPE)


def elbo_terms(
    model: VseModel, y, eps: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Differentiable per-step reconstruction and KL terms.

    Args:
        y: Measurements (..., T, n).
        eps: Perturbations (..., T, L, m).

    Returns:
        (reconstruction, kl), each of shape (..., T).
    """
    y = _as_input(y)
    if y.shape[-1] != model.input_dim:
        raise ContractError(
            f"Model expects {model.input_dim} measurement channels, "
            f"got {y.shape[-1]}"
        )
    post = posterior_sequence(model.post_net, y)
    prior = prior_sequence(model.prior_net, y)
    stacked = GaussianBelief(
        post.mean.unsqueeze(-2), post.var_diag.unsqueeze(-2)
    )
    x = reparam_sample(stacked, eps)
    var_w = torch.full((model.input_dim,), model.sigma_w2, dtype=DTYPE)
    loglik = gaussian_logpdf(y.unsqueeze(-2), model.measure(x), var_w)
    return loglik.mean(-1), kl_gauss_diag(post, prior)


def elbo(model: VseModel, y, stream: RngStream) -> ElboReport:
    """ELBO of one sequence y (T, n), L fresh samples per step."""
    y = _as_input(y)
    eps = draw_eps(stream, y.shape[:-1], model.samples, model.state_dim)
    with torch.no_grad():
        recon, kl = elbo_terms(model, y, eps)
    recon = recon.numpy().copy()
    kl = kl.numpy().copy()
    return ElboReport(recon, kl, float(np.sum(recon - kl)))


def mean_elbo(
    model: VseModel, Y: np.ndarray, stream: RngStream, batch_size: int = 128
) -> float:
    """Mean ELBO per time step per sequence over a set (N, T, n)."""
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(Y), batch_size):
            y = _as_input(Y[start : start + batch_size])
            eps = draw_eps(
                stream, y.shape[:-1], model.samples, model.state_dim
            )
            recon, kl = elbo_terms(model, y, eps)
            total += float((recon - kl).sum())
            count += int(np.prod(recon.shape))
    return total / count


@dataclass
class EpochRecord:
    epoch: int
    train_elbo: float
    val_elbo: float
    lr: float
    grad_norm: float
    wall_time_s: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: VseModel
    optimizer: AdamState
    initial: EpochRecord
    history: List[EpochRecord] = field(default_factory=list)
    train_indices: np.ndarray = None
    val_indices: np.ndarray = None
    epoch: int = 0
    state_reads: int = 0


def split_indices(
    n_seq: int, val_fraction: float, stream: RngStream
) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; tiny sets validate on the train set."""
    order = stream.permutation(n_seq)
    n_val = int(round(val_fraction * n_seq))
    if n_val == 0 or n_val >= n_seq:
        return np.sort(order), np.sort(order)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(
    dataset,
    config: TrainConfig,
    measure: Optional[Measure] = None,
    sigma_w2: Optional[float] = None,
    camera: Optional[CameraConfig] = None,
    resume: Optional[str] = None,
    checkpoint_path: Optional[str] = None,
) -> TrainResult:
    """
    Jointly train both networks by maximising the mean ELBO per time step.

    Only ``dataset.measurements`` is read. The measurement model and noise
    variance default to the camera and sigma_w2 recorded in the dataset
    meta. With ``resume`` the weights, optimizer moments and schedule of a
    checkpoint are restored and epoch numbering continues.

    Raises:
        TrainingInstabilityError: On a non-finite loss or gradient; the
            best weights seen so far are attached, and are written to
            checkpoint_path together with the optimizer state of the same
            epoch when a path is given.
    """
    Y = np.asarray(dataset.measurements, dtype=np.float64)
    meta = getattr(dataset, "meta", {}) or {}
    if camera is None and measure is None and "camera" in meta:
        camera = CameraConfig(**meta["camera"])
    if sigma_w2 is None:
        sigma_w2 = meta.get("sigma_w2")
    if sigma_w2 is None:
        raise ConfigError("sigma_w2 is neither given nor in dataset meta")

    root = RngStream(config.seed)
    train_idx, val_idx = split_indices(
        len(Y), config.val_fraction, root.child("split")
    )
    Y_train, Y_val = Y[train_idx], Y[val_idx]

    start_epoch = 0
    if resume:
        model, ckpt_meta, tensors = load_model(resume, measure=measure)
        if model.input_dim != Y.shape[-1]:
            raise ContractError(
                f"Checkpoint expects {model.input_dim} channels, "
                f"dataset has {Y.shape[-1]}"
            )
        optimizer = _make_optimizer(model, config)
        optimizer.load_state_tensors(tensors)
        _restore_schedule(optimizer, ckpt_meta)
        start_epoch = int(ckpt_meta.get("epoch", 0))
        logging.info(f"[TRAIN] Resuming from {resume} at epoch {start_epoch}")
    else:
        model = VseModel.build(
            config, Y.shape[-1], sigma_w2, measure=measure, camera=camera
        )
        optimizer = _make_optimizer(model, config)

    def evaluate(which: str, data: np.ndarray) -> float:
        return mean_elbo(
            model, data, root.child("evaluate", which), config.batch_size
        )

    initial = EpochRecord(
        start_epoch,
        evaluate("train", Y_train),
        evaluate("validation", Y_val),
        optimizer.lr,
        0.0,
        0.0,
    )
    logging.info(
        f"[TRAIN] Epoch {start_epoch}: train ELBO {initial.train_elbo:.4f}, "
        f"validation ELBO {initial.val_elbo:.4f}"
    )
    result = TrainResult(
        model,
        optimizer,
        initial,
        train_indices=train_idx,
        val_indices=val_idx,
        epoch=start_epoch,
    )
    best_val = initial.val_elbo
    best_epoch = start_epoch
    best_state = copy.deepcopy(model.state_dict())
    best_optim = _optimizer_snapshot(optimizer)
    bad_epochs = 0
    started = time.perf_counter()
    epochs = range(start_epoch + 1, start_epoch + config.epochs + 1)
    for epoch in tqdm(
        epochs, desc="Training", disable=not config.show_progress
    ):
        order = root.child("shuffle", epoch).permutation(len(Y_train))
        obj_sum, norm_sum, batches = 0.0, 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            y = _as_input(Y_train[order[start : start + config.batch_size]])
            eps = draw_eps(
                root.child("eps", epoch, b),
                y.shape[:-1],
                config.samples,
                config.state_dim,
            )
            recon, kl = elbo_terms(model, y, eps)
            objective = (recon - kl).mean()
            try:
                backward(-objective, model)
            except TrainingInstabilityError as e:
                logging.error(f"[TRAIN] Epoch {epoch} batch {b}: {e}")
                model.load_state_dict(best_state)
                _optimizer_restore(optimizer, best_optim)
                if checkpoint_path:
                    save_model(
                        model, checkpoint_path, config, optimizer, best_epoch
                    )
                e.last_good = best_state
                raise
            norm_sum += adam_step(optimizer)
            obj_sum += float(objective)
            batches += 1
        val = evaluate("validation", Y_val)
        optimizer.scheduler.step(val)
        record = EpochRecord(
            epoch,
            obj_sum / batches,
            val,
            optimizer.lr,
            norm_sum / batches,
            time.perf_counter() - started,
        )
        result.history.append(record)
        result.epoch = epoch
        logging.debug(
            f"[TRAIN] Epoch {epoch}: train {record.train_elbo:.4f}, "
            f"validation {val:.4f}, lr {record.lr:.2e}, "
            f"|g| {record.grad_norm:.3f}"
        )
        if val > best_val:
            best_val, best_epoch, bad_epochs = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
            best_optim = _optimizer_snapshot(optimizer)
        else:
            bad_epochs += 1
        if config.early_stop_patience and (
            bad_epochs >= config.early_stop_patience
        ):
            logging.info(
                f"[TRAIN] Early stop at epoch {epoch}: no validation "
                f"improvement for {bad_epochs} epochs"
            )
            break

    model.load_state_dict(best_state)
    result.state_reads = getattr(dataset, "state_reads", 0)
    logging.info(
        f"[TRAIN] Finished at epoch {result.epoch}, best validation ELBO "
        f"{best_val:.4f}, state reads {result.state_reads}"
    )
    if checkpoint_path:
        save_model(model, checkpoint_path, config, optimizer, result.epoch)
    return result


def _make_optimizer(model: VseModel, config: TrainConfig) -> AdamState:
    return AdamState.create(
        model.parameters(),
        lr=config.lr,
        clip_norm=config.clip_norm,
        lr_factor=config.lr_factor,
        lr_patience=config.lr_patience,
        lr_min=config.lr_min,
    )


def _restore_schedule(optimizer: AdamState, meta: dict) -> None:
    schedule = meta.get("schedule", {})
    if "lr" in schedule:
        for group in optimizer.optimizer.param_groups:
            group["lr"] = schedule["lr"]
    scheduler = optimizer.scheduler
    scheduler.best = schedule.get("best", scheduler.best)
    scheduler.num_bad_epochs = schedule.get("num_bad_epochs", 0)
    scheduler.last_epoch = schedule.get("last_epoch", 0)
    scheduler._last_lr = [g["lr"] for g in optimizer.optimizer.param_groups]


def _optimizer_snapshot(optimizer: AdamState) -> dict:
    return {
        "optimizer": copy.deepcopy(optimizer.optimizer.state_dict()),
        "scheduler": copy.deepcopy(optimizer.scheduler.state_dict()),
    }


def _optimizer_restore(optimizer: AdamState, snapshot: dict) -> None:
    optimizer.optimizer.load_state_dict(snapshot["optimizer"])
    optimizer.scheduler.load_state_dict(snapshot["scheduler"])


def infer(model: VseModel, y) -> Tuple[GaussianBelief, np.ndarray]:
    """
    Posterior beliefs and point estimates (the posterior means).

    Runs only the posterior network and draws no random numbers.

    Raises:
        ContractError: If y does not have the model's measurement width.
    """
    y = _as_input(y)
    if y.shape[-1] != model.input_dim:
        raise ContractError(
            f"Model expects {model.input_dim} measurement channels, "
            f"got {y.shape[-1]}"
        )
    with torch.no_grad():
        belief = posterior_sequence(model.post_net, y).numpy()
    logging.debug(f"[INFER] Estimated {y.shape[-2]} steps")
    return belief, belief.mean


def save_model(
    model: VseModel,
    path: str,
    config: TrainConfig,
    optimizer: Optional[AdamState] = None,
    epoch: int = 0,
) -> None:
    tensors = {}
    for role, net in (("prior", model.prior_net), ("post", model.post_net)):
        for name, value in net.state_dict().items():
            tensors[f"{role}.{name}"] = value
    meta = {
        "format": "VSEPARAM",
        "architecture": model.post_net.architecture(),
        "sigma_w2": model.sigma_w2,
        "samples": model.samples,
        "camera": model.camera.to_dict() if model.camera else None,
        "epoch": epoch,
        "training": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
    }
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        scheduler = optimizer.scheduler
        meta["schedule"] = {
            "lr": optimizer.lr,
            "best": float(scheduler.best),
            "num_bad_epochs": int(scheduler.num_bad_epochs),
            "last_epoch": int(scheduler.last_epoch),
        }
    save_checkpoint(path, tensors, meta)


def load_model(
    path: str, measure: Optional[Measure] = None
) -> Tuple[VseModel, dict, dict]:
    """
    Rebuild a VseModel from a checkpoint.

    Returns:
        (model, sidecar meta, raw tensor table)
    """
    tensors, meta = load_checkpoint(path)
    arch = meta["architecture"]
    camera = CameraConfig(**meta["camera"]) if meta.get("camera") else None
    if measure is None:
        if camera is None:
            raise ContractError(f"{path} records no measurement model")
        measure = camera_measure(camera)
    nets = []
    for role in ("prior", "post"):
        net = GruStack(
            arch["input_dim"],
            arch["state_dim"],
            arch["hidden_dim"],
            arch["num_layers"],
            arch["head_dim"],
            arch["state_offset"],
            arch["state_scale"],
        )
        prefix = f"{role}."
        state = {
            k[len(prefix) :]: v
            for k, v in tensors.items()
            if k.startswith(prefix)
        }
        try:
            net.load_state_dict(state)
        except RuntimeError as e:
            raise ContractError(
                f"{path}: {role} tensors do not match the architecture"
            ) from e
        nets.append(net)
    model = VseModel(
        nets[0], nets[1], measure, meta["sigma_w2"], meta["samples"], camera
    )
    logging.info(f"[CKPT] Loaded model from {path} (epoch {meta['epoch']})")
    return model, meta, tensors
