"""
Recurrent networks shared by the prior and posterior of VSE.

A stack of GRU layers feeds a fully-connected Gaussian head that emits a
diagonal Gaussian belief per time step. Gradients come from torch autograd;
parameters are trained with torch's Adam behind a global-norm clip.

Parameter checkpoints use the VSEPARAM binary layout:

    magic "VSEPARAM" | u32 version | u32 tensor count
    per tensor: u32 name length | name (utf-8) | u32 ndim | u64 dims...
                | little-endian f64 data

plus a JSON sidecar (``<path>.json``) with architecture and training
metadata.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vsex.errors import (
    ContractError,
    FormatError,
    TrainingInstabilityError,
    TruncatedFileError,
    VersionError,
)
from vsex.mathcore import VARIANCE_FLOOR, GaussianBelief, RngStream
from vsex.utils import atomic_write, read_json, write_json

DTYPE = torch.float64
PARAM_MAGIC = b"VSEPARAM"
PARAM_VERSION = 1


class GruLayer(nn.Module):
    """
    One GRU layer with separate input (W) and hidden (U) maps per gate.

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        c = tanh(W_h x + U_h (r * h) + b_h)
        h' = (1 - z) * h + z * c
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for gate in ("z", "r", "h"):
            self.register_parameter(
                f"W_{gate}",
                nn.Parameter(torch.zeros(hidden_dim, input_dim, dtype=DTYPE)),
            )
            self.register_parameter(
                f"U_{gate}",
                nn.Parameter(
                    torch.zeros(hidden_dim, hidden_dim, dtype=DTYPE)
                ),
            )
            self.register_parameter(
                f"b_{gate}",
                nn.Parameter(torch.zeros(hidden_dim, dtype=DTYPE)),
            )

    def cell(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        z = torch.sigmoid(x @ self.W_z.T + h @ self.U_z.T + self.b_z)
        r = torch.sigmoid(x @ self.W_r.T + h @ self.U_r.T + self.b_r)
        c = torch.tanh(x @ self.W_h.T + (r * h) @ self.U_h.T + self.b_h)
        return (1.0 - z) * h + z * c


class GaussianHead(nn.Module):
    """
    hidden -> ReLU fully-connected layer -> (mean, variance).

    mean = state_offset + state_scale * (W_mean a + b_mean)
    var  = state_scale^2 * softplus(W_var a + b_var) + VARIANCE_FLOOR
    """

    def __init__(
        self,
        hidden_dim: int,
        head_dim: int,
        state_dim: int,
        state_offset: Optional[Iterable[float]] = None,
        state_scale: float = 1.0,
    ):
        super().__init__()
        self.W_fc = nn.Parameter(
            torch.zeros(head_dim, hidden_dim, dtype=DTYPE)
        )
        self.b_fc = nn.Parameter(torch.zeros(head_dim, dtype=DTYPE))
        self.W_mean = nn.Parameter(
            torch.zeros(state_dim, head_dim, dtype=DTYPE)
        )
        self.b_mean = nn.Parameter(torch.zeros(state_dim, dtype=DTYPE))
        self.W_var = nn.Parameter(
            torch.zeros(state_dim, head_dim, dtype=DTYPE)
        )
        self.b_var = nn.Parameter(torch.zeros(state_dim, dtype=DTYPE))
        offset = (
            torch.zeros(state_dim, dtype=DTYPE)
            if state_offset is None
            else torch.as_tensor(list(state_offset), dtype=DTYPE)
        )
        if offset.shape != (state_dim,):
            raise ContractError(
                f"state_offset has shape {tuple(offset.shape)}, "
                f"expected ({state_dim},)"
            )
        self.register_buffer("state_offset", offset)
        self.register_buffer(
            "state_scale", torch.tensor(float(state_scale), dtype=DTYPE)
        )


class GruStack(nn.Module):
    """
    GRU layers plus a Gaussian head: the parameter set of one VSE network.

    Args:
        input_dim (int): Measurement dimension n.
        state_dim (int): State dimension m.
        hidden_dim (int): Units per GRU layer.
        num_layers (int): Number of stacked GRU layers.
        head_dim (int): Units of the fully-connected head layer.
        state_offset, state_scale: Fixed affine map on the head outputs.
    """

    def __init__(
        self,
        input_dim: int,
        state_dim: int,
        hidden_dim: int = 80,
        num_layers: int = 2,
        head_dim: int = 128,
        state_offset: Optional[Iterable[float]] = None,
        state_scale: float = 1.0,
    ):
        super().__init__()
        self.input_dim = input_dim
        self.state_dim = state_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.head_dim = head_dim
        self.layers = nn.ModuleList(
            [
                GruLayer(input_dim if k == 0 else hidden_dim, hidden_dim)
                for k in range(num_layers)
            ]
        )
        self.head = GaussianHead(
            hidden_dim, head_dim, state_dim, state_offset, state_scale
        )

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "state_dim": self.state_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "head_dim": self.head_dim,
            "state_offset": self.head.state_offset.tolist(),
            "state_scale": float(self.head.state_scale),
        }

    def forward(self, inputs: torch.Tensor) -> GaussianBelief:
        return gaussian_head(self, gru_forward(self, inputs))


def init_params(net: GruStack, stream: RngStream) -> GruStack:
    """
    Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Draws come from stream in parameter-name order, so equal streams give
    equal networks.
    """
    with torch.no_grad():
        for name, param in net.named_parameters():
            if param.dim() == 2:
                bound = 1.0 / math.sqrt(param.shape[1])
                values = bound * (2.0 * stream.uniform(tuple(param.shape)) - 1)
                param.copy_(torch.as_tensor(values, dtype=DTYPE))
            else:
                param.zero_()
    return net


def gru_forward(
    params: GruStack,
    inputs: torch.Tensor,
    h0: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Run the GRU stack over inputs of shape (T, n) or (B, T, n).

    Returns hidden states of the last layer, shape (..., T, hidden). The
    output at t depends only on inputs 1..t.
    """
    inputs = torch.as_tensor(inputs, dtype=DTYPE)
    if inputs.shape[-1] != params.input_dim:
        raise ContractError(
            f"Network expects inputs of width {params.input_dim}, "
            f"got {inputs.shape[-1]}"
        )
    batch_shape = inputs.shape[:-2]
    T = inputs.shape[-2]
    sequence = inputs
    for k, layer in enumerate(params.layers):
        h = (
            torch.zeros(batch_shape + (layer.hidden_dim,), dtype=DTYPE)
            if h0 is None
            else h0[k]
        )
        outputs = []
        for t in range(T):
            h = layer.cell(sequence[..., t, :], h)
            outputs.append(h)
        sequence = torch.stack(outputs, dim=-2)
    return sequence


def gaussian_head(params: GruStack, hidden: torch.Tensor) -> GaussianBelief:
    head = params.head
    a = F.relu(hidden @ head.W_fc.T + head.b_fc)
    mean = head.state_offset + head.state_scale * (
        a @ head.W_mean.T + head.b_mean
    )
    var = (
        head.state_scale**2 * F.softplus(a @ head.W_var.T + head.b_var)
        + VARIANCE_FLOOR
    )
    return GaussianBelief(mean, var)


def backward(
    loss: torch.Tensor, *networks: nn.Module
) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of a scalar loss for every parameter of the
    given networks.

    Gradients are left in ``param.grad`` and also returned by name
    (prefixed with the network index when several are given).

    Raises:
        TrainingInstabilityError: If the loss or any gradient is not finite.
    """
    if not torch.isfinite(loss):
        raise TrainingInstabilityError(f"Non-finite loss {float(loss)}")
    named = _named_parameters(networks)
    for _, param in named:
        param.grad = None
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, param in named:
        grad = (
            param.grad
            if param.grad is not None
            else torch.zeros_like(param)
        )
        if param.grad is None:
            param.grad = grad
        if not bool(torch.isfinite(grad).all()):
            raise TrainingInstabilityError(
                f"Non-finite gradient for parameter {name}", parameter=name
            )
        grads[name] = grad
    return grads


def _named_parameters(networks) -> list:
    if len(networks) == 1:
        return list(networks[0].named_parameters())
    return [
        (f"{k}.{name}", param)
        for k, net in enumerate(networks)
        for name, param in net.named_parameters()
    ]


@dataclass
class AdamState:
    """
    Adam optimizer (beta1 0.9, beta2 0.999, eps 1e-8) with global-norm
    gradient clipping and a plateau learning-rate schedule.
    """

    optimizer: torch.optim.Adam
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau
    clip_norm: float = 10.0

    @classmethod
    def create(
        cls,
        parameters: Iterable[nn.Parameter],
        lr: float = 1e-3,
        clip_norm: float = 10.0,
        lr_factor: float = 0.5,
        lr_patience: int = 20,
        lr_min: float = 1e-5,
    ) -> "AdamState":
        optimizer = torch.optim.Adam(
            list(parameters), lr=lr, betas=(0.9, 0.999), eps=1e-8
        )
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer,
            mode="max",
            factor=lr_factor,
            patience=lr_patience,
            min_lr=lr_min,
        )
        return cls(optimizer, scheduler, clip_norm)

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    @property
    def params(self) -> list:
        return [p for g in self.optimizer.param_groups for p in g["params"]]

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        tensors = {}
        for k, param in enumerate(self.params):
            state = self.optimizer.state.get(param)
            if not state:
                continue
            tensors[f"optim.{k}.step"] = torch.as_tensor(
                float(state["step"]), dtype=DTYPE
            )
            tensors[f"optim.{k}.exp_avg"] = state["exp_avg"]
            tensors[f"optim.{k}.exp_avg_sq"] = state["exp_avg_sq"]
        return tensors

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor]) -> None:
        for k, param in enumerate(self.params):
            if f"optim.{k}.step" not in tensors:
                continue
            self.optimizer.state[param] = {
                "step": tensors[f"optim.{k}.step"].clone(),
                "exp_avg": tensors[f"optim.{k}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim.{k}.exp_avg_sq"].clone(),
            }


def adam_step(state: AdamState, lr: Optional[float] = None) -> float:
    """
    Clip the gradients held in ``param.grad`` to the global norm and apply
    one Adam update.

    Returns:
        float: The gradient norm before clipping.
    """
    if lr is not None:
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    norm = torch.nn.utils.clip_grad_norm_(state.params, state.clip_norm)
    state.optimizer.step()
    return float(norm)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(
    path: str, tensors: Dict[str, torch.Tensor], meta: dict
) -> None:
    """Write tensors in the VSEPARAM layout and meta as a JSON sidecar."""
    chunks = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(
            tensor.detach().cpu().numpy(), dtype="<f8"
        )
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    atomic_write(path, b"".join(chunks))
    write_json(meta, path + ".json")
    logging.info(f"[CKPT] Saved {len(tensors)} tensors to {path}")


def load_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], dict]:
    """
    Read a VSEPARAM file and its JSON sidecar.

    Raises:
        FormatError: On bad magic or an unreadable sidecar.
        VersionError: On a different format version.
        TruncatedFileError: If the tensor table runs past the end of file.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise FormatError(f"{path} is not a VSEPARAM checkpoint")
    offset = len(PARAM_MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, offset)
        if version != PARAM_VERSION:
            raise VersionError(version, PARAM_VERSION, path)
        offset += 8
        tensors = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + length].decode("utf-8")
            offset += length
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * size > len(blob):
                raise TruncatedFileError(f"{path}: tensor {name} truncated")
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            tensors[name] = torch.as_tensor(
                data.reshape(shape).astype(np.float64)
            )
    except struct.error as e:
        raise TruncatedFileError(f"{path}: tensor table truncated") from e
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: unreadable tensor name") from e
    try:
        meta = read_json(path + ".json")
    except (OSError, ValueError) as e:
        raise FormatError(f"Cannot read checkpoint sidecar {path}.json") from e
    return tensors, meta
