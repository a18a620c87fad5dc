"""
Shared actor-critic CNN, its gradients, and the GRPN1 checkpoint format.
"""

import hashlib
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from robust_mapf.grid_env import NUM_ACTIONS, NUM_CHANNELS

logger = logging.getLogger(__name__)

NetParams = Dict[str, torch.Tensor]
NetGrads = Dict[str, torch.Tensor]

KERNEL = 3
WINDOW = 5
CONV1_CHANNELS = 32
CONV2_CHANNELS = 64
TRUNK_UNITS = 128
PARAM_COUNT = (
    CONV1_CHANNELS * NUM_CHANNELS * KERNEL * KERNEL
    + CONV1_CHANNELS
    + CONV2_CHANNELS * CONV1_CHANNELS * KERNEL * KERNEL
    + CONV2_CHANNELS
    + CONV2_CHANNELS * WINDOW * WINDOW * TRUNK_UNITS
    + TRUNK_UNITS
    + TRUNK_UNITS * NUM_ACTIONS
    + NUM_ACTIONS
    + TRUNK_UNITS
    + 1
)

CHECKPOINT_MAGIC = b"GRPN1"
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


class TraceConsumedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class PolicyOutput:
    logits: torch.Tensor  # (B, 5)
    value: torch.Tensor  # (B,)

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=-1)

    def entropy(self) -> torch.Tensor:
        return -(self.probs * self.log_probs).sum(dim=-1)

    def greedy(self) -> torch.Tensor:
        return self.logits.argmax(dim=-1)


class PolicyNet(nn.Module):
    """Two 3×3 same-padded conv layers, a 128-unit trunk, actor and critic heads."""

    def __init__(self) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(NUM_CHANNELS, CONV1_CHANNELS, KERNEL, padding=KERNEL // 2)
        self.conv2 = nn.Conv2d(CONV1_CHANNELS, CONV2_CHANNELS, KERNEL, padding=KERNEL // 2)
        self.trunk = nn.Linear(CONV2_CHANNELS * WINDOW * WINDOW, TRUNK_UNITS)
        self.actor = nn.Linear(TRUNK_UNITS, NUM_ACTIONS)
        self.critic = nn.Linear(TRUNK_UNITS, 1)

    def forward(self, obs: torch.Tensor) -> PolicyOutput:
        if obs.dim() != 4 or tuple(obs.shape[1:]) != (NUM_CHANNELS, WINDOW, WINDOW):
            raise ValueError(
                f"expected observations of shape (B, {NUM_CHANNELS}, {WINDOW}, {WINDOW}), "
                f"got {tuple(obs.shape)}"
            )
        h = F.relu(self.conv1(obs))
        h = F.relu(self.conv2(h))
        h = F.relu(self.trunk(h.flatten(start_dim=1)))
        return PolicyOutput(self.actor(h), self.critic(h).squeeze(-1))

    def named_tensors(self) -> NetParams:
        return OrderedDict((name, p) for name, p in self.named_parameters())


def init_params(seed: int) -> PolicyNet:
    """Fan-in scaled uniform weights from a seeded generator, zero biases."""
    generator = torch.Generator().manual_seed(seed)
    net = PolicyNet()
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(p[0].numel())
                p.uniform_(-bound, bound, generator=generator)
    return net


def clone_frozen(net: nn.Module) -> nn.Module:
    """Parameter snapshot with gradients disabled."""
    copy = PolicyNet() if isinstance(net, PolicyNet) else type(net)()
    copy.load_state_dict(net.state_dict())
    copy.requires_grad_(False)
    return copy


@dataclass
class ForwardTrace:
    """Autograd record of one forward pass; backward may use it once."""

    net: PolicyNet
    obs: torch.Tensor
    output: PolicyOutput
    consumed: bool = field(default=False)

    def consume(self) -> None:
        if self.consumed:
            raise TraceConsumedError("forward trace was already used for a backward pass")
        self.consumed = True


def forward(net: PolicyNet, obs: Union[torch.Tensor, np.ndarray]) -> Tuple[PolicyOutput, ForwardTrace]:
    x = torch.as_tensor(obs, dtype=next(net.parameters()).dtype)
    if not torch.isfinite(x).all():
        raise ValueError("observations must be finite")
    output = net(x)
    return output, ForwardTrace(net, x, output)


def backward_params(
    trace: ForwardTrace,
    logits_grad: Optional[torch.Tensor] = None,
    value_grad: Optional[torch.Tensor] = None,
) -> NetGrads:
    """Gradients of a scalar loss given its upstream gradients at the heads."""
    trace.consume()
    out = trace.output
    logits_grad = torch.zeros_like(out.logits) if logits_grad is None else logits_grad
    value_grad = torch.zeros_like(out.value) if value_grad is None else value_grad
    params = trace.net.named_tensors()
    grads = torch.autograd.grad(
        (out.logits, out.value),
        tuple(params.values()),
        grad_outputs=(logits_grad, value_grad),
        allow_unused=True,
    )
    return OrderedDict(
        (name, torch.zeros_like(p) if g is None else g)
        for (name, p), g in zip(params.items(), grads)
    )


@dataclass(frozen=True)
class CrossEntropyTarget:
    action: int


@dataclass(frozen=True)
class KLReference:
    probs: torch.Tensor  # (5,) fixed reference distribution


LossSpec = Union[CrossEntropyTarget, KLReference]


def kl_to_reference(reference: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-row KL(reference || softmax(logits))."""
    return F.kl_div(F.log_softmax(logits, dim=-1), reference, reduction="none").sum(dim=-1)


def input_gradient(net: nn.Module, obs: torch.Tensor, loss: LossSpec) -> torch.Tensor:
    """Gradient of a scalar loss with respect to one observation tensor."""
    x = torch.as_tensor(obs, dtype=next(net.parameters()).dtype).detach().clone()
    x = x.unsqueeze(0).requires_grad_(True)
    logits = net(x).logits
    if isinstance(loss, CrossEntropyTarget):
        value = F.cross_entropy(logits, torch.tensor([loss.action]))
    else:
        value = kl_to_reference(loss.probs.to(logits.dtype).unsqueeze(0), logits).sum()
    (grad,) = torch.autograd.grad(value, x)
    return grad.squeeze(0)


def _fnv1a64(payload: bytes) -> int:
    h = _FNV_OFFSET
    for byte in payload:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def encode_checkpoint(params: NetParams) -> bytes:
    chunks = []
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        dims = tuple(tensor.shape)
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        data = tensor.detach().cpu().to(torch.float32).numpy()
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    return CHECKPOINT_MAGIC + payload + struct.pack("<Q", _fnv1a64(payload))


def decode_checkpoint(blob: bytes) -> NetParams:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad checkpoint header")
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    payload = blob[len(CHECKPOINT_MAGIC) : -8]
    (checksum,) = struct.unpack("<Q", blob[-8:])
    if checksum != _fnv1a64(payload):
        raise CheckpointError("checkpoint checksum mismatch")

    params: NetParams = OrderedDict()
    offset = 0
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            params[name] = torch.from_numpy(data.astype(np.float32).reshape(dims))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint payload: {e}") from e
    return params


def save_checkpoint(net: PolicyNet, path: Union[str, Path]) -> str:
    """Write ``net`` in GRPN1 format; returns the file's SHA-256."""
    blob = encode_checkpoint(net.named_tensors())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    logger.debug("checkpoint %s written (%d bytes)", path, len(blob))
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> PolicyNet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params = decode_checkpoint(path.read_bytes())
    net = PolicyNet()
    expected = net.named_tensors()
    if list(params) != list(expected):
        raise CheckpointError(f"unexpected tensor names {list(params)}")
    for name, tensor in params.items():
        if tensor.shape != expected[name].shape:
            raise CheckpointError(
                f"{name}: shape {tuple(tensor.shape)} != {tuple(expected[name].shape)}"
            )
    total = sum(t.numel() for t in params.values())
    if total != PARAM_COUNT:
        raise CheckpointError(f"parameter count {total} != {PARAM_COUNT}")
    if not all(torch.isfinite(t).all() for t in params.values()):
        raise CheckpointError("checkpoint holds non-finite values")
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(params[name])
    return net


def checkpoint_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
