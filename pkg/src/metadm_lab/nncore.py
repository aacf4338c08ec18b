"""Numeric substrate: layers, autograd entry points, optimizers, checkpoints.

Tensors are plain 32-bit ``torch.Tensor`` objects and the tape is torch's
autograd graph. Everything above that (initialisation, the optimizers, the
checkpoint format and the finite-difference checker) lives here so the rest
of the package has one place to get its numerics from.
"""

from __future__ import annotations

import copy
import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    DimensionError,
    FormatError,
    GraphError,
    MissingGradError,
    NonDeterministicLossError,
)

DTYPE = torch.float32
CHECKPOINT_MAGIC = b"MDMC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layers


def he_uniform_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """He-uniform weights for conv/linear layers, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    """conv3x3 -> batch-norm -> ReLU -> max-pool 2x2.

    The conv has no bias: batch-norm would cancel it and its gradient is 0.
    """
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


def spatial_mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(-2, -1))


def conv2d_forward(input, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with explicit shape validation.

    Raises :class:`DimensionError` naming the axis that does not line up,
    instead of the backend's generic message.
    """
    if input.dim() != 4:
        raise DimensionError(f"input must be [B,C,H,W], got {tuple(input.shape)}", axis="ndim")
    if weight.dim() != 4:
        raise DimensionError(f"weight must be [O,C,k,k], got {tuple(weight.shape)}", axis="ndim")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}", axis="stride")
    if padding < 0:
        raise DimensionError(f"padding must be >= 0, got {padding}", axis="padding")
    _, c, h, w = input.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"channel mismatch: input has {c}, weight expects {wc}", axis="C")
    if kh > h + 2 * padding:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {h + 2 * padding}", axis="H")
    if kw > w + 2 * padding:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {w + 2 * padding}", axis="W")
    if bias is not None and tuple(bias.shape) != (o,):
        raise DimensionError(f"bias must have shape ({o},), got {tuple(bias.shape)}", axis="O")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------------------
# autograd


def backward_pass(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Gradients accumulate into existing buffers. The graph is freed afterwards
    unless ``retain_graph`` is set; a second call then raises :class:`GraphError`.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise GraphError("loss was not produced by a recorded computation")
    try:
        loss.backward(retain_graph=retain_graph)
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise GraphError("graph already consumed; re-run the forward pass") from exc
        raise


# ---------------------------------------------------------------------------
# parameters & checkpoints


def model_params(module: nn.Module) -> OrderedDict:
    """Named float tensors that define ``module``: parameters then float buffers."""
    out = OrderedDict()
    for name, p in module.named_parameters():
        out[name] = p
    for name, b in module.named_buffers():
        if b.is_floating_point():
            out[name] = b
    return out


def total_count(params) -> int:
    return sum(t.numel() for t in params.values())


def encode_params(params) -> bytes:
    """Serialize named tensors into the ``MDMC`` checkpoint layout."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        t = t.detach().to(DTYPE).contiguous()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype("<f4").tobytes())
    return b"".join(parts)


def decode_params(buf: bytes, offset: int = 0):
    """Inverse of :func:`encode_params`. Returns ``(params, end_offset)``."""
    import numpy as np

    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError("checkpoint truncated")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not an MDMC checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = math.prod(dims)
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32)
        params[name] = torch.from_numpy(data.reshape(dims).copy())
    return params, offset


def load_into(module: nn.Module, params) -> nn.Module:
    own = model_params(module)
    missing = [k for k in own if k not in params]
    extra = [k for k in params if k not in own]
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing={missing} unexpected={extra}")
    with torch.no_grad():
        for name, t in own.items():
            if tuple(t.shape) != tuple(params[name].shape):
                raise FormatError(f"shape mismatch for {name}: {tuple(params[name].shape)} vs {tuple(t.shape)}")
            t.copy_(params[name])
    return module


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    learning_rate: float
    step_count: int = 0
    buffers: dict = field(default_factory=dict)


class Optimizer:
    """Base for the first-order optimizers.

    Policy: ``step`` refuses to run if any trainable parameter lacks a grad,
    and zeroes all grads after updating.
    """

    def __init__(self, params, lr: float):
        if isinstance(params, nn.Module):
            params = OrderedDict(params.named_parameters())
        self.params = OrderedDict((k, p) for k, p in params.items() if p.requires_grad)
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.state = OptimizerState(learning_rate=lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise MissingGradError(missing)
        self.state.step_count += 1
        with torch.no_grad():
            for name, p in self.params.items():
                self._update(name, p, p.grad)
        self.zero_grad()

    def _update(self, name, p, g):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum

    def _update(self, name, p, g):
        lr = self.state.learning_rate
        if self.momentum:
            buf = self.state.buffers.get(name)
            buf = g.clone() if buf is None else buf.mul_(self.momentum).add_(g)
            self.state.buffers[name] = buf
            g = buf
        if lr:
            p.sub_(lr * g)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps

    def _update(self, name, p, g):
        b1, b2 = self.betas
        m, v = self.state.buffers.get(name, (None, None))
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        self.state.buffers[name] = (m, v)
        t = self.state.step_count
        lr = self.state.learning_rate
        if lr == 0:
            return
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))


def optimizer_step(optimizer: Optimizer) -> None:
    optimizer.step()


def make_optimizer(name: str, params, lr: float) -> Optimizer:
    name = name.lower()
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tolerance: float

    @property
    def failed(self) -> list:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _one_sided(loss_fn, ref, flat, i, h):
    """Forward and backward differences ``(f(x+h)-f(x))/h``, ``(f(x)-f(x-h))/h``."""
    orig = flat[i].item()
    with torch.no_grad():
        mid = loss_fn(ref).item()
        flat[i] = orig + h
        up = loss_fn(ref).item()
        flat[i] = orig - h
        down = loss_fn(ref).item()
        flat[i] = orig
    return (up - mid) / h, (mid - down) / h


def _rel(a: float, b: float, eps: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), eps)


def gradient_check(model: nn.Module, loss_fn, tolerance: float = 1e-2, h: float = 1e-3,
                   samples_per_param: int = 8, seed: int = 0, eps: float = 1e-6,
                   kink_retries: int = 3, noise_floor: float = 1e-4) -> GradCheckReport:
    """Compare autograd gradients with float64 central differences.

    ``loss_fn(model)`` must return a scalar and build any inputs in the
    model's parameter dtype (see :func:`param_dtype`); it is called on a
    float64 copy for the numeric side. Frozen parameters are skipped.

    ReLU and max-pool make the loss piecewise smooth. When the forward and
    backward differences disagree by more than ``tolerance/4`` the interval
    ``[x-h, x+h]`` may straddle a kink, and the step is shrunk tenfold (at
    most ``kink_retries`` times). The numeric gradient is their mean, i.e.
    the central difference.

    Relative errors use ``max(|analytic|, |numeric|, eps')`` as denominator,
    with ``eps' = max(eps, noise_floor * largest |analytic| in the model)``:
    gradients that are exactly zero in theory come back from 32-bit
    autograd as rounding noise at that scale.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    again = loss_fn(model)
    if not torch.equal(loss.detach(), again.detach()):
        raise NonDeterministicLossError("loss_fn returned different values on identical inputs")
    backward_pass(loss)

    grads = [p.grad.abs().max().item() for p in model.parameters() if p.requires_grad and p.grad is not None]
    eps = max(eps, noise_floor * max(grads, default=0.0))
    ref = copy.deepcopy(model).double()
    ref_params = dict(ref.named_parameters())
    gen = torch.Generator().manual_seed(seed)
    report = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise MissingGradError([name])
        analytic = p.grad.detach().double().flatten()
        q = ref_params[name]
        n = q.numel()
        idx = torch.randperm(n, generator=gen)[:min(samples_per_param, n)]
        worst = 0.0
        flat = q.data.view(-1)
        for i in idx.tolist():
            step = h
            fwd, bwd = _one_sided(loss_fn, ref, flat, i, step)
            for _ in range(kink_retries):
                if _rel(fwd, bwd, eps) <= tolerance / 4:
                    break
                step /= 10
                fwd, bwd = _one_sided(loss_fn, ref, flat, i, step)
            numeric = (fwd + bwd) / 2
            worst = max(worst, _rel(analytic[i].item(), numeric, eps))
        report[name] = worst
    model.zero_grad(set_to_none=True)
    return GradCheckReport(report, tolerance)


def param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype
