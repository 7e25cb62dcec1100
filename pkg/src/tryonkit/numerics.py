"""Dense-tensor numerics shared by every other module.

Tensors are ``torch.float64`` arrays; all ops here are unbatched and pure.
Convolution follows the cross-correlation convention (no kernel flip), which
is what the Sobel kernels in :mod:`tryonkit.imaging` are oriented against.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DTYPE = torch.float64


class NumericError(RuntimeError):
    """Raised when a computation produces NaN/Inf or diverges."""


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class Rng:
    """Seeded generator (numpy PCG64) that produces float64 torch tensors.

    Components draw from named child streams so adding a new parameter never
    shifts the values drawn for unrelated ones.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def child(self, name: str) -> "Rng":
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def normal(self, shape: Sequence[int]) -> Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape)))

    def uniform(self, low: float, high: float, shape: Sequence[int]) -> Tensor:
        return torch.from_numpy(self._gen.uniform(low, high, tuple(shape)))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


# --------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.dim() != 1:
            raise ValueError("linear weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"linear out_features {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ConvParams:
    weight: Tensor  # [out, in, k, k]
    bias: Tensor  # [out]

    def __post_init__(self):
        w = self.weight
        if w.dim() != 4:
            raise ValueError(f"conv weight must be 4-D, got shape {tuple(w.shape)}")
        if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ValueError(f"conv kernel must be square with odd side, got {tuple(w.shape[2:])}")
        if self.bias.dim() != 1 or self.bias.shape[0] != w.shape[0]:
            raise ValueError(f"conv bias length {tuple(self.bias.shape)} != out channels {w.shape[0]}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True)
class AttnParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    heads: int

    def __post_init__(self):
        dim = self.q.out_features
        if self.k.out_features != dim or self.v.out_features != dim or self.o.in_features != dim:
            raise ValueError("attention projections disagree on model width")
        if self.heads < 1 or dim % self.heads:
            raise ValueError(f"model width {dim} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class FFNParams:
    inner: LinearParams
    outer: LinearParams


class ParamStore(dict):
    """Flat ``name -> Tensor`` mapping with typed views by prefix."""

    def linear(self, prefix: str) -> LinearParams:
        return LinearParams(self[f"{prefix}.weight"], self[f"{prefix}.bias"])

    def conv(self, prefix: str) -> ConvParams:
        return ConvParams(self[f"{prefix}.weight"], self[f"{prefix}.bias"])

    def attention(self, prefix: str, heads: int) -> AttnParams:
        return AttnParams(
            self.linear(f"{prefix}.q"),
            self.linear(f"{prefix}.k"),
            self.linear(f"{prefix}.v"),
            self.linear(f"{prefix}.o"),
            heads,
        )

    def ffn(self, prefix: str) -> FFNParams:
        return FFNParams(self.linear(f"{prefix}.inner"), self.linear(f"{prefix}.outer"))

    def put(self, prefix: str, value) -> None:
        if isinstance(value, (LinearParams, ConvParams)):
            self[f"{prefix}.weight"] = value.weight
            self[f"{prefix}.bias"] = value.bias
        elif isinstance(value, AttnParams):
            for name in ("q", "k", "v", "o"):
                self.put(f"{prefix}.{name}", getattr(value, name))
        elif isinstance(value, FFNParams):
            self.put(f"{prefix}.inner", value.inner)
            self.put(f"{prefix}.outer", value.outer)
        elif isinstance(value, torch.Tensor):
            self[prefix] = value
        else:
            raise TypeError(f"cannot store {type(value).__name__}")

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k: v for k, v in self.items() if k.startswith(prefix)})

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self.items()})

    def num_elements(self) -> int:
        return sum(v.numel() for v in self.values())


# --------------------------------------------------------------------------
# initialization


def init_linear(rng: Rng, fan_in: int, fan_out: int, zero: bool = False) -> LinearParams:
    if zero:
        return LinearParams(torch.zeros(fan_out, fan_in, dtype=DTYPE), torch.zeros(fan_out, dtype=DTYPE))
    s = 1.0 / math.sqrt(fan_in)
    return LinearParams(rng.uniform(-s, s, (fan_out, fan_in)), rng.uniform(-s, s, (fan_out,)))


def init_conv(rng: Rng, c_in: int, c_out: int, kernel: int, zero: bool = False) -> ConvParams:
    if zero:
        return ConvParams(
            torch.zeros(c_out, c_in, kernel, kernel, dtype=DTYPE), torch.zeros(c_out, dtype=DTYPE)
        )
    s = 1.0 / math.sqrt(c_in * kernel * kernel)
    return ConvParams(rng.uniform(-s, s, (c_out, c_in, kernel, kernel)), rng.uniform(-s, s, (c_out,)))


def init_attention(
    rng: Rng, dim: int, heads: int, kv_dim: int | None = None, zero_out: bool = False
) -> AttnParams:
    kv_dim = dim if kv_dim is None else kv_dim
    return AttnParams(
        init_linear(rng.child("q"), dim, dim),
        init_linear(rng.child("k"), kv_dim, dim),
        init_linear(rng.child("v"), kv_dim, dim),
        init_linear(rng.child("o"), dim, dim, zero=zero_out),
        heads,
    )


def init_ffn(rng: Rng, dim: int, hidden: int, zero_out: bool = False) -> FFNParams:
    return FFNParams(
        init_linear(rng.child("inner"), dim, hidden),
        init_linear(rng.child("outer"), hidden, dim, zero=zero_out),
    )


# --------------------------------------------------------------------------
# ops


def conv2d(
    x: Tensor, params: ConvParams, stride: int = 1, padding: int = 0, padding_mode: str = "zeros"
) -> Tensor:
    """Cross-correlate a ``[C, H, W]`` input with ``params.weight``.

    Output extents are ``floor((H + 2*padding - k) / stride) + 1``.
    ``padding_mode`` is ``"zeros"`` or ``"replicate"``.
    """
    if x.dim() != 3:
        raise ValueError(f"conv2d expects [C, H, W] input, got shape {tuple(x.shape)}")
    if x.shape[0] != params.weight.shape[1]:
        raise ValueError(
            f"conv2d input has {x.shape[0]} channels but kernel expects {params.weight.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    k = params.kernel
    h, w = x.shape[1] + 2 * padding, x.shape[2] + 2 * padding
    if h < k or w < k:
        raise ValueError(f"padded input {h}x{w} smaller than kernel {k}x{k}")
    xb = x.unsqueeze(0)
    if padding and padding_mode == "replicate":
        xb = F.pad(xb, (padding,) * 4, mode="replicate")
        out = F.conv2d(xb, params.weight, params.bias, stride=stride)
    elif padding_mode in ("zeros", "replicate"):
        out = F.conv2d(xb, params.weight, params.bias, stride=stride, padding=padding)
    else:
        raise ValueError(f"unknown padding_mode {padding_mode!r}")
    return check_finite(out[0], "conv2d output")


def linear(x: Tensor, params: LinearParams) -> Tensor:
    if x.shape[-1] != params.in_features:
        raise ValueError(f"linear expects last dim {params.in_features}, got {tuple(x.shape)}")
    return x @ params.weight.T + params.bias


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def attention_weights(q: Tensor, k: Tensor, params: AttnParams) -> Tensor:
    """Per-head softmax matrices, shape ``[heads, Nq, Nk]``."""
    dim = params.q.out_features
    dh = dim // params.heads
    qh = linear(q, params.q).reshape(q.shape[0], params.heads, dh).transpose(0, 1)
    kh = linear(k, params.k).reshape(k.shape[0], params.heads, dh).transpose(0, 1)
    return softmax(qh @ kh.transpose(1, 2) / math.sqrt(dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: AttnParams) -> Tensor:
    """Scaled dot-product attention with ``params.heads`` heads.

    ``q`` is ``[Nq, Dq]``; ``k`` and ``v`` are ``[Nk, Dkv]``. Returns ``[Nq, D]``
    with ``D`` the projected model width.
    """
    if q.dim() != 2 or k.dim() != 2 or v.dim() != 2:
        raise ValueError("attention inputs must be 2-D token matrices")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"keys ({k.shape[0]}) and values ({v.shape[0]}) differ in length")
    dim = params.q.out_features
    dh = dim // params.heads
    a = attention_weights(q, k, params)
    vh = linear(v, params.v).reshape(v.shape[0], params.heads, dh).transpose(0, 1)
    out = (a @ vh).transpose(0, 1).reshape(q.shape[0], dim)
    return check_finite(linear(out, params.o), "attention output")


def feed_forward(x: Tensor, params: FFNParams) -> Tensor:
    return linear(F.gelu(linear(x, params.inner)), params.outer)


silu = F.silu


# --------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(
    f: Callable[[Tensor], float | Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Returns a tensor shaped like ``x``; if ``indices`` (flat positions) is
    given, only those entries are estimated and a 1-D tensor is returned.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = x.detach().clone().to(DTYPE)
    flat = base.reshape(-1)
    idx = range(flat.numel()) if indices is None else list(indices)
    out = []
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at element {i}")
        out.append((fp - fm) / (2 * h))
    g = torch.tensor(out, dtype=DTYPE)
    return g.reshape(x.shape) if indices is None else g


def relative_error(a: Tensor, b: Tensor) -> float:
    """``||a - b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    denom = max(a.norm().item(), b.norm().item())
    if denom == 0.0:
        return 0.0
    return (a - b).norm().item() / denom


# --------------------------------------------------------------------------
# autograd helpers


def value_and_grad(
    loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, names: Iterable[str] | None = None
) -> tuple[Tensor, dict[str, Tensor]]:
    """Evaluate ``loss_fn`` and its gradient w.r.t. ``names`` (default: all entries)."""
    names = list(params) if names is None else list(names)
    live = ParamStore(params)
    for name in names:
        live[name] = params[name].detach().clone().requires_grad_(True)
    loss = loss_fn(live)
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar tensor")
    grads = torch.autograd.grad(loss, [live[n] for n in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        out[name] = torch.zeros_like(params[name]) if g is None else g.detach()
    return loss.detach(), out


def gradient_step(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    learning_rate: float,
    names: Iterable[str] | None = None,
) -> tuple[ParamStore, float]:
    """One plain gradient-descent update; returns ``(new_params, loss_before)``."""
    loss, grads = value_and_grad(loss_fn, params, names)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    new = params.copy()
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
        new[name] = params[name].detach() - learning_rate * g
    return new, value


@dataclass(frozen=True)
class AdamWState:
    step: int
    m: dict[str, Tensor]
    v: dict[str, Tensor]


def adamw_step(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    learning_rate: float,
    state: AdamWState | None = None,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
    names: Iterable[str] | None = None,
) -> tuple[ParamStore, AdamWState, float]:
    """One AdamW update (decoupled weight decay); returns ``(params, state, loss_before)``."""
    loss, grads = value_and_grad(loss_fn, params, names)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    if state is None:
        state = AdamWState(0, {}, {})
    step = state.step + 1
    b1, b2 = betas
    new = params.copy()
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
        m[name] = b1 * m.get(name, torch.zeros_like(g)) + (1 - b1) * g
        v[name] = b2 * v.get(name, torch.zeros_like(g)) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        p = params[name].detach()
        new[name] = p - learning_rate * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p)
    return new, AdamWState(step, m, v), value
