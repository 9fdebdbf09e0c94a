"""Parameter containers and transformer building blocks on top of tensorcore."""

from __future__ import annotations

import numpy as np

from .. import tensorcore as tc
from ..tensorcore import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def uniform_init(rng, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return tc.parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = uniform_init(rng, (fan_in, fan_out), fan_in)
        self.bias = uniform_init(rng, (fan_out,), fan_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = tc.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = tc.parameter(np.ones(dim))
        self.beta = tc.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta, self.eps)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9), k=1)


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return tc.transpose(tc.reshape(x, (n, self.heads, d // self.heads)), (1, 0, 2))

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        n, d = xq.shape
        dk = d // self.heads
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        scores = tc.matmul(q, tc.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dk))
        if mask is not None:
            scores = scores + Tensor(mask)
        weights = tc.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = tc.matmul(weights, v)
        return self.o(tc.reshape(tc.transpose(out, (1, 0, 2)), (n, d)))


class MLP(Module):
    def __init__(self, rng, dim: int, ratio: int):
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.fc2 = Linear(rng, dim * ratio, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm self-attention + MLP; optional learnable residual scale (ReZero style)."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int, residual_scale: float | None = None):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)
        self.scale = None if residual_scale is None else tc.parameter(np.array(float(residual_scale)))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        a = self.attn(h, h, mask)
        x = x + (a if self.scale is None else self.scale * a)
        m = self.mlp(self.ln2(x))
        return x + (m if self.scale is None else self.scale * m)


class DecoderBlock(Module):
    """Causal self-attention, cross-attention to a memory sequence, MLP."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.ln3 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, causal_mask(x.shape[0]))
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.mlp(self.ln3(x))


class CrossModalInteraction(Module):
    """Bidirectional CT<->PET cross-attention with tanh-gated residuals (gates start at 0)."""

    def __init__(self, rng, dim: int, heads: int):
        self.ln_ct = LayerNorm(dim)
        self.ln_pet = LayerNorm(dim)
        self.ct_from_pet = MultiHeadAttention(rng, dim, heads)
        self.pet_from_ct = MultiHeadAttention(rng, dim, heads)
        self.gate_ct = tc.parameter(np.array(0.0))
        self.gate_pet = tc.parameter(np.array(0.0))

    def __call__(self, ct: Tensor, pet: Tensor):
        hc, hp = self.ln_ct(ct), self.ln_pet(pet)
        a_ct = self.ct_from_pet(hc, hp)
        a_pet = self.pet_from_ct(hp, hc)
        return ct + tc.tanh(self.gate_ct) * a_ct, pet + tc.tanh(self.gate_pet) * a_pet


def sincos_1d(positions, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / max(half, 1)))
    out = np.zeros((len(pos), dim))
    out[:, 0:2 * half:2] = np.sin(pos * freqs)
    out[:, 1:2 * half:2] = np.cos(pos * freqs)
    return out


def sincos_3d(coords, dim: int) -> np.ndarray:
    """Fixed 3-D sinusoidal embedding; each axis gets 2*(dim//6) channels, the rest are zero."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    per_axis = 2 * (dim // 6)
    out = np.zeros((len(coords), dim))
    for ax in range(3):
        out[:, ax * per_axis:(ax + 1) * per_axis] = sincos_1d(coords[:, ax], per_axis)
    return out
