"""Decoder-only transformer (RMSNorm, rotary attention, SwiGLU) used as verifier and drafter."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np

from . import tensor as T
from .errors import CapacityError, DimensionError, DomainError
from .models import ModelConfig, Role
from .tensor import Tensor


class UniformSource(Protocol):
    def random(self) -> float: ...


class MlpSteering(Protocol):
    """Replaces the plain SwiGLU output of every drafter layer."""

    def mlp_output(self, layer: int, a: Tensor, f_prev: Tensor, block: "Block") -> Tensor: ...


@dataclass
class Block:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_up: Tensor
    w_gate: Tensor
    w_down: Tensor


_BLOCK_SHAPES = {
    "attn_norm": lambda c: (c.d_model,),
    "wq": lambda c: (c.d_model, c.d_model),
    "wk": lambda c: (c.d_model, c.d_model),
    "wv": lambda c: (c.d_model, c.d_model),
    "wo": lambda c: (c.d_model, c.d_model),
    "mlp_norm": lambda c: (c.d_model,),
    "w_up": lambda c: (c.d_mlp, c.d_model),
    "w_gate": lambda c: (c.d_mlp, c.d_model),
    "w_down": lambda c: (c.d_model, c.d_mlp),
}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, config.d_model)}
    for i in range(config.n_layers):
        for name, shape in _BLOCK_SHAPES.items():
            shapes[f"layers.{i}.{name}"] = shape(config)
    shapes["final_norm"] = (config.d_model,)
    shapes["unembed"] = (config.vocab_size, config.d_model)
    return shapes


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], role: Role) -> None:
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise DimensionError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.role = Role(role)
        self.params = {name: params[name] for name in expected}
        self.blocks = [
            Block(**{name: self.params[f"layers.{i}.{name}"] for name in _BLOCK_SHAPES})
            for i in range(config.n_layers)
        ]
        self._rope = _rope_tables(config, self.dtype)

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        role: Role = Role.DRAFTER,
        seed: int = 0,
        dtype: type = T.DEFAULT_DTYPE,
        std: float = 0.02,
    ) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("norm"):
                arr = np.ones(shape, dtype=dtype)
            else:
                arr = (rng.standard_normal(shape) * std).astype(dtype)
            params[name] = Tensor(arr)
        return cls(config, params, role)

    @property
    def dtype(self) -> np.dtype:
        return self.params["embed"].dtype

    @property
    def embed(self) -> Tensor:
        return self.params["embed"]

    @property
    def final_norm(self) -> Tensor:
        return self.params["final_norm"]

    @property
    def unembed(self) -> Tensor:
        return self.params["unembed"]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable
            p.grad = None

    def is_trainable(self) -> bool:
        return any(p.requires_grad for p in self.params.values())

    def clone(self, role: Role | None = None, dtype: type | None = None) -> "TransformerModel":
        params = {
            name: Tensor(p.data.astype(dtype or p.dtype, copy=True)) for name, p in self.params.items()
        }
        return TransformerModel(self.config, params, role or self.role)

    def new_cache(self) -> "KVCache":
        return KVCache(self.config.n_layers, self.config.max_seq_len)


@dataclass
class HiddenTaps:
    """Post-block residual stream at the (high, mid, low) tap layers, one row per position."""

    h: Tensor
    m: Tensor
    l: Tensor  # noqa: E741

    def concat(self) -> Tensor:
        return T.concat([self.h, self.m, self.l], axis=-1)

    def rows(self, index: Sequence[int]) -> "HiddenTaps":
        return HiddenTaps(T.take_rows(self.h, index), T.take_rows(self.m, index), T.take_rows(self.l, index))

    def __len__(self) -> int:
        return self.h.shape[0]


class KVCache:
    """Per-layer rotary keys/values for positions [0, length)."""

    def __init__(self, n_layers: int, max_seq_len: int) -> None:
        self.n_layers = n_layers
        self.max_seq_len = max_seq_len
        self.length = 0
        self._keys: list[np.ndarray | None] = [None] * n_layers
        self._values: list[np.ndarray | None] = [None] * n_layers

    def write(self, layer: int, start: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        end = start + k.shape[1]
        if end > self.max_seq_len:
            raise CapacityError(f"cache overflow: {end} > max_seq_len={self.max_seq_len}")
        if self._keys[layer] is None:
            shape = (k.shape[0], self.max_seq_len, k.shape[2])
            self._keys[layer] = np.zeros(shape, dtype=k.dtype)
            self._values[layer] = np.zeros(shape, dtype=v.dtype)
        keys, values = self._keys[layer], self._values[layer]
        assert keys is not None and values is not None
        keys[:, start:end] = k
        values[:, start:end] = v
        return keys[:, :end], values[:, :end]

    def layer(self, layer: int) -> tuple[np.ndarray, np.ndarray] | None:
        keys, values = self._keys[layer], self._values[layer]
        if keys is None or values is None:
            return None
        return keys[:, : self.length], values[:, : self.length]

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise CapacityError(f"cannot truncate cache of length {self.length} to {length}")
        self.length = length

    def clone(self) -> "KVCache":
        other = KVCache(self.n_layers, self.max_seq_len)
        other.length = self.length
        other._keys = [None if a is None else a.copy() for a in self._keys]
        other._values = [None if a is None else a.copy() for a in self._values]
        return other


class ForwardOutput(NamedTuple):
    logits: Tensor
    taps: HiddenTaps | None
    cache: KVCache | None


def _rope_tables(config: ModelConfig, dtype: np.dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = 1.0 / (config.rope_base ** (np.arange(half) / half))
    angles = np.outer(np.arange(config.max_seq_len), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    # x @ rotate == concat(-x[half:], x[:half])
    rotate = np.zeros((config.head_dim, config.head_dim))
    rotate[np.arange(half) + half, np.arange(half)] = -1.0
    rotate[np.arange(half), np.arange(half) + half] = 1.0
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype), rotate.astype(dtype)


def _apply_rope(x: Tensor, cos: Tensor, sin: Tensor, rotate: Tensor) -> Tensor:
    return x * cos + T.matmul(x, rotate) * sin


def mlp_forward(block: Block, a: Tensor, up_bias: Tensor | None = None) -> Tensor:
    up = T.matmul(a, T.transpose(block.w_up))
    if up_bias is not None:
        up = up + up_bias
    gate = T.silu(T.matmul(a, T.transpose(block.w_gate)))
    return T.matmul(up * gate, T.transpose(block.w_down))


def _attention(
    model: TransformerModel,
    layer: int,
    h: Tensor,
    cache: KVCache | None,
    start: int,
    rope: tuple[Tensor, Tensor, Tensor],
    mask: Tensor,
) -> Tensor:
    cfg = model.config
    block = model.blocks[layer]
    n = h.shape[0]

    def heads(w: Tensor) -> Tensor:
        projected = T.reshape(T.matmul(h, T.transpose(w)), (n, cfg.n_heads, cfg.head_dim))
        return T.permute(projected, (1, 0, 2))

    q = _apply_rope(heads(block.wq), *rope)
    k = _apply_rope(heads(block.wk), *rope)
    v = heads(block.wv)
    if cache is not None:
        past = cache.layer(layer) if start > 0 else None
        cache.write(layer, start, k.data, v.data)
        if past is not None:
            k = T.concat([Tensor(past[0][:, :start]), k], axis=1)
            v = T.concat([Tensor(past[1][:, :start]), v], axis=1)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(cfg.head_dim)) + mask
    out = T.matmul(T.softmax(scores), v)
    merged = T.reshape(T.permute(out, (1, 0, 2)), (n, cfg.d_model))
    return T.matmul(merged, T.transpose(block.wo))


def forward(
    model: TransformerModel,
    tokens: Sequence[int] | np.ndarray,
    cache: KVCache | None = None,
    steer_bias: MlpSteering | None = None,
    tap_positions: Sequence[int] | None = None,
) -> ForwardOutput:
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    n = ids.shape[0]
    if n == 0:
        raise DomainError("forward needs at least one token")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DomainError(f"token ids must lie in [0, {cfg.vocab_size})")
    start = cache.length if cache is not None else 0
    if start + n > cfg.max_seq_len:
        raise CapacityError(f"{start} cached + {n} new tokens exceed max_seq_len={cfg.max_seq_len}")

    cos, sin, rotate = model._rope
    rope = (Tensor(cos[start : start + n]), Tensor(sin[start : start + n]), Tensor(rotate))
    rows = np.arange(n)[:, None] + start
    cols = np.arange(start + n)[None, :]
    mask = Tensor(np.where(cols > rows, -np.inf, 0.0).astype(model.dtype))

    taps: dict[int, Tensor] = {}
    tap_layers = cfg.resolved_taps() if tap_positions is not None else ()
    x = T.take_rows(model.embed, ids)
    for i, block in enumerate(model.blocks):
        f_prev = x
        x = x + _attention(model, i, T.rms_norm(x, block.attn_norm, cfg.norm_eps), cache, start, rope, mask)
        a = T.rms_norm(x, block.mlp_norm, cfg.norm_eps)
        if steer_bias is None:
            x = x + mlp_forward(block, a)
        else:
            x = x + steer_bias.mlp_output(i, a, f_prev, block)
        if i in tap_layers:
            taps[i] = x
    if cache is not None:
        cache.length = start + n

    logits = T.matmul(T.rms_norm(x, model.final_norm, cfg.norm_eps), T.transpose(model.unembed))
    hidden = None
    if tap_positions is not None:
        low, mid, high = tap_layers
        index = list(tap_positions)
        hidden = HiddenTaps(
            T.take_rows(taps[high], index), T.take_rows(taps[mid], index), T.take_rows(taps[low], index)
        )
    return ForwardOutput(logits, hidden, cache)


def next_token_distribution(
    model: TransformerModel,
    tokens: Sequence[int] | np.ndarray,
    cache: KVCache | None = None,
    steer_bias: MlpSteering | None = None,
    temperature: float = 1.0,
) -> np.ndarray:
    logits = forward(model, tokens, cache, steer_bias).logits
    return T.softmax(Tensor(logits.data[-1]), temperature).data


def sample(dist: np.ndarray | Sequence[float], rng: UniformSource) -> int:
    """Inverse-CDF draw over ascending token index, one uniform per call.

    ``u`` is compared with the raw cumulative sum. Rounding slack (up to 1e-5) below one
    falls to the last token.
    """
    p = np.asarray(dist, dtype=np.float64)
    if (p < 0).any():
        raise DomainError("probability vector has negative entries")
    if abs(p.sum() - 1.0) > 1e-5:
        raise DomainError(f"probability vector sums to {p.sum()}, not 1")
    cdf = np.cumsum(p)
    u = rng.random()
    return min(int(np.searchsorted(cdf, u, side="right")), p.shape[0] - 1)
