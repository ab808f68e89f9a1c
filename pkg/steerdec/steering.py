"""Steering vectors: verifier taps -> g_t -> per-layer drafter MLP conditioning."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .models import ModelConfig, SteeringVariant
from .tensor import Tensor
from .transformer import Block, HiddenTaps, MlpSteering, mlp_forward

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5


@dataclass
class SteeringVector:
    g: Tensor  # [rows, d_steer]; one row at inference, one per position in training
    origin_position: int | None = None


class SteeringState:
    def __init__(
        self,
        variant: SteeringVariant,
        params: dict[str, Tensor],
        n_layers: int,
        enabled: bool = True,
    ) -> None:
        self.variant = SteeringVariant(variant)
        self.n_layers = n_layers
        self.enabled = enabled
        self.params = params
        for name in self.injector_names():
            if name not in params:
                raise DimensionError(f"steering parameter {name!r} missing for variant {self.variant}")

    @classmethod
    def init(
        cls,
        variant: SteeringVariant,
        verifier: ModelConfig,
        drafter: ModelConfig,
        seed: int = 0,
        dtype: type = T.DEFAULT_DTYPE,
    ) -> "SteeringState":
        variant = SteeringVariant(variant)
        d_steer, d_v = drafter.d_model, verifier.d_model
        # block identity: W_hml [h, m, l] == h + m + l when widths agree
        eye = np.eye(d_steer, d_v, dtype=dtype)
        params = {
            "steer.w_hml": Tensor(np.concatenate([eye, eye, eye], axis=1)),
            "steer.norm_gain": Tensor(np.ones(d_steer, dtype=dtype)),
        }
        rng = np.random.default_rng(seed)
        for i in range(drafter.n_layers):
            if variant is SteeringVariant.BIAS_IN_MLP:
                params[f"steer.layers.{i}.w_s"] = Tensor(np.zeros((drafter.d_mlp, d_steer), dtype=dtype))
            elif variant is SteeringVariant.BIAS_AFTER_MLP:
                params[f"steer.layers.{i}.w_s"] = Tensor(np.zeros((drafter.d_model, d_steer), dtype=dtype))
            else:
                w_in = rng.standard_normal((d_steer, drafter.d_model + d_steer)) * 0.02
                params[f"steer.layers.{i}.w_in"] = Tensor(w_in.astype(dtype))
                params[f"steer.layers.{i}.w_out"] = Tensor(np.zeros((drafter.d_mlp, d_steer), dtype=dtype))
        logger.debug("steering %s: d_steer=%d over %d drafter layers", variant, d_steer, drafter.n_layers)
        return cls(variant, params, drafter.n_layers)

    def injector_names(self) -> list[str]:
        suffixes = ("w_in", "w_out") if self.variant is SteeringVariant.COND_BIAS_IN_MLP else ("w_s",)
        return [f"steer.layers.{i}.{s}" for i in range(self.n_layers) for s in suffixes]

    @property
    def w_hml(self) -> Tensor:
        return self.params["steer.w_hml"]

    @property
    def norm_gain(self) -> Tensor:
        return self.params["steer.norm_gain"]

    @property
    def d_steer(self) -> int:
        return self.w_hml.shape[0]

    def injector(self, layer: int, name: str = "w_s") -> Tensor:
        return self.params[f"steer.layers.{layer}.{name}"]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable
            p.grad = None

    def clone(self, dtype: type | None = None) -> "SteeringState":
        params = {name: Tensor(p.data.astype(dtype or p.dtype, copy=True)) for name, p in self.params.items()}
        return SteeringState(self.variant, params, self.n_layers, self.enabled)


def compute_steering(
    state: SteeringState, taps: HiddenTaps, origin_position: int | None = None
) -> SteeringVector:
    stacked = taps.concat()
    if stacked.shape[-1] != state.w_hml.shape[1]:
        raise DimensionError(
            f"taps have {stacked.shape[-1]} features, W_hml expects {state.w_hml.shape[1]}"
        )
    projected = T.matmul(stacked, T.transpose(state.w_hml))
    g = T.layer_norm(projected, state.norm_gain, None, NORM_EPS)
    if not np.isfinite(g.data).all():
        raise DomainError("steering vector has non-finite entries")
    return SteeringVector(g, origin_position)


def apply_variant(
    variant: SteeringVariant,
    block: Block,
    a: Tensor,
    bias: Tensor | None = None,
    f_prev: Tensor | None = None,
    g: Tensor | None = None,
    cond: tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    if variant is SteeringVariant.BIAS_IN_MLP:
        return mlp_forward(block, a, bias)
    if variant is SteeringVariant.BIAS_AFTER_MLP:
        out = mlp_forward(block, a)
        return out if bias is None else out + bias
    if f_prev is None or g is None or cond is None:
        raise ContractError("conditional bias needs f^(l-1), g and its perceptron weights")
    w_in, w_out = cond
    if g.shape[0] != f_prev.shape[0]:
        g = T.take_rows(g, np.zeros(f_prev.shape[0], dtype=np.int64))
    hidden = T.silu(T.matmul(T.concat([f_prev, g], axis=-1), T.transpose(w_in)))
    return mlp_forward(block, a, T.matmul(hidden, T.transpose(w_out)))


class BiasSet:
    """Per-layer biases W_s^(l) g, computed once and shared by every drafted position."""

    def __init__(self, variant: SteeringVariant, biases: Sequence[Tensor]) -> None:
        self.variant = variant
        self.biases = list(biases)

    def mlp_output(self, layer: int, a: Tensor, f_prev: Tensor, block: Block) -> Tensor:
        return apply_variant(self.variant, block, a, bias=self.biases[layer])


class ConditionalBias:
    def __init__(self, state: SteeringState, g: Tensor) -> None:
        self.state = state
        self.g = g

    def mlp_output(self, layer: int, a: Tensor, f_prev: Tensor, block: Block) -> Tensor:
        cond = (self.state.injector(layer, "w_in"), self.state.injector(layer, "w_out"))
        return apply_variant(self.state.variant, block, a, f_prev=f_prev, g=self.g, cond=cond)


def make_bias(state: SteeringState, g: SteeringVector) -> BiasSet:
    if state.variant is SteeringVariant.COND_BIAS_IN_MLP:
        raise ContractError("conditional bias is computed per position; use steering_hook")
    biases = []
    for i in range(state.n_layers):
        b = T.matmul(g.g, T.transpose(state.injector(i)))
        if b.shape[0] == 1:
            b = T.reshape(b, (b.shape[1],))
        biases.append(b)
    return BiasSet(state.variant, biases)


def steering_hook(state: SteeringState | None, g: SteeringVector | None) -> MlpSteering | None:
    if state is None or g is None or not state.enabled:
        return None
    if state.variant is SteeringVariant.COND_BIAS_IN_MLP:
        return ConditionalBias(state, g.g)
    return make_bias(state, g)
