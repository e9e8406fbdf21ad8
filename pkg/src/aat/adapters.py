"""Bottleneck adapters and per-layer prompt tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError


@dataclass
class Adapter:
    """Down projection, GELU, up projection.

    With ``shortcut`` the input is added back (the spatial placement); without
    it the adapter returns only the bottleneck output (the MLP placement).
    """

    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor
    shortcut: bool

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}down.weight": self.w_down,
            f"{prefix}down.bias": self.b_down,
            f"{prefix}up.weight": self.w_up,
            f"{prefix}up.bias": self.b_up,
        }


def adapter_shapes(d: int, d_hat: int) -> dict[str, tuple[int, ...]]:
    return {
        "down.weight": (d, d_hat),
        "down.bias": (d_hat,),
        "up.weight": (d_hat, d),
        "up.bias": (d,),
    }


def init_adapter(d: int, d_hat: int, shortcut: bool, seed) -> Adapter:
    """Xavier-uniform down projection; up projection and both biases zero.

    The zero up path makes a fresh adapter contribute exactly nothing, so an
    adapted model starts as the frozen model.
    """
    if not 0 < d_hat < d:
        raise ConfigurationError(f"adapter bottleneck must satisfy 0 < d_hat < d, got d_hat={d_hat}, d={d}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (d + d_hat))
    return Adapter(
        w_down=Tensor(rng.uniform(-bound, bound, size=(d, d_hat))),
        b_down=Tensor(np.zeros(d_hat)),
        w_up=Tensor(np.zeros((d_hat, d))),
        b_up=Tensor(np.zeros(d)),
        shortcut=shortcut,
    )


def adapter_forward(x: Tensor, adapter: Adapter) -> Tensor:
    if x.shape[-1] != adapter.dim:
        raise DimensionError(f"adapter expects last dim {adapter.dim}, got input {x.shape}")
    hidden = ad.gelu(ad.matmul(x, adapter.w_down) + adapter.b_down)
    core = ad.matmul(hidden, adapter.w_up) + adapter.b_up
    return ad.as_tensor(x) + core if adapter.shortcut else core


@dataclass
class PromptBank:
    """One block of ``p`` trainable tokens per Transformer layer."""

    tokens: list[Tensor]

    @property
    def length(self) -> int:
        return self.tokens[0].shape[0] if self.tokens else 0

    def named_parameters(self, prefix: str = "prompts.") -> dict[str, Tensor]:
        return {f"{prefix}{i}": t for i, t in enumerate(self.tokens)}


def init_prompts(depth: int, length: int, d: int, seed, scale: float = 0.1) -> PromptBank:
    rng = np.random.default_rng(seed)
    return PromptBank([Tensor(rng.uniform(-scale, scale, size=(length, d))) for _ in range(depth)])


def prompt_inject(x: Tensor, tokens: Tensor) -> Tensor:
    """Prepend ``tokens`` ([p, d]) to the token axis of ``x`` ([..., S, d])."""
    if tokens.ndim != 2 or tokens.shape[1] != x.shape[-1]:
        raise DimensionError(f"prompt tokens {tokens.shape} do not match input {x.shape}")
    if tokens.shape[0] == 0:
        return x
    if x.ndim > 2:
        tokens = ad.add(tokens, np.zeros(x.shape[:-2] + tokens.shape))
    return ad.concat([tokens, x], axis=-2)


def prompt_strip(x: Tensor, p: int) -> Tensor:
    rows = x.shape[-2]
    if rows <= p:
        raise ContractError(f"cannot strip {p} prompt rows from a sequence of {rows}")
    if p == 0:
        return x
    return ad.slice_along(x, p, rows, axis=-2)
