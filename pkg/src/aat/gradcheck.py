"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .transformer import AudioTransformer, model_forward


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """d f / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over a whole parameter tensor.

    The floor turns the measure into an absolute one for tensors whose
    gradient is (numerically) zero.
    """
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))


def perturb_adapters(model: AudioTransformer, seed: int = 0, scale: float = 0.5) -> None:
    """Give every adapter random nonzero weights so all adapter gradients are nontrivial."""
    rng = np.random.default_rng(seed)
    for block in model.blocks:
        for adapter in (block.mlp_adapter, block.spatial_adapter):
            if adapter is None:
                continue
            for p in (adapter.w_up, adapter.b_up, adapter.b_down):
                p.data = rng.uniform(-scale, scale, size=p.shape)


def check_model_gradients(
    model: AudioTransformer,
    inputs: np.ndarray,
    labels,
    h: float = 1e-6,
) -> dict[str, float]:
    """Relative error of the tape gradient of the mean cross-entropy, per parameter."""
    from .training import cross_entropy

    params = model.named_parameters()
    for p in params.values():
        p.requires_grad = True

    def loss_value() -> float:
        return cross_entropy(model_forward(inputs, model), labels).item()

    with Tape() as tape:
        loss = cross_entropy(model_forward(inputs, model), labels)
    grads = ad.backward(loss, tape, wrt=params.values())
    return {
        name: relative_error(grads[p.node].data, numerical_gradient(loss_value, p, h))
        for name, p in params.items()
    }
