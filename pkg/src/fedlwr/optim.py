"""Adam with decoupled weight decay, as a pure function over model params."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import LayerParams, ModelParams, Tensor, ensure_finite


@dataclass
class AdamState:
    """Optimizer state; moment tensors shape-match the model parameters."""

    step: int
    first_moment: list[tuple[Tensor, Tensor]]
    second_moment: list[tuple[Tensor, Tensor]]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_adam_state(
    model: ModelParams,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    def zeros(layer: LayerParams) -> tuple[Tensor, Tensor]:
        return np.zeros_like(layer.weights), np.zeros_like(layer.biases)

    return AdamState(
        step=0,
        first_moment=[zeros(layer) for layer in model.layers],
        second_moment=[zeros(layer) for layer in model.layers],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def _check_shapes(model: ModelParams, grads: ModelParams, state: AdamState) -> None:
    if len(grads.layers) != len(model.layers) or len(state.first_moment) != len(model.layers):
        raise ValueError("model, gradients, and optimizer state disagree on layer count")
    for layer, grad, (m_w, m_b) in zip(model.layers, grads.layers, state.first_moment):
        if grad.weights.shape != layer.weights.shape or grad.biases.shape != layer.biases.shape:
            raise ValueError(f"gradient shape mismatch at layer {layer.layer_id}")
        if m_w.shape != layer.weights.shape or m_b.shape != layer.biases.shape:
            raise ValueError(f"optimizer state shape mismatch at layer {layer.layer_id}")


def adam_step(model: ModelParams, grads: ModelParams, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One Adam update; weight decay is applied to the parameters first
    (w <- w - lr*wd*w), decoupled from the moment estimates.
    """
    _check_shapes(model, grads, state)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    new_layers = []
    new_m: list[tuple[Tensor, Tensor]] = []
    new_v: list[tuple[Tensor, Tensor]] = []
    for layer, grad, (m_w, m_b), (v_w, v_b) in zip(
        model.layers, grads.layers, state.first_moment, state.second_moment
    ):
        updated = []
        moments_m = []
        moments_v = []
        for param, g, m, v in ((layer.weights, grad.weights, m_w, v_w), (layer.biases, grad.biases, m_b, v_b)):
            p = param * (1.0 - state.lr * state.weight_decay)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            ensure_finite(p, f"adam update of layer {layer.layer_id}")
            updated.append(p)
            moments_m.append(m)
            moments_v.append(v)
        new_layers.append(LayerParams(layer.layer_id, layer.kind, updated[0], updated[1]))
        new_m.append((moments_m[0], moments_m[1]))
        new_v.append((moments_v[0], moments_v[1]))

    new_model = ModelParams(new_layers, model.topology_id)
    new_state = AdamState(
        step=t,
        first_moment=new_m,
        second_moment=new_v,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
    )
    return new_model, new_state
