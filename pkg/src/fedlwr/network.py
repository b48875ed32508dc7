"""Dense-tensor segmentation networks with hand-written gradients.

Everything runs on float64 numpy arrays (row-major), which keeps the test
tolerances tight and the round loop bitwise reproducible on a fixed
platform. Architectures are looked up in a small registry; each one is a
stack of parameterized layers (3x3 same-padding convolutions and/or dense
layers) with ReLU between layers and a sigmoid on the output.

The forward pass records, for every parameterized layer, the
post-nonlinearity output flattened per sample. Those per-layer feature
matrices are what the similarity machinery consumes downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

# The universal numeric carrier: a float64 ndarray, shape + row-major data.
Tensor = np.ndarray

# A feature matrix is an (n_samples, features) float64 array.
FeatureMatrix = np.ndarray

CONV2D = "conv2d"
DENSE = "dense"

KERNEL_SIZE = 3
PADDING = 1


@dataclass(frozen=True)
class LayerDef:
    """Static description of one layer in a topology.

    ``in_size``/``out_size`` are channel counts for conv2d layers and
    feature counts for dense layers.
    """

    kind: str
    in_size: int
    out_size: int


@dataclass(frozen=True)
class Topology:
    name: str
    layers: tuple[LayerDef, ...]
    # Dense layers fix the spatial size; pure-conv stacks accept any H, W.
    input_hw: tuple[int, int] | None = None


TOPOLOGIES: dict[str, Topology] = {
    # Four 3x3 same-padding convolutions, 1->8->16->8->1 channels.
    "tinyseg4": Topology(
        name="tinyseg4",
        layers=(
            LayerDef(CONV2D, 1, 8),
            LayerDef(CONV2D, 8, 16),
            LayerDef(CONV2D, 16, 8),
            LayerDef(CONV2D, 8, 1),
        ),
    ),
    # Conv feature extractor with a dense head on fixed 8x8 inputs; exists so
    # both layer kinds have a runnable, gradient-checkable architecture.
    "tinymix8": Topology(
        name="tinymix8",
        layers=(
            LayerDef(CONV2D, 1, 4),
            LayerDef(DENSE, 4 * 8 * 8, 8 * 8),
        ),
        input_hw=(8, 8),
    ),
}


@dataclass
class LayerParams:
    """Parameters of one layer. ``layer_id`` is 1-based and contiguous."""

    layer_id: int
    kind: str
    weights: Tensor
    biases: Tensor

    def copy(self) -> "LayerParams":
        return LayerParams(self.layer_id, self.kind, self.weights.copy(), self.biases.copy())


@dataclass
class ModelParams:
    """Ordered per-layer parameter blocks; the unit of aggregation."""

    layers: list[LayerParams]
    topology_id: str

    def copy(self) -> "ModelParams":
        return ModelParams([layer.copy() for layer in self.layers], self.topology_id)

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass
class ForwardTrace:
    """Result of one forward pass.

    ``activations`` maps layer_id -> (batch, features) matrix holding the
    post-nonlinearity output of that layer, flattened per sample.
    ``layer_inputs`` and ``preacts`` keep the native-shape intermediates the
    backward pass needs.
    """

    logits: Tensor
    activations: dict[int, FeatureMatrix]
    topology_id: str
    layer_inputs: list[Tensor] = field(repr=False, default_factory=list)
    preacts: list[Tensor] = field(repr=False, default_factory=list)


def ensure_finite(arr: Tensor, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")


def sigmoid(z: Tensor) -> Tensor:
    # Stable in both tails.
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z: Tensor) -> Tensor:
    return np.maximum(z, 0.0)


def get_topology(topology_id: str) -> Topology:
    try:
        return TOPOLOGIES[topology_id]
    except KeyError:
        known = ", ".join(sorted(TOPOLOGIES))
        raise ValueError(f"unknown topology {topology_id!r} (registered: {known})") from None


def build_model(topology_id: str, rng_seed: int) -> ModelParams:
    """Build a freshly initialized model, deterministic in ``rng_seed``.

    Conv and dense weights are He-uniform (limit sqrt(6/fan_in)); biases
    start at zero.
    """
    topo = get_topology(topology_id)
    rng = np.random.default_rng(rng_seed)
    layers = []
    for idx, spec in enumerate(topo.layers):
        if spec.kind == CONV2D:
            shape = (spec.out_size, spec.in_size, KERNEL_SIZE, KERNEL_SIZE)
            fan_in = spec.in_size * KERNEL_SIZE * KERNEL_SIZE
        else:
            shape = (spec.out_size, spec.in_size)
            fan_in = spec.in_size
        limit = np.sqrt(6.0 / fan_in)
        weights = rng.uniform(-limit, limit, size=shape)
        biases = np.zeros(spec.out_size, dtype=np.float64)
        layers.append(LayerParams(idx + 1, spec.kind, weights, biases))
    return ModelParams(layers, topology_id)


def _im2col(x: Tensor) -> Tensor:
    """All padded 3x3 windows of x [b,c,h,w] as rows: [b*h*w, c*9]."""
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    windows = sliding_window_view(padded, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * h * w, c * KERNEL_SIZE * KERNEL_SIZE
    )


def _conv_forward(x: Tensor, weights: Tensor, biases: Tensor) -> Tensor:
    b, _, h, w = x.shape
    out_c = weights.shape[0]
    cols = _im2col(x)
    z = cols @ weights.reshape(out_c, -1).T + biases
    return z.reshape(b, h, w, out_c).transpose(0, 3, 1, 2)


def _conv_backward(x: Tensor, weights: Tensor, dz: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients (dW, db, dx) of a same-padding 3x3 convolution."""
    b, c, h, w = x.shape
    out_c = weights.shape[0]
    dz_rows = np.ascontiguousarray(dz.transpose(0, 2, 3, 1)).reshape(b * h * w, out_c)
    cols = _im2col(x)
    dw = (dz_rows.T @ cols).reshape(weights.shape)
    db = dz_rows.sum(axis=0)
    # dx is the full correlation of dz with the 180-degree-flipped kernel.
    flipped = weights[:, :, ::-1, ::-1]
    dz_cols = _im2col(dz)
    dx_rows = dz_cols @ np.ascontiguousarray(flipped.transpose(0, 2, 3, 1)).reshape(-1, c)
    dx = dx_rows.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    return dw, db, dx


def _check_batch(topo: Topology, batch: Tensor) -> None:
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValueError(f"batch must be [b,c,H,W] with b >= 1, got shape {batch.shape}")
    first = topo.layers[0]
    if first.kind == CONV2D and batch.shape[1] != first.in_size:
        raise ValueError(f"batch has {batch.shape[1]} channels, topology expects {first.in_size}")
    if topo.input_hw is not None and tuple(batch.shape[2:]) != topo.input_hw:
        raise ValueError(f"topology {topo.name!r} requires {topo.input_hw} inputs, got {batch.shape[2:]}")


def forward(model: ModelParams, batch: Tensor) -> ForwardTrace:
    """Run the network, capturing per-layer flattened activations.

    Hidden layers apply ReLU; the final layer's pre-sigmoid output is the
    ``logits`` tensor and its sigmoid is recorded as that layer's activation.
    """
    topo = get_topology(model.topology_id)
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(topo, batch)
    b = batch.shape[0]

    x = batch
    layer_inputs: list[Tensor] = []
    preacts: list[Tensor] = []
    activations: dict[int, FeatureMatrix] = {}
    last = model.num_layers - 1
    for idx, layer in enumerate(model.layers):
        if layer.kind == DENSE and x.ndim == 4:
            x = x.reshape(b, -1)
        layer_inputs.append(x)
        if layer.kind == CONV2D:
            z = _conv_forward(x, layer.weights, layer.biases)
        else:
            if x.shape[1] != layer.weights.shape[1]:
                raise ValueError(
                    f"layer {layer.layer_id}: input has {x.shape[1]} features, "
                    f"weights expect {layer.weights.shape[1]}"
                )
            z = x @ layer.weights.T + layer.biases
        preacts.append(z)
        a = sigmoid(z) if idx == last else relu(z)
        activations[layer.layer_id] = a.reshape(b, -1)
        x = a

    logits = preacts[-1]
    if logits.ndim == 2:
        # Dense head: reinterpret the flat output as a 1-channel image.
        hw = topo.input_hw
        logits = logits.reshape(b, 1, hw[0], hw[1])
    ensure_finite(logits, "forward logits")
    for m, act in activations.items():
        ensure_finite(act, f"forward activations of layer {m}")
    return ForwardTrace(
        logits=logits,
        activations=activations,
        topology_id=model.topology_id,
        layer_inputs=layer_inputs,
        preacts=preacts,
    )


def _check_binary(target: Tensor) -> None:
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("target mask must contain only 0 and 1")


def dice_loss(logits: Tensor, target: Tensor, eps: float = 1.0) -> float:
    """Soft Dice loss over the whole batch.

    Returns 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps) with
    p = sigmoid(logits). The default smoothing eps=1.0 keeps the empty-mask
    case defined; it is exposed as a parameter so exactness checks can drive
    it toward zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {logits.shape} != target shape {target.shape}")
    _check_binary(target)
    p = sigmoid(logits)
    numer = 2.0 * float(np.sum(p * target)) + eps
    denom = float(np.sum(p) + np.sum(target)) + eps
    loss = 1.0 - numer / denom
    ensure_finite(np.asarray(loss), "dice loss")
    return float(loss)


def _dice_loss_grad(logits: Tensor, target: Tensor, eps: float) -> Tensor:
    """d(dice_loss)/d(logits), same shape as logits."""
    p = sigmoid(logits)
    numer = 2.0 * np.sum(p * target) + eps
    denom = np.sum(p) + np.sum(target) + eps
    dloss_dp = (numer - 2.0 * target * denom) / (denom * denom)
    return dloss_dp * p * (1.0 - p)


def backward(model: ModelParams, trace: ForwardTrace, target: Tensor, eps: float = 1.0) -> ModelParams:
    """Exact analytic gradients of ``dice_loss`` w.r.t. every parameter.

    Returns a ModelParams-shaped structure whose weights/biases slots hold
    the gradients.
    """
    if trace.topology_id != model.topology_id:
        raise ValueError("trace was produced by a different topology")
    if len(trace.layer_inputs) != model.num_layers:
        raise ValueError("trace does not match model layer count")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != trace.logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {trace.logits.shape}")
    _check_binary(target)

    d_out = _dice_loss_grad(trace.logits, target, eps)
    grads: list[LayerParams] = []
    d_after: Tensor | None = None  # gradient w.r.t. the activation of the layer below
    for idx in range(model.num_layers - 1, -1, -1):
        layer = model.layers[idx]
        z = trace.preacts[idx]
        x_in = trace.layer_inputs[idx]
        if layer.kind == CONV2D and layer.weights.shape[1] != x_in.shape[1]:
            raise ValueError("trace does not match model layer shapes")
        if layer.kind == DENSE and layer.weights.shape[1] != x_in.shape[1]:
            raise ValueError("trace does not match model layer shapes")
        if idx == model.num_layers - 1:
            dz = d_out.reshape(z.shape)  # sigmoid derivative folded into the loss grad
        else:
            dz = d_after.reshape(z.shape) * (z > 0)
        if layer.kind == CONV2D:
            dw, db, dx = _conv_backward(x_in, layer.weights, dz)
        else:
            dw = dz.T @ x_in
            db = dz.sum(axis=0)
            dx = dz @ layer.weights
        grads.append(LayerParams(layer.layer_id, layer.kind, dw, db))
        d_after = dx
    grads.reverse()
    for g in grads:
        ensure_finite(g.weights, f"gradients of layer {g.layer_id}")
        ensure_finite(g.biases, f"bias gradients of layer {g.layer_id}")
    return ModelParams(grads, model.topology_id)
