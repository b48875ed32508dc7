"""The federation round engine.

One round runs local training on every client, averages the local models
into an anchor, and then aggregates according to the chosen strategy:

- ``fedavg``: the anchor itself becomes the next global model.
- ``fed_lwr``: each client measures per-layer CKA similarity between its
  local model's activations and the anchor's activations on its own data;
  layers with lower similarity pull more weight, and each layer of the next
  global model is a convex combination of the client layers under those
  weights.
- ``fed_lwr_v1_cosine``: same flow with mean per-sample cosine similarity
  instead of CKA.
- ``fed_lwr_v2_single_layer``: similarity from one designated layer decides
  a single weight vector applied to every layer.

Every step is deterministic: per-client RNG streams derive from
(client seed, round, stream tag), and the server reduces client
contributions in client-id order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cka import CKA_LINEAR, COSINE_MEAN, SimilarityScore, cka, cosine_mean
from .datasets import DatasetBundle, Sample
from .metrics import RoundReport, evaluate_client
from .network import LayerParams, ModelParams, backward, forward
from .optim import AdamState, adam_step, init_adam_state

# Layers whose summed dissimilarity falls below this threshold (all clients
# effectively identical to the anchor) fall back to uniform weights.
TAU_UNIFORM = 1e-9

# Stream tags keeping a client's shuffle draws separate from its
# similarity-sampling draws.
_TRAIN_STREAM = 0
_SIMILARITY_STREAM = 1


class StrategyKind(str, Enum):
    FEDAVG = "fedavg"
    FED_LWR = "fed_lwr"
    FED_LWR_V1_COSINE = "fed_lwr_v1_cosine"
    FED_LWR_V2_SINGLE_LAYER = "fed_lwr_v2_single_layer"


_STRATEGY_ALIASES = {
    "fed_lwr_v1": StrategyKind.FED_LWR_V1_COSINE,
    "fed_lwr_v2": StrategyKind.FED_LWR_V2_SINGLE_LAYER,
}


def parse_strategy(name: str) -> StrategyKind:
    if isinstance(name, StrategyKind):
        return name
    if name in _STRATEGY_ALIASES:
        return _STRATEGY_ALIASES[name]
    try:
        return StrategyKind(name)
    except ValueError:
        known = ", ".join(s.value for s in StrategyKind)
        raise ValueError(f"unknown strategy {name!r} (known: {known})") from None


@dataclass
class ClientState:
    """One participant: its private data splits, current local model,
    persistent optimizer state, and the base seed of its RNG streams."""

    client_id: int
    data: DatasetBundle
    model: ModelParams
    optimizer: AdamState
    n_k: int
    rng_seed: int


@dataclass
class SimilarityProfile:
    """Per-layer similarity of one client's local model to the anchor."""

    client_id: int
    scores: list[float]
    degenerate: list[bool]


@dataclass
class AggregationWeights:
    """Per-client, per-layer aggregation weights.

    ``values[k, m]`` weights client k's layer m+1; each column is
    non-negative and sums to 1. ``fallback_layers[m]`` records the layers
    that were forced uniform (degenerate features or vanishing denominator).
    """

    values: np.ndarray
    fallback_layers: list[bool]


@dataclass
class FederationConfig:
    local_epochs: int = 1
    batch_size: int = 8
    cka_sample_size: int = 64
    v2_layer: int | None = None
    cka_split: str = "train"
    reset_optimizer_each_round: bool = False


def derive_seed(*parts: int) -> int:
    """Stable non-negative seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint32)[0])


def make_client(
    client_id: int,
    data: DatasetBundle,
    initial_model: ModelParams,
    rng_seed: int,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
) -> ClientState:
    if len(data.train) < 2:
        raise ValueError(f"client {client_id} needs at least 2 training samples")
    model = initial_model.copy()
    return ClientState(
        client_id=client_id,
        data=data,
        model=model,
        optimizer=init_adam_state(model, lr=lr, weight_decay=weight_decay),
        n_k=len(data.train),
        rng_seed=rng_seed,
    )


def local_train(
    client: ClientState,
    global_model: ModelParams,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> ClientState:
    """Replace the client's model with the global one and train it for
    ``epochs`` shuffled passes over the client's training split. The
    client's Adam state carries over; the updated client is returned."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if global_model.topology_id != client.model.topology_id:
        raise ValueError("global model topology does not match the client's")
    train = client.data.train
    if not train:
        raise ValueError(f"client {client.client_id} has an empty training split")

    model = global_model.copy()
    state = client.optimizer
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch_idx = order[start : start + batch_size]
            images = np.stack([train[i].image for i in batch_idx])
            masks = np.stack([train[i].mask for i in batch_idx])
            trace = forward(model, images)
            grads = backward(model, trace, masks)
            model, state = adam_step(model, grads, state)
    client.model = model
    client.optimizer = state
    return client


def average_aggregate(models: list[ModelParams]) -> ModelParams:
    """Uniform element-wise mean of the models (1/K each, regardless of
    client dataset sizes)."""
    if not models:
        raise ValueError("no models to aggregate")
    first = models[0]
    for other in models[1:]:
        if other.topology_id != first.topology_id:
            raise ValueError("cannot aggregate models with different topologies")
    layers = []
    for idx, ref in enumerate(first.layers):
        weights = np.mean(np.stack([m.layers[idx].weights for m in models]), axis=0)
        biases = np.mean(np.stack([m.layers[idx].biases for m in models]), axis=0)
        layers.append(LayerParams(ref.layer_id, ref.kind, weights, biases))
    return ModelParams(layers, first.topology_id)


def _split_samples(client: ClientState, split: str) -> list[Sample]:
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    return getattr(client.data, split)


def estimate_similarity(
    client: ClientState,
    anchor: ModelParams,
    method: str = CKA_LINEAR,
    cka_sample_size: int = 64,
    seed: int = 0,
    split: str = "train",
) -> SimilarityProfile:
    """Per-layer similarity between the client's model and the anchor.

    Both models run forward on the same batch of up to ``cka_sample_size``
    samples drawn (without replacement, deterministically in ``seed``) from
    the client's chosen split. Layers whose features are constant on either
    side are flagged degenerate.
    """
    if anchor.topology_id != client.model.topology_id:
        raise ValueError("anchor topology does not match the client's model")
    if method not in (CKA_LINEAR, COSINE_MEAN):
        raise ValueError(f"unknown similarity method {method!r}")
    samples = _split_samples(client, split)
    take = min(len(samples), cka_sample_size)
    if take < 2:
        raise ValueError(
            f"client {client.client_id} has {len(samples)} usable samples; similarity needs >= 2"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(samples), size=take, replace=False)
    batch = np.stack([samples[i].image for i in chosen])

    local_trace = forward(client.model, batch)
    anchor_trace = forward(anchor, batch)
    compare = cka if method == CKA_LINEAR else cosine_mean
    scores: list[float] = []
    degenerate: list[bool] = []
    for layer in client.model.layers:
        result: SimilarityScore = compare(
            local_trace.activations[layer.layer_id],
            anchor_trace.activations[layer.layer_id],
        )
        scores.append(result.value)
        degenerate.append(result.degenerate)
    return SimilarityProfile(client.client_id, scores, degenerate)


def convert_weights(profiles: list[SimilarityProfile]) -> AggregationWeights:
    """Dissimilarity-proportional weights per layer:
    values[k, m] = (1 - score_k) / sum_i (1 - score_i).

    A layer falls back to uniform 1/K when any client flagged it degenerate
    or when the denominator vanishes (every client at similarity ~1).
    """
    if not profiles:
        raise ValueError("no similarity profiles")
    m_layers = len(profiles[0].scores)
    for p in profiles:
        if len(p.scores) != m_layers or len(p.degenerate) != m_layers:
            raise ValueError("profiles disagree on layer count")
    k = len(profiles)
    scores = np.array([p.scores for p in profiles], dtype=np.float64)
    flagged = np.array([p.degenerate for p in profiles], dtype=bool)

    values = np.empty((k, m_layers), dtype=np.float64)
    fallback: list[bool] = []
    for m in range(m_layers):
        dissim = 1.0 - scores[:, m]
        denom = float(dissim.sum())
        if bool(flagged[:, m].any()) or denom < TAU_UNIFORM:
            values[:, m] = 1.0 / k
            fallback.append(True)
        else:
            values[:, m] = dissim / denom
            fallback.append(False)
    return AggregationWeights(values, fallback)


def layerwise_reaggregate(models: list[ModelParams], weights: AggregationWeights) -> ModelParams:
    """Build each layer of the output as the weighted sum of the clients'
    corresponding layers, independently per layer."""
    if not models:
        raise ValueError("no models to aggregate")
    k, m_layers = weights.values.shape
    if len(models) != k:
        raise ValueError(f"{len(models)} models but weights describe {k} clients")
    first = models[0]
    if first.num_layers != m_layers:
        raise ValueError(f"models have {first.num_layers} layers but weights describe {m_layers}")
    for other in models[1:]:
        if other.topology_id != first.topology_id:
            raise ValueError("cannot aggregate models with different topologies")

    layers = []
    for idx, ref in enumerate(first.layers):
        w_acc = np.zeros_like(ref.weights)
        b_acc = np.zeros_like(ref.biases)
        for ki in range(k):  # fixed client order keeps the reduction deterministic
            w_acc += weights.values[ki, idx] * models[ki].layers[idx].weights
            b_acc += weights.values[ki, idx] * models[ki].layers[idx].biases
        layers.append(LayerParams(ref.layer_id, ref.kind, w_acc, b_acc))
    return ModelParams(layers, first.topology_id)


def _uniform_weights(k: int, m_layers: int) -> AggregationWeights:
    return AggregationWeights(np.full((k, m_layers), 1.0 / k), [False] * m_layers)


def _single_layer_profile(profile: SimilarityProfile, layer_index: int, m_layers: int) -> SimilarityProfile:
    score = profile.scores[layer_index]
    flag = profile.degenerate[layer_index]
    return SimilarityProfile(profile.client_id, [score] * m_layers, [flag] * m_layers)


def run_round(
    clients: list[ClientState],
    global_model: ModelParams,
    strategy: StrategyKind,
    config: FederationConfig,
    round_index: int,
) -> tuple[ModelParams, RoundReport]:
    """Execute one communication round and evaluate the new global model on
    every client's test split. Clients are processed in client-id order, so
    the result does not depend on the caller's ordering."""
    if not clients:
        raise ValueError("no clients")
    strategy = parse_strategy(strategy)
    ordered = sorted(clients, key=lambda c: c.client_id)
    ids = [c.client_id for c in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be distinct")

    for client in ordered:
        if config.reset_optimizer_each_round:
            client.optimizer = init_adam_state(
                client.model,
                lr=client.optimizer.lr,
                weight_decay=client.optimizer.weight_decay,
                beta1=client.optimizer.beta1,
                beta2=client.optimizer.beta2,
                eps=client.optimizer.eps,
            )
        rng = np.random.default_rng([client.rng_seed, round_index, _TRAIN_STREAM])
        local_train(client, global_model, config.local_epochs, config.batch_size, rng)

    local_models = [c.model for c in ordered]
    anchor = average_aggregate(local_models)
    k = len(ordered)
    m_layers = global_model.num_layers

    if strategy == StrategyKind.FEDAVG:
        new_global = anchor
        weights = _uniform_weights(k, m_layers)
        similarity_log = np.full((k, m_layers), np.nan)
    else:
        method = COSINE_MEAN if strategy == StrategyKind.FED_LWR_V1_COSINE else CKA_LINEAR
        profiles = []
        for client in ordered:
            sim_seed = derive_seed(client.rng_seed, round_index, _SIMILARITY_STREAM)
            profiles.append(
                estimate_similarity(
                    client,
                    anchor,
                    method=method,
                    cka_sample_size=config.cka_sample_size,
                    seed=sim_seed,
                    split=config.cka_split,
                )
            )
        similarity_log = np.array([p.scores for p in profiles])
        if strategy == StrategyKind.FED_LWR_V2_SINGLE_LAYER:
            designated = config.v2_layer if config.v2_layer is not None else math.ceil(m_layers / 2)
            if not 1 <= designated <= m_layers:
                raise ValueError(f"v2_layer {designated} outside [1, {m_layers}]")
            profiles = [_single_layer_profile(p, designated - 1, m_layers) for p in profiles]
        weights = convert_weights(profiles)
        new_global = layerwise_reaggregate(local_models, weights)

    dice = [evaluate_client(new_global, client.data.test) for client in ordered]
    report = RoundReport.from_scores(round_index, dice, weights, similarity_log)
    return new_global, report
