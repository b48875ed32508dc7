"""fedlwr: a deterministic federated-learning simulator.

The package implements uniform parameter averaging (fedavg) and a
layer-wise re-weighted aggregation family: each layer of the global model
is rebuilt as a convex combination of the client layers, weighted by how
much each client's per-layer feature representations diverge from the
averaged reference model. A synthetic domain-shifted segmentation
benchmark and an experiment harness make the fairness effect measurable
end to end.
"""

from .cka import CKA_LINEAR, COSINE_MEAN, SimilarityScore, center_gram, cka, cosine_mean, gram, hsic
from .datasets import (
    BENCHMARKS,
    DatasetBundle,
    DomainSpec,
    Sample,
    bundles_equal,
    generate_client_dataset,
    load_dataset,
    save_dataset,
)
from .errors import (
    ConfigError,
    DatasetError,
    DatasetFormatError,
    DatasetShapeError,
    DatasetTruncatedError,
    NumericError,
)
from .experiment import (
    CompareResult,
    ExperimentConfig,
    compare,
    format_compare,
    load_config,
    parse_config,
    render_config,
    run_experiment,
    save_config,
)
from .federation import (
    AggregationWeights,
    ClientState,
    FederationConfig,
    SimilarityProfile,
    StrategyKind,
    average_aggregate,
    convert_weights,
    derive_seed,
    estimate_similarity,
    layerwise_reaggregate,
    local_train,
    make_client,
    parse_strategy,
    run_round,
)
from .metrics import RoundReport, dice_coefficient, evaluate_client, fairness_compare
from .network import (
    TOPOLOGIES,
    ForwardTrace,
    LayerParams,
    ModelParams,
    Tensor,
    backward,
    build_model,
    dice_loss,
    forward,
)
from .optim import AdamState, adam_step, init_adam_state

__version__ = "0.1.0"
