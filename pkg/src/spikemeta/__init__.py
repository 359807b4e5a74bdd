"""Desk-scale simulator of a digital neuromorphic learning core.

Integer-weight CUBA LIF networks with error-triggered plasticity in the
deployed form, a tape-based differentiable twin for bi-level meta-training,
a synthetic event-data task family, and a command-line harness.
"""

from .quantize import (
    LOIHI_WEIGHTS,
    QuantizationScheme,
    RandomSource,
    WeightMatrix,
    quantize_weights,
    stochastic_round_even,
)
from .dynamics import (
    LayerState,
    NetworkTopology,
    NeuronConfig,
    TraceState,
    run_network,
    step_cuba_layer,
    update_presyn_trace,
)
from .plasticity import (
    SoelConfig,
    SoelState,
    SumOfProductsRule,
    compute_window_error,
    encode_posttrace,
    eval_sum_of_products,
    learning_epoch_step,
    soel_update,
)
from .surrogate import SurrogateConfig, surrogate_derivative
from .data import (
    BinnedSample,
    Episode,
    EventStream,
    MetaSplit,
    SyntheticTaskFamily,
    bin_events,
    build_episode,
    generate_synthetic_family,
    knn_predict,
)
from .meta import (
    AdamState,
    EpisodeResult,
    InnerLoopConfig,
    MetaModel,
    OuterLoopConfig,
    adam_step,
    inner_adapt,
    init_model,
    meta_test_trial,
    meta_train,
    outer_loss,
)
from .config import ExperimentConfig, parse_config, emit_config

__version__ = "0.1.0"
