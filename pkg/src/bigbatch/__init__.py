"""Simulated multi-device training with synchronized batch normalization.

Everything runs in one process: devices are threads, collectives are
queue-backed message exchanges, and every reduction has a fixed order so
that runs are reproducible down to the last bit.
"""

from .tensor import (
    ChannelStats,
    NonFiniteError,
    Tensor,
    TensorError,
    channel_affine,
    channel_sum,
    new_tensor,
    sequential_sum_rows,
)
from .collectives import (
    SCOPE_BN_GROUP,
    SCOPE_WORLD,
    CollectiveError,
    CollectiveProtocolError,
    CollectiveTimeoutError,
    DeviceGroup,
    DeviceHandle,
    allreduce_sum,
    barrier,
    broadcast,
)
from .batchnorm import (
    BatchNormError,
    BNForwardCache,
    BNLayerState,
    bn_backward_local,
    bn_forward_local,
    bn_update_running,
    sync_bn_backward,
    sync_bn_forward,
)
from .model import (
    LayerSpec,
    LossValue,
    ModelError,
    ModelSpec,
    accuracy,
    backward,
    forward,
    init_buffers,
    init_params,
    l2_norm_sq,
    weight_keys,
)
from .optim import (
    BASE_BATCH,
    BASE_LR,
    DivergenceError,
    LRPolicy,
    ScheduleError,
    SGDState,
    accumulate_equivalence,
    default_warmup_iters,
    lr_at,
    make_policy,
    scaled_target_lr,
    sgd_step,
)
from .analysis import (
    AnalysisError,
    EquivalenceReport,
    RatioCell,
    SamplerSpec,
    VarianceReport,
    estimate_grad_variance,
    normal_pair_sampler,
    posneg_ratio_study,
    scalar_linear_grad,
    variance_equivalence_ratio,
)
from .data import (
    DataError,
    Dataset,
    DatasetSpec,
    class_means,
    generate_dataset,
    load_dataset,
    nearest_mean_probe,
    save_dataset,
)
from .trainer import (
    CSV_HEADER,
    ConfigError,
    DivergenceMonitor,
    ExperimentConfig,
    MetricsRow,
    TrainerError,
    TrainResult,
    check_replica_sync,
    run_training,
    write_outputs,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # tensor
    "Tensor", "TensorError", "NonFiniteError", "ChannelStats",
    "new_tensor", "channel_sum", "channel_affine", "sequential_sum_rows",
    # collectives
    "DeviceGroup", "DeviceHandle", "allreduce_sum", "broadcast", "barrier",
    "SCOPE_WORLD", "SCOPE_BN_GROUP",
    "CollectiveError", "CollectiveProtocolError", "CollectiveTimeoutError",
    # batch norm
    "BNLayerState", "BNForwardCache", "BatchNormError",
    "bn_forward_local", "bn_backward_local", "bn_update_running",
    "sync_bn_forward", "sync_bn_backward",
    # model
    "ModelSpec", "LayerSpec", "LossValue", "ModelError",
    "init_params", "init_buffers", "forward", "backward", "accuracy",
    "weight_keys", "l2_norm_sq",
    # optimizer and schedule
    "SGDState", "LRPolicy", "ScheduleError", "DivergenceError",
    "sgd_step", "lr_at", "make_policy", "scaled_target_lr",
    "accumulate_equivalence", "default_warmup_iters", "BASE_BATCH", "BASE_LR",
    # analysis
    "VarianceReport", "EquivalenceReport", "SamplerSpec", "RatioCell",
    "AnalysisError", "estimate_grad_variance", "variance_equivalence_ratio",
    "posneg_ratio_study", "scalar_linear_grad", "normal_pair_sampler",
    # data
    "DatasetSpec", "Dataset", "DataError", "generate_dataset", "save_dataset",
    "load_dataset", "class_means", "nearest_mean_probe",
    # trainer
    "ExperimentConfig", "ConfigError", "TrainerError", "TrainResult",
    "MetricsRow", "CSV_HEADER", "DivergenceMonitor",
    "check_replica_sync",
    "run_training", "write_outputs",
]
