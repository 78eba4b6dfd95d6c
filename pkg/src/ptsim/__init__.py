"""Track-parallel transformer simulator.

A desk-scale, fully deterministic model of track parallelism: a dense
transformer reference, the track-parallel variant with periodic fusion, a
simulated multi-device mesh executing both it and a tensor-parallel
baseline with a complete collective trace, and an analytic latency model.
"""

from .errors import (
    ConfigError,
    DimensionError,
    InputError,
    MeshProtocolError,
    PtsimError,
)
from .mesh import (
    Mesh,
    SyncEvent,
    SyncStats,
    all_reduce,
    export_trace,
    parse_trace,
    run_pt_parallel,
)
from .model import (
    LayerWeights,
    ModelConfig,
    WeightSet,
    default_ffn_dim,
    dense_forward,
    layer_forward,
    read_logits_file,
    write_logits_file,
)
from .perf import (
    CostBreakdown,
    HardwareProfile,
    PerfEstimate,
    collective_cost,
    estimate,
    sync_count,
    sync_reduction_fraction,
)
from .pt import (
    FusionCapture,
    PTConfig,
    PTWeightSet,
    count_fusions,
    dense_equivalent,
    fuse,
    pt_forward_sequential,
    pt_variant,
)
from .tensor import (
    SeededRng,
    element_width,
    float_dtype,
    matmul,
    max_rel_error,
    rms_norm,
    rope_apply,
    seeded_init,
    set_element_width,
    softmax_rows,
    use_element_width,
)
from .tp import ShardedWeightSet, reassemble_weights, run_tp_forward, shard_weights

__version__ = "0.1.0"
