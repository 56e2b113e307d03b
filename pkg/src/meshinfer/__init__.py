"""Deterministic simulator for distributed transformer inference over lossy
all-to-all mesh networks: pruned-gather partitioning, message-loss modes, and
analytical resource/latency accounting, verified against centralized oracles."""

from .bundle import read_bundle, write_bundle
from .config import TransformerConfig
from .errors import (
    AssemblyError,
    BundleError,
    BundleFormatError,
    BundleMagicError,
    BundleTruncatedError,
    BundleVersionError,
    ConfigError,
    DegenerateInputError,
    MeshInferError,
    ProtocolError,
    PruneError,
    ShapeError,
)
from .executor import ExecReport, assemble_output, run_inference
from .latency import LatencyParams, comm_latency, compute_latency, speedup
from .mesh import LOSSLESS, GatherTrace, LossModel, Payload, sample_losses, somegather_round
from .model import (
    LayerWeights,
    ModelBundle,
    forward_standard,
    forward_virtual_devices,
    random_bundle,
)
from .partition import (
    DeviceShard,
    Partition,
    PruneSpec,
    apply_pruning,
    build_partition,
    build_pruned_spec,
    expand_mask,
    gather_sites,
    rank_columns,
    shard_weights,
    stepwise_schedule,
)
from .resources import (
    ArchetypeCost,
    DeviceBudget,
    ResourceReport,
    archetype_costs,
    comm_per_inference,
    feasibility_boundary,
    flash_per_device,
    ram_per_device,
    resource_report,
)

__version__ = "0.1.0"
