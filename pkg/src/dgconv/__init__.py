"""Dynamic grouping convolution: learnable channel-group structure for CNNs."""

from .checkpoint import load_any, load_checkpoint, load_compiled, save_checkpoint, save_compiled
from .compiler import CompiledLayer, compile_layer, compile_model, savings_report
from .complexity import ComplexityBudget, budget_from_b, network_complexity, penalized_loss
from .gates import (
    RelationshipMatrix,
    binarize,
    block_diagonal_permutation,
    build_relationship_matrix,
    group_count,
    layer_complexity,
    nnz_oracle,
)
from .layer import DGConv2d, dgconv_backward, dgconv_forward
from .model import GroupableNet, ModelConfig, build_model
from .trainer import DynamicsLog, TrainConfig, evaluate, train

__version__ = "0.1.0"
