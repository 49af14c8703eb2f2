"""Continual learning with additively decomposed parameters.

Per-task weights are composed as masked task-shared weights plus a sparse
task-adaptive delta; earlier tasks' deltas are retroactively updated so their
compositions track frozen targets, and related deltas are periodically
consolidated into locally-shared arrays.
"""

from .consolidation import ClusterModel, consolidate, decompose_group, kmeans
from .metrics import (
    CapacityReport,
    PerformanceMatrix,
    aopd,
    capacity,
    evaluate,
    forget_task,
    forgetting,
    mopd,
    opd,
    pca2d,
)
from .numeric import GradTape, grad_check, matmul, sigmoid, softmax_cross_entropy
from .params import (
    DecomposedState,
    build_state,
    compose,
    effective_tau,
    forward,
    init_task,
    mask_of,
    restore,
)
from .taskgen import StreamSpec, TaskDataset, fixture_orders, gen_stream, orders, split
from .trainer import (
    HyperParams,
    SequenceResult,
    Variant,
    loss_eq1,
    loss_eq2,
    loss_eq3,
    proximal_l1,
    run_sequence,
    train_task,
)

__version__ = "0.1.0"
