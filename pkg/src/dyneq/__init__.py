"""Equilibrium embeddings over dynamic graph snapshots.

The model couples every snapshot of a dynamic graph to its predecessor in a
cyclic ordering and defines node embeddings as the fixed point of the
resulting joint update. Weight projection onto an infinity-norm ball keeps
that update a contraction, so the fixed point is well defined and damped
iteration provably reaches it. Training either differentiates through the
equilibrium exactly (adjoint or forward sensitivities) or runs a
single-loop scheme that never waits for the solver.
"""

from .errors import (
    ConvergenceError,
    DatasetError,
    DatasetShapeError,
    DyneqError,
    MetricError,
    MissingFileError,
    NonFiniteError,
    ShapeError,
)
from .kernels import BACKEND
from .linalg import (
    CsrMatrix,
    infinity_norm,
    operator_norm,
    project_linf_ball,
    spmm,
    spmm_t,
    unvec,
    vec,
)
from .graphs import (
    Dataset,
    DatasetSplit,
    DynamicGraph,
    SnapshotGraph,
    gen_toy_binary,
    gen_toy_longrange,
    load_dataset,
    normalize_01,
    prev_snapshot,
    save_dataset,
    split_dataset,
    sym_normalize,
)
from .model import (
    ACTIVATIONS,
    ContractionReport,
    FixedPointConfig,
    FixedPointResult,
    ModelParams,
    composed_map,
    compute_weight_radii,
    contraction_report,
    coupled_sweep,
    enforce_wellposedness,
    fixed_point_solve,
    init_params,
    layer_step,
    load_params,
    predict,
    save_params,
)
from .gradients import (
    ParamGrads,
    adjoint_solve,
    forward_sensitivities,
    ift_gradient,
    ift_gradient_forward,
    noloop_gradient,
)
from .bilevel import (
    BilevelConfig,
    BlockState,
    gap_grad_params,
    gap_grad_z,
    gap_hvp_wz,
    gap_hvp_zz,
    gap_hvps,
    gap_value,
    init_block_state,
    update_block,
)
from .metrics import (
    accuracy,
    dirichlet_energy,
    mape,
    mean_average_distance,
    roc_auc_binary,
    roc_auc_macro,
)
from .harness import TrainConfig, TrainResult, bench, evaluate, oracle_check, train

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BACKEND",
    # errors
    "DyneqError",
    "ShapeError",
    "ConvergenceError",
    "DatasetError",
    "MissingFileError",
    "DatasetShapeError",
    "NonFiniteError",
    "MetricError",
    # linear algebra
    "CsrMatrix",
    "vec",
    "unvec",
    "spmm",
    "spmm_t",
    "infinity_norm",
    "operator_norm",
    "project_linf_ball",
    # data
    "SnapshotGraph",
    "DynamicGraph",
    "Dataset",
    "DatasetSplit",
    "prev_snapshot",
    "gen_toy_longrange",
    "gen_toy_binary",
    "sym_normalize",
    "normalize_01",
    "split_dataset",
    "save_dataset",
    "load_dataset",
    # model
    "ACTIVATIONS",
    "ModelParams",
    "init_params",
    "layer_step",
    "coupled_sweep",
    "FixedPointConfig",
    "FixedPointResult",
    "fixed_point_solve",
    "composed_map",
    "compute_weight_radii",
    "enforce_wellposedness",
    "ContractionReport",
    "contraction_report",
    "predict",
    "save_params",
    "load_params",
    # gradients
    "ParamGrads",
    "adjoint_solve",
    "ift_gradient",
    "ift_gradient_forward",
    "forward_sensitivities",
    "noloop_gradient",
    # single-loop optimizer
    "BilevelConfig",
    "BlockState",
    "init_block_state",
    "update_block",
    "gap_value",
    "gap_grad_z",
    "gap_grad_params",
    "gap_hvps",
    "gap_hvp_zz",
    "gap_hvp_wz",
    # metrics
    "accuracy",
    "roc_auc_binary",
    "roc_auc_macro",
    "mape",
    "dirichlet_energy",
    "mean_average_distance",
    # harness
    "TrainConfig",
    "TrainResult",
    "train",
    "evaluate",
    "bench",
    "oracle_check",
]
