"""Coupled equilibrium model over dynamic-graph snapshots.

Each snapshot t holds an embedding matrix Z_t of shape (hidden_dim, n).
One sweep refreshes every snapshot from its predecessor in the cyclic
ordering (snapshot 1 reads from snapshot T):

    Z_t  <-  activation(W_t (Z_prev A_t) + V_t X_t)

The model's output embeddings are the fixed point of this sweep. With each
weight matrix confined to an infinity-norm ball of radius
contraction_target / opnorm(A_t), the sweep is a contraction and the fixed
point exists, is unique, and is reachable by damped iteration from any
start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError, ShapeError
from .linalg import infinity_norm, operator_norm, project_linf_ball, spmm, spmm_t

__all__ = [
    "Activation",
    "get_activation",
    "ACTIVATIONS",
    "ModelParams",
    "init_params",
    "layer_step",
    "coupled_sweep",
    "FixedPointConfig",
    "FixedPointResult",
    "fixed_point_solve",
    "composed_map",
    "composed_trace",
    "composed_vjp",
    "compute_weight_radii",
    "enforce_wellposedness",
    "ContractionReport",
    "contraction_report",
    "predict",
    "save_params",
    "load_params",
]


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity with first and second derivatives."""

    name: str
    f: object
    deriv: object
    second_deriv: object
    smooth: bool


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_d(x):
    # The subgradient at exactly zero is taken to be zero.
    return (x > 0).astype(np.float64)


def _tanh_d(x):
    return 1.0 - np.tanh(x) ** 2


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_d(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _sigmoid_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


ACTIVATIONS = {
    "relu": Activation("relu", _relu, _relu_d, lambda x: np.zeros_like(x), smooth=False),
    "tanh": Activation("tanh", np.tanh, _tanh_d, _tanh_d2, smooth=True),
    "sigmoid": Activation("sigmoid", _sigmoid, _sigmoid_d, _sigmoid_d2, smooth=True),
    "identity": Activation("identity", lambda x: x, lambda x: np.ones_like(x), lambda x: np.zeros_like(x), smooth=True),
}


def get_activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass
class ModelParams:
    """All trainable state.

    weights: per-snapshot recurrence matrices, each (hidden_dim, hidden_dim).
    A single-element list means one matrix shared by every snapshot.
    input_maps: per-snapshot feature projections, each (hidden_dim, feat_dim).
    A single-element list means one shared projection (the default).
    head_weight / head_bias: linear readout applied to the final snapshot.
    """

    weights: list
    input_maps: list
    head_weight: np.ndarray
    head_bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.input_maps = [np.asarray(v, dtype=np.float64) for v in self.input_maps]
        self.head_weight = np.asarray(self.head_weight, dtype=np.float64)
        self.head_bias = np.asarray(self.head_bias, dtype=np.float64)
        d = self.weights[0].shape[0]
        for w in self.weights:
            if w.shape != (d, d):
                raise ShapeError("every recurrence matrix must be square with a shared size")
        for v in self.input_maps:
            if v.ndim != 2 or v.shape[0] != d:
                raise ShapeError("input maps must have hidden_dim rows")
        if self.head_weight.ndim != 2 or self.head_weight.shape[1] != d:
            raise ShapeError("readout weight must have hidden_dim columns")
        if self.head_bias.shape != (self.head_weight.shape[0],):
            raise ShapeError("readout bias length must match readout rows")
        get_activation(self.activation)

    @property
    def hidden_dim(self):
        return self.weights[0].shape[0]

    @property
    def feat_dim(self):
        return self.input_maps[0].shape[1]

    @property
    def out_dim(self):
        return self.head_weight.shape[0]

    def weight_at(self, t0):
        """Recurrence matrix for 0-based snapshot index t0."""
        return self.weights[0] if len(self.weights) == 1 else self.weights[t0]

    def input_map_at(self, t0):
        return self.input_maps[0] if len(self.input_maps) == 1 else self.input_maps[t0]

    def validate_against(self, graph):
        T = graph.num_snapshots
        if len(self.weights) not in (1, T):
            raise ShapeError(
                f"model holds {len(self.weights)} recurrence matrices but the graph has {T} snapshots"
            )
        if len(self.input_maps) not in (1, T):
            raise ShapeError(
                f"model holds {len(self.input_maps)} input maps but the graph has {T} snapshots"
            )
        if self.feat_dim != graph.feat_dim:
            raise ShapeError(
                f"model expects {self.feat_dim} features but the graph has {graph.feat_dim}"
            )

    def copy(self):
        return ModelParams(
            [w.copy() for w in self.weights],
            [v.copy() for v in self.input_maps],
            self.head_weight.copy(),
            self.head_bias.copy(),
            self.activation,
        )


def init_params(
    num_snapshots,
    feat_dim,
    out_dim,
    hidden_dim=16,
    activation="tanh",
    tied_weights=False,
    shared_input_map=True,
    seed=0,
    init_scale=None,
):
    """Uniform initialization in [-a, a] with a = 0.5 / sqrt(hidden_dim).

    The caller is expected to project the result with enforce_wellposedness
    before solving; initialization alone does not guarantee contraction.
    """
    rng = np.random.default_rng(seed)
    a = 0.5 / math.sqrt(hidden_dim) if init_scale is None else float(init_scale)
    n_w = 1 if tied_weights else num_snapshots
    n_v = 1 if shared_input_map else num_snapshots
    weights = [rng.uniform(-a, a, size=(hidden_dim, hidden_dim)) for _ in range(n_w)]
    input_maps = [rng.uniform(-a, a, size=(hidden_dim, feat_dim)) for _ in range(n_v)]
    head_weight = rng.uniform(-a, a, size=(out_dim, hidden_dim))
    head_bias = np.zeros(out_dim)
    return ModelParams(weights, input_maps, head_weight, head_bias, activation)


def layer_step(W, Z_prev, A, V, X, activation):
    """One snapshot refresh: activation(W (Z_prev A) + V X)."""
    act = activation if isinstance(activation, Activation) else get_activation(activation)
    return act.f(W @ spmm(Z_prev, A) + V @ X)


def coupled_sweep(params, graph, Z_list):
    """Jacobi sweep: refresh every snapshot from the previous iterate.

    Snapshot t reads snapshot t-1's old embedding (snapshot 1 reads T's).
    """
    T = graph.num_snapshots
    act = get_activation(params.activation)
    out = []
    for t0 in range(T):
        snap = graph.snapshots[t0]
        prev = Z_list[(t0 - 1) % T]
        out.append(
            layer_step(
                params.weight_at(t0), prev, snap.adjacency, params.input_map_at(t0), snap.features, act
            )
        )
    return out


@dataclass
class FixedPointConfig:
    tol: float = 1e-6
    max_sweeps: int = 500
    damping: float = 1.0
    raise_on_failure: bool = True


@dataclass
class FixedPointResult:
    embeddings: list
    sweeps: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)


def fixed_point_solve(params, graph, config=None, init=None):
    """Damped iteration to the coupled fixed point.

    Runs Z <- (1 - damping) Z + damping * sweep(Z) until the largest
    entrywise change a full sweep would make drops to tol. The reported
    sweep count is the number of updates actually applied, and the reported
    residual is measured at the returned embeddings.
    """
    cfg = config or FixedPointConfig()
    params.validate_against(graph)
    T = graph.num_snapshots
    n = graph.num_nodes
    d = params.hidden_dim
    if init is None:
        Z = [np.zeros((d, n)) for _ in range(T)]
    else:
        if len(init) != T or any(z.shape != (d, n) for z in init):
            raise ShapeError("warm start shape does not match (hidden_dim, n) per snapshot")
        Z = [np.asarray(z, dtype=np.float64).copy() for z in init]

    history = []
    for k in range(cfg.max_sweeps + 1):
        S = coupled_sweep(params, graph, Z)
        residual = max(float(np.max(np.abs(S[t] - Z[t]))) for t in range(T))
        history.append(residual)
        if residual <= cfg.tol:
            return FixedPointResult(Z, sweeps=k, residual=residual, converged=True, history=history)
        if k == cfg.max_sweeps:
            break
        if cfg.damping == 1.0:
            Z = S
        else:
            Z = [(1.0 - cfg.damping) * Z[t] + cfg.damping * S[t] for t in range(T)]

    if cfg.raise_on_failure:
        raise ConvergenceError(
            f"fixed-point iteration still above tol={cfg.tol:g} after "
            f"{cfg.max_sweeps} sweeps (last residual {history[-1]:.3e})",
            history=history,
            last_estimate=Z,
        )
    return FixedPointResult(Z, sweeps=cfg.max_sweeps, residual=history[-1], converged=False, history=history)


def composed_map(params, graph, Z_init=None):
    """One sequential pass through snapshots 1..T (no equilibrium).

    Snapshot t reads the embedding just computed for t-1; snapshot 1 reads
    the initial state of snapshot T (zeros by default). This is the
    feedforward variant used when the fixed-point constraint is disabled.
    """
    Z, _ = composed_trace(params, graph, Z_init)
    return Z


def composed_trace(params, graph, Z_init=None):
    """Run the sequential pass and keep what the backward pass needs."""
    params.validate_against(graph)
    T = graph.num_snapshots
    n = graph.num_nodes
    d = params.hidden_dim
    act = get_activation(params.activation)
    prev = np.zeros((d, n)) if Z_init is None else np.asarray(Z_init[-1], dtype=np.float64)
    Z = []
    cache = []
    for t0 in range(T):
        snap = graph.snapshots[t0]
        za = spmm(prev, snap.adjacency)
        pre = params.weight_at(t0) @ za + params.input_map_at(t0) @ snap.features
        z = act.f(pre)
        cache.append((za, pre))
        Z.append(z)
        prev = z
    return Z, cache


def composed_vjp(params, graph, cache, grad_final):
    """Backpropagate through the sequential pass.

    grad_final is the loss gradient at the last snapshot's embedding.
    Returns (weight_grads, input_map_grads) with the same list lengths as
    params.weights and params.input_maps.
    """
    T = graph.num_snapshots
    act = get_activation(params.activation)
    dW = [np.zeros_like(w) for w in params.weights]
    dV = [np.zeros_like(v) for v in params.input_maps]
    dZ = np.asarray(grad_final, dtype=np.float64)
    for t0 in range(T - 1, -1, -1):
        za, pre = cache[t0]
        snap = graph.snapshots[t0]
        dpre = act.deriv(pre) * dZ
        wi = 0 if len(params.weights) == 1 else t0
        vi = 0 if len(params.input_maps) == 1 else t0
        dW[wi] += dpre @ za.T
        dV[vi] += dpre @ snap.features.T
        dZ = spmm_t(params.weight_at(t0).T @ dpre, snap.adjacency)
    return dW, dV


def compute_weight_radii(graphs, contraction_target=0.95):
    """Infinity-norm budget per snapshot: target / max operator norm.

    graphs may be one dynamic graph or a list; the per-snapshot radius is
    shared across the whole collection by taking the largest adjacency
    operator norm seen at that snapshot index. A snapshot with no edges
    imposes no budget (radius inf).
    """
    if not isinstance(graphs, (list, tuple)):
        graphs = [graphs]
    if contraction_target <= 0:
        raise ValueError("contraction_target must be positive")
    T = graphs[0].num_snapshots
    radii = []
    for t0 in range(T):
        worst = 0.0
        for g in graphs:
            worst = max(worst, operator_norm(g.snapshots[t0].adjacency))
        radii.append(contraction_target / worst if worst > 0 else math.inf)
    return radii


def enforce_wellposedness(params, graphs=None, contraction_target=0.95, radii=None):
    """Project every recurrence matrix into its contraction budget.

    Returns a new ModelParams whose weights satisfy
    infnorm(W_t) * opnorm(A_t) <= contraction_target for every snapshot and
    every graph. When the weights are shared across snapshots the tightest
    budget applies. Pass precomputed radii to skip the operator-norm work
    (they are fixed during training since the graphs do not change).
    """
    if radii is None:
        if graphs is None:
            raise ValueError("need either graphs or precomputed radii")
        radii = compute_weight_radii(graphs, contraction_target)
    if len(params.weights) == 1:
        budgets = [min(radii)]
    else:
        if len(radii) != len(params.weights):
            raise ShapeError("radius count does not match recurrence-matrix count")
        budgets = radii
    new_weights = []
    for w, r in zip(params.weights, budgets):
        new_weights.append(w.copy() if math.isinf(r) else project_linf_ball(w, r))
    return replace(params, weights=new_weights)


@dataclass
class ContractionReport:
    """Per-snapshot contraction products infnorm(W_t) * opnorm(A_t)."""

    products: list
    max_product: float
    well_posed: bool


def contraction_report(params, graphs):
    if not isinstance(graphs, (list, tuple)):
        graphs = [graphs]
    T = graphs[0].num_snapshots
    products = []
    for t0 in range(T):
        a_norm = max(operator_norm(g.snapshots[t0].adjacency) for g in graphs)
        products.append(infinity_norm(params.weight_at(t0)) * a_norm)
    worst = max(products) if products else 0.0
    return ContractionReport(products, worst, well_posed=worst < 1.0)


def predict(params, Z_final):
    """Linear readout on the final snapshot's embedding: (out_dim, n)."""
    return params.head_weight @ Z_final + params.head_bias[:, None]


def save_params(params, path):
    arrays = {
        "num_weights": np.array(len(params.weights)),
        "num_input_maps": np.array(len(params.input_maps)),
        "head_weight": params.head_weight,
        "head_bias": params.head_bias,
        "activation": np.array(params.activation),
    }
    for i, w in enumerate(params.weights):
        arrays[f"weight_{i}"] = w
    for i, v in enumerate(params.input_maps):
        arrays[f"input_map_{i}"] = v
    np.savez(path, **arrays)


def load_params(path):
    with np.load(path, allow_pickle=False) as data:
        nw = int(data["num_weights"])
        nv = int(data["num_input_maps"])
        return ModelParams(
            [data[f"weight_{i}"] for i in range(nw)],
            [data[f"input_map_{i}"] for i in range(nv)],
            data["head_weight"],
            data["head_bias"],
            str(data["activation"]),
        )
