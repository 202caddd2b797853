"""Gradients through the coupled fixed point.

Two independent routes to the same equilibrium gradient:

* adjoint: solve one linear fixed-point system for the backward state and
  read off parameter gradients. Cheap, used by the gradient-descent trainer.
* forward sensitivities: propagate per-parameter perturbation columns
  through the sweep until they stabilize. Cost grows with
  (hidden_dim * n)^2-ish state, so it is gated to small problems unless the
  caller explicitly opts in. Used as the cross-checking oracle and by the
  scaling benchmark.

Both assume the embeddings passed in are at (or near) the fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConvergenceError, MetricError, ShapeError
from .linalg import spmm, spmm_t, vec
from .model import (
    FixedPointConfig,
    composed_trace,
    composed_vjp,
    fixed_point_solve,
    get_activation,
    predict,
)

__all__ = [
    "ParamGrads",
    "cross_entropy_loss_grad",
    "mse_loss_grad",
    "loss_and_head_grads",
    "EquilibriumWorkspace",
    "build_workspace",
    "adjoint_solve",
    "equilibrium_param_grads",
    "ift_gradient",
    "MAX_DIRECT_STATE",
    "forward_sensitivities",
    "ift_gradient_forward",
    "noloop_gradient",
]

# Largest hidden_dim * n for which the forward-sensitivity route runs
# without an explicit opt-in.
MAX_DIRECT_STATE = 30


@dataclass
class ParamGrads:
    """Gradient (or update direction) matching ModelParams' layout."""

    weights: list
    input_maps: list
    head_weight: np.ndarray
    head_bias: np.ndarray

    @staticmethod
    def zeros_like(params):
        return ParamGrads(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(v) for v in params.input_maps],
            np.zeros_like(params.head_weight),
            np.zeros_like(params.head_bias),
        )

    def add_(self, other, scale=1.0):
        for a, b in zip(self.weights, other.weights):
            a += scale * b
        for a, b in zip(self.input_maps, other.input_maps):
            a += scale * b
        self.head_weight += scale * other.head_weight
        self.head_bias += scale * other.head_bias
        return self

    def scale_(self, c):
        for a in self.weights:
            a *= c
        for a in self.input_maps:
            a *= c
        self.head_weight *= c
        self.head_bias *= c
        return self

    def max_abs(self):
        pieces = self.weights + self.input_maps + [self.head_weight, self.head_bias]
        return max(float(np.max(np.abs(p))) if p.size else 0.0 for p in pieces)


def _softmax(logits):
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def cross_entropy_loss_grad(logits, labels, mask):
    """Mean cross entropy over the masked nodes, plus its logit gradient."""
    cols = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if cols.size == 0:
        raise MetricError("cross entropy needs at least one labeled node")
    sub = logits[:, cols]
    lab = np.asarray(labels, dtype=np.int64)[cols]
    if lab.min() < 0 or lab.max() >= logits.shape[0]:
        raise MetricError("label outside the logit range")
    shifted = sub - sub.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0))
    loss = float(np.mean(logz - shifted[lab, np.arange(cols.size)]))
    probs = _softmax(sub)
    probs[lab, np.arange(cols.size)] -= 1.0
    grad = np.zeros_like(logits)
    grad[:, cols] = probs / cols.size
    return loss, grad


def mse_loss_grad(pred, targets, mask):
    """Mean squared error over all masked entries, plus its gradient."""
    cols = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if cols.size == 0:
        raise MetricError("mean squared error needs at least one labeled node")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != pred.shape:
        raise ShapeError(f"targets {targets.shape} do not match predictions {pred.shape}")
    diff = pred[:, cols] - targets[:, cols]
    count = diff.size
    loss = float(np.sum(diff * diff) / count)
    grad = np.zeros_like(pred)
    grad[:, cols] = 2.0 * diff / count
    return loss, grad


def loss_and_head_grads(params, Z_final, graph, mask=None):
    """Task loss at the final snapshot plus gradients for Z and the readout.

    mask restricts the loss to a node subset (defaults to the graph's
    labeled nodes). Returns (loss, grad_Z_final, grad_head_weight,
    grad_head_bias).
    """
    outputs = predict(params, Z_final)
    mask = graph.label_mask if mask is None else np.asarray(mask, dtype=bool) & graph.label_mask
    if graph.task == "classification":
        loss, dout = cross_entropy_loss_grad(outputs, graph.labels, mask)
    else:
        loss, dout = mse_loss_grad(outputs, graph.labels, mask)
    grad_z = params.head_weight.T @ dout
    grad_hw = dout @ Z_final.T
    grad_hb = dout.sum(axis=1)
    return loss, grad_z, grad_hw, grad_hb


@dataclass
class EquilibriumWorkspace:
    """Quantities reused by both gradient routes, taken at the fixed point."""

    za: list  # per snapshot: Z_prev A_t, shape (hidden_dim, n)
    pre: list  # pre-activation W (Z_prev A) + V X
    sigma: list  # activation derivative at pre


def build_workspace(params, graph, Z):
    act = get_activation(params.activation)
    T = graph.num_snapshots
    za, pre, sigma = [], [], []
    for t0 in range(T):
        snap = graph.snapshots[t0]
        m = spmm(Z[(t0 - 1) % T], snap.adjacency)
        p = params.weight_at(t0) @ m + params.input_map_at(t0) @ snap.features
        za.append(m)
        pre.append(p)
        sigma.append(act.deriv(p))
    return EquilibriumWorkspace(za, pre, sigma)


def adjoint_solve(params, graph, workspace, grad_final, config=None):
    """Backward fixed point: the adjoint of each snapshot pulls from its
    successor in the cyclic ordering (snapshot T pulls from 1).

    Iterates U_b <- seed_b + W_s^T (sigma_s * U_s) A_s^T with s = b + 1
    until the update stalls below tol.
    """
    cfg = config or FixedPointConfig()
    T = graph.num_snapshots
    U = [np.zeros_like(grad_final) for _ in range(T)]
    history = []
    for k in range(cfg.max_sweeps + 1):
        new = []
        for b0 in range(T):
            s0 = (b0 + 1) % T
            snap_s = graph.snapshots[s0]
            pulled = spmm_t(
                params.weight_at(s0).T @ (workspace.sigma[s0] * U[s0]), snap_s.adjacency
            )
            if b0 == T - 1:
                pulled = pulled + grad_final
            new.append(pulled)
        residual = max(float(np.max(np.abs(new[t] - U[t]))) for t in range(T))
        history.append(residual)
        U = new
        if residual <= cfg.tol:
            return U
    raise ConvergenceError(
        f"adjoint iteration still above tol={cfg.tol:g} after {cfg.max_sweeps} sweeps",
        history=history,
        last_estimate=U,
    )


def equilibrium_param_grads(params, graph, workspace, U):
    """Parameter gradients once the adjoint state is available."""
    grads = ParamGrads.zeros_like(params)
    T = graph.num_snapshots
    for t0 in range(T):
        m = workspace.sigma[t0] * U[t0]
        wi = 0 if len(params.weights) == 1 else t0
        vi = 0 if len(params.input_maps) == 1 else t0
        grads.weights[wi] += m @ workspace.za[t0].T
        grads.input_maps[vi] += m @ graph.snapshots[t0].features.T
    return grads


def ift_gradient(params, graph, solver_config=None, adjoint_config=None, Z_init=None, mask=None):
    """Loss and exact equilibrium gradient via the adjoint route.

    Returns (loss, ParamGrads, FixedPointResult).
    """
    result = fixed_point_solve(params, graph, solver_config, init=Z_init)
    loss, grad_z, grad_hw, grad_hb = loss_and_head_grads(params, result.embeddings[-1], graph, mask=mask)
    ws = build_workspace(params, graph, result.embeddings)
    U = adjoint_solve(params, graph, ws, grad_z, adjoint_config or solver_config)
    grads = equilibrium_param_grads(params, graph, ws, U)
    grads.head_weight += grad_hw
    grads.head_bias += grad_hb
    return loss, grads, result


# ---------------------------------------------------------------------------
# Forward sensitivities (oracle route).
# ---------------------------------------------------------------------------


# Row/column block size for the aggregation product inside the sensitivity
# sweep. Accumulating fixed-shape GEMM tiles keeps per-operation throughput
# flat as the graph grows (a single growing GEMM speeds up per flop as its
# dimensions rise), so step timings track operation counts; it also bounds
# each tile's working set to a few MB.
_GEMM_TILE = 50


def _propagate_columns(W, A_t, S, out, scratch, n, d):
    """Apply the per-snapshot linear map to every sensitivity column.

    Columns are stacked embeddings in column-major order (dimension index
    fastest), so S.reshape(n, d, k)[j, i, c] is column c's entry for node j,
    dimension i. The map sends each column's matrix Z to W Z A; A_t is the
    dense transposed adjacency, and the result lands in ``out``.
    """
    k = S.shape[1]
    wide = d * k
    S2 = S.reshape(n, wide)
    Y2 = scratch[:n, :wide]
    first = min(_GEMM_TILE, n)
    for r0 in range(0, n, _GEMM_TILE):
        r1 = min(r0 + _GEMM_TILE, n)
        np.matmul(A_t[r0:r1, :first], S2[:first], out=Y2[r0:r1])
        for c0 in range(first, n, _GEMM_TILE):
            c1 = min(c0 + _GEMM_TILE, n)
            Y2[r0:r1] += A_t[r0:r1, c0:c1] @ S2[c0:c1]
    np.matmul(W, Y2.reshape(n, d, k), out=out.reshape(n, d, k))


def forward_sensitivities(params, graph, Z, slot, allow_large=False, config=None):
    """Jacobi iteration for the sensitivity of every embedding entry to one
    parameter block.

    slot is ("weight", i) or ("input_map", i) indexing params' lists; a
    shared block contributes a source term at every snapshot that uses it.
    Returns a list of T arrays of shape (hidden_dim * n, block_size) whose
    fixed point is the exact Jacobian of the stacked embeddings in that
    block. Refuses hidden_dim * n above MAX_DIRECT_STATE unless allow_large
    is set, because the state is quadratically larger than the embeddings.
    """
    cfg = config or FixedPointConfig(tol=1e-8, max_sweeps=2000)
    T = graph.num_snapshots
    n = graph.num_nodes
    d = params.hidden_dim
    if d * n > MAX_DIRECT_STATE and not allow_large:
        raise ValueError(
            f"forward sensitivities track a {d * n} x block_size state per snapshot; "
            f"pass allow_large=True to run above hidden_dim * n = {MAX_DIRECT_STATE}"
        )
    kind, idx = slot
    ws = build_workspace(params, graph, Z)
    eye = np.eye(d)
    scales = [np.ascontiguousarray(vec(s)) for s in ws.sigma]

    # The source enters inside the activation-derivative product, so fold
    # the (fixed) scale into it once instead of on every sweep.
    sources = []
    for t0 in range(T):
        if kind == "weight":
            uses = (0 if len(params.weights) == 1 else t0) == idx
            src = np.kron(ws.za[t0].T, eye) if uses else None
        elif kind == "input_map":
            uses = (0 if len(params.input_maps) == 1 else t0) == idx
            src = np.kron(graph.snapshots[t0].features.T, eye) if uses else None
        else:
            raise ValueError(f"unknown parameter slot kind {kind!r}")
        if src is not None:
            src *= scales[t0][:, None]
        sources.append(src)
    width = next(s.shape[1] for s in sources if s is not None)

    A_t = [
        np.ascontiguousarray(graph.snapshots[t0].adjacency.to_dense().T) for t0 in range(T)
    ]
    front = [np.zeros((d * n, width)) for _ in range(T)]
    back = [np.empty((d * n, width)) for _ in range(T)]
    scratch = np.empty((n, d * width))
    history = []
    for _ in range(cfg.max_sweeps + 1):
        residual = 0.0
        for t0 in range(T):
            _propagate_columns(
                params.weight_at(t0), A_t[t0], front[(t0 - 1) % T], back[t0], scratch, n, d
            )
            if sources[t0] is not None:
                r = kernels.row_scale_add_diff(back[t0], scales[t0], sources[t0], front[t0])
            else:
                r = kernels.row_scale_diff(back[t0], scales[t0], front[t0])
            residual = max(residual, r)
        front, back = back, front
        history.append(residual)
        if residual <= cfg.tol:
            return front
    raise ConvergenceError(
        f"sensitivity iteration still above tol={cfg.tol:g} after {cfg.max_sweeps} sweeps",
        history=history,
        last_estimate=front,
    )


def ift_gradient_forward(
    params, graph, solver_config=None, sensitivity_config=None, allow_large=False, mask=None
):
    """Loss and equilibrium gradient via forward sensitivities.

    Independent of the adjoint route: parameter gradients come from
    contracting each block's sensitivity matrix with the loss gradient at
    the final snapshot. Returns (loss, ParamGrads, FixedPointResult).
    """
    result = fixed_point_solve(params, graph, solver_config)
    Z = result.embeddings
    loss, grad_z, grad_hw, grad_hb = loss_and_head_grads(params, Z[-1], graph, mask=mask)
    seed = vec(grad_z)
    grads = ParamGrads.zeros_like(params)
    for i, w in enumerate(params.weights):
        S = forward_sensitivities(params, graph, Z, ("weight", i), allow_large, sensitivity_config)
        flat = S[-1].T @ seed
        grads.weights[i] += flat.reshape(w.shape, order="F")
    for i, v in enumerate(params.input_maps):
        S = forward_sensitivities(params, graph, Z, ("input_map", i), allow_large, sensitivity_config)
        flat = S[-1].T @ seed
        grads.input_maps[i] += flat.reshape(v.shape, order="F")
    grads.head_weight += grad_hw
    grads.head_bias += grad_hb
    return loss, grads, result


def noloop_gradient(params, graph, mask=None):
    """Loss and gradient for the feedforward variant (one sequential pass,
    no fixed-point constraint). Returns (loss, ParamGrads, Z_list)."""
    Z, cache = composed_trace(params, graph)
    loss, grad_z, grad_hw, grad_hb = loss_and_head_grads(params, Z[-1], graph, mask=mask)
    dW, dV = composed_vjp(params, graph, cache, grad_z)
    grads = ParamGrads(dW, dV, grad_hw, grad_hb)
    return loss, grads, Z
