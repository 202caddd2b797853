"""Single-loop bilevel machinery.

The trainer never solves the fixed point to tolerance. Its inner state is a
single matrix: an estimate z of the final snapshot's equilibrium embedding.
One application of the composed map runs snapshots 1..T sequentially
starting from z (snapshot 1 reads z as the previous cycle's final state),
and the inner objective is the squared defect

    g(weights, z) = | z - composed(z) |_F^2,

which vanishes exactly at the equilibrium. Alongside z the trainer tracks
v, a running estimate of [d2g/dz2]^{-1} grad_z(loss), and a momentum
average of the hypergradient direction for the weights. The curvature is
never materialized; only Hessian-vector products are, by one
forward-over-reverse pass through the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradients import ParamGrads, loss_and_head_grads
from .linalg import spmm, spmm_t
from .model import get_activation

__all__ = [
    "GapWorkspace",
    "gap_workspace",
    "gap_value",
    "gap_grad_z",
    "gap_grad_params",
    "gap_hvps",
    "gap_hvp_zz",
    "gap_hvp_wz",
    "BilevelConfig",
    "BlockState",
    "init_block_state",
    "BlockDiagnostics",
    "update_block",
]


@dataclass
class GapWorkspace:
    """Per-layer quantities of one composed pass started at z."""

    inputs: list  # Z_0 .. Z_{T-1}: what each layer read
    za: list  # Z_{k-1} A_k per layer
    pre: list  # W_k (Z_{k-1} A_k) + V_k X_k
    sigma: list  # activation'(pre)
    sigma2: list  # activation''(pre)
    phi: np.ndarray  # composed output Z_T
    r: np.ndarray  # z - phi


def gap_workspace(params, graph, z):
    act = get_activation(params.activation)
    T = graph.num_snapshots
    inputs, za, pre, sigma, sigma2 = [], [], [], [], []
    cur = z
    for t0 in range(T):
        snap = graph.snapshots[t0]
        m = spmm(cur, snap.adjacency)
        p = params.weight_at(t0) @ m + params.input_map_at(t0) @ snap.features
        inputs.append(cur)
        za.append(m)
        pre.append(p)
        sigma.append(act.deriv(p))
        sigma2.append(act.second_deriv(p))
        cur = act.f(p)
    return GapWorkspace(inputs, za, pre, sigma, sigma2, phi=cur, r=z - cur)


def gap_value(params, graph, z, ws=None):
    """g(z) = squared Frobenius norm of the composed-map defect."""
    ws = ws or gap_workspace(params, graph, z)
    return float(np.sum(ws.r * ws.r))


def _pull_back_chain(params, graph, ws, seed):
    """Backpropagate seed from the composed output to the input.

    Returns (q0, s_list): q0 is (dphi/dz)^T seed and s_list holds the
    per-layer intermediates sigma_k * q_k used for parameter gradients.
    """
    T = graph.num_snapshots
    q = seed
    s_list = [None] * T
    for t0 in range(T - 1, -1, -1):
        s = ws.sigma[t0] * q
        s_list[t0] = s
        q = spmm_t(params.weight_at(t0).T @ s, graph.snapshots[t0].adjacency)
    return q, s_list


def gap_grad_z(params, graph, z, ws=None):
    """Gradient of the gap in z: 2 (r - (dphi/dz)^T r)."""
    ws = ws or gap_workspace(params, graph, z)
    q0, _ = _pull_back_chain(params, graph, ws, ws.r)
    return 2.0 * (ws.r - q0)


def gap_grad_params(params, graph, z, ws=None):
    """Gradient of the gap in the weights (readout slots stay zero)."""
    ws = ws or gap_workspace(params, graph, z)
    _, s_list = _pull_back_chain(params, graph, ws, ws.r)
    grads = ParamGrads.zeros_like(params)
    for t0 in range(graph.num_snapshots):
        wi = 0 if len(params.weights) == 1 else t0
        vi = 0 if len(params.input_maps) == 1 else t0
        grads.weights[wi] += -2.0 * (s_list[t0] @ ws.za[t0].T)
        grads.input_maps[vi] += -2.0 * (s_list[t0] @ graph.snapshots[t0].features.T)
    return grads


def gap_hvps(params, graph, z, tangent, ws=None):
    """Both second-derivative products of the gap against one tangent.

    Returns (hvp_zz, hvp_wz): the z-z Hessian times tangent (a matrix) and
    the weight-z cross Hessian times tangent (ParamGrads, readout slots
    zero). One forward pass carries the tangent through the chain, then one
    reverse pass carries (q, qdot) pairs back; both products fall out of
    the same sweep.
    """
    ws = ws or gap_workspace(params, graph, z)
    T = graph.num_snapshots

    # Forward: tangent of each layer input and pre-activation.
    tdots = []  # tangent of inputs[k]
    pdots = []
    tdot = tangent
    for t0 in range(T):
        snap = graph.snapshots[t0]
        ta = spmm(tdot, snap.adjacency)
        pd = params.weight_at(t0) @ ta
        tdots.append(tdot)
        pdots.append(pd)
        tdot = ws.sigma[t0] * pd
    rdot = tangent - tdot

    # Reverse: q backpropagates r, qdot backpropagates its tangent.
    q, qdot = ws.r, rdot
    w_hvp = ParamGrads.zeros_like(params)
    for t0 in range(T - 1, -1, -1):
        snap = graph.snapshots[t0]
        s = ws.sigma[t0] * q
        sdot = ws.sigma2[t0] * pdots[t0] * q + ws.sigma[t0] * qdot
        wi = 0 if len(params.weights) == 1 else t0
        vi = 0 if len(params.input_maps) == 1 else t0
        ta = spmm(tdots[t0], snap.adjacency)
        w_hvp.weights[wi] += -2.0 * (sdot @ ws.za[t0].T + s @ ta.T)
        w_hvp.input_maps[vi] += -2.0 * (sdot @ snap.features.T)
        W_t = params.weight_at(t0).T
        q = spmm_t(W_t @ s, snap.adjacency)
        qdot = spmm_t(W_t @ sdot, snap.adjacency)

    hvp_zz = 2.0 * (rdot - qdot)
    return hvp_zz, w_hvp


def gap_hvp_zz(params, graph, z, tangent, ws=None):
    return gap_hvps(params, graph, z, tangent, ws)[0]


def gap_hvp_wz(params, graph, z, tangent, ws=None):
    return gap_hvps(params, graph, z, tangent, ws)[1]


@dataclass
class BilevelConfig:
    """Step sizes for the three coupled updates.

    lr drives the weights (with momentum averaging factor grad_avg),
    damping drives the embedding estimate toward the composed-map output,
    and v_lr drives the curvature-direction estimate.
    """

    lr: float = 0.05
    damping: float = 0.9
    v_lr: float = 0.01
    grad_avg: float = 0.9


@dataclass
class BlockState:
    """Per-graph running estimates: final-snapshot embedding and curvature
    direction, both (hidden_dim, n)."""

    zhat: np.ndarray
    vhat: np.ndarray


def init_block_state(params, graph, rng=None):
    """Fresh running estimates: zeros by default (deterministic), or small
    random values when an rng is supplied."""
    shape = (params.hidden_dim, graph.num_nodes)
    if rng is None:
        return BlockState(np.zeros(shape), np.zeros(shape))
    return BlockState(0.1 * rng.standard_normal(shape), 0.1 * rng.standard_normal(shape))


@dataclass
class BlockDiagnostics:
    loss: float
    residual: float
    gap: float
    direction: ParamGrads = field(repr=False)


def update_block(params, graph, state, config, mask=None):
    """One coupled update for a single graph, all reads at the old state.

    zhat moves toward the composed-map output by the damping factor; vhat
    takes a gradient step on the quadratic model whose solution is
    [d2g/dz2]^{-1} grad_z(loss); the returned direction is the descent
    estimate for the weights (cross-Hessian against vhat, negated) plus
    plain loss gradients for the readout.
    """
    ws = gap_workspace(params, graph, state.zhat)
    zhat_new = (1.0 - config.damping) * state.zhat + config.damping * ws.phi

    loss, grad_z, grad_hw, grad_hb = loss_and_head_grads(params, state.zhat, graph, mask=mask)
    hvp_zz, hvp_wz = gap_hvps(params, graph, state.zhat, state.vhat, ws=ws)
    vhat_new = state.vhat - config.v_lr * (hvp_zz - grad_z)

    direction = hvp_wz.scale_(-1.0)
    direction.head_weight += grad_hw
    direction.head_bias += grad_hb

    residual = float(np.max(np.abs(ws.r)))
    return BlockState(zhat_new, vhat_new), BlockDiagnostics(
        loss=loss,
        residual=residual,
        gap=gap_value(params, graph, state.zhat, ws=ws),
        direction=direction,
    )
