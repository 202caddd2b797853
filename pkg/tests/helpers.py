"""Shared fixtures: hand-solvable instances and finite-difference utilities.

The scalar chain is the workhorse: one node with a self loop, two snapshots,
relu activation, recurrence weights 0.5, input map 1, unit feature. Both
pre-activations stay positive, so the network is affine near its fixed point
and every derived quantity has a closed form:

    z1 = 0.5 z2 + 1,  z2 = 0.5 z1 + 1  =>  z1 = z2 = 2
    composed map from s: phi(s) = 0.5 (0.5 s + 1) + 1, phi(0) = 1.5
    gap(0) = (0 - 1.5)^2 = 2.25
    d gap/dz at 0: 2 (r - J r) with r = -1.5, J = 0.25, giving -2.25
    d2 gap/dz2 = 2 (1 - J)^2 = 1.125 everywhere in the affine region
    dz2/dw1 = 4/3, dz2/dw2 = 8/3, dz2/dv = 2 at the fixed point
"""

import numpy as np

from dyneq.graphs import Dataset, DynamicGraph, SnapshotGraph, random_graph
from dyneq.linalg import CsrMatrix
from dyneq.model import ModelParams, enforce_wellposedness, init_params


def scalar_chain(task="classification"):
    """One self-looped node, two snapshots, all-positive affine region."""
    adj = CsrMatrix.from_dense(np.array([[1.0]]))
    feats = np.array([[1.0]])
    snapshots = [SnapshotGraph(adj, feats), SnapshotGraph(adj, feats)]
    if task == "classification":
        labels = np.array([0])
        target_dim = 1
    else:
        labels = np.array([[1.0]])
        target_dim = 1
    graph = DynamicGraph(snapshots, labels, np.array([True]), task=task, target_dim=target_dim)
    params = ModelParams(
        weights=[np.array([[0.5]]), np.array([[0.5]])],
        input_maps=[np.array([[1.0]])],
        head_weight=np.array([[1.0]]),
        head_bias=np.zeros(1),
        activation="relu",
    )
    return params, graph


def random_instance(seed=0, n=5, d=4, T=3, feat_dim=3, num_classes=3,
                    activation="tanh", contraction_target=0.5, tied=False):
    """Small random well-posed instance for cross-route comparisons."""
    rng = np.random.default_rng(seed)
    snapshots = []
    for _ in range(T):
        adj = random_graph(n, 0.6, rng)
        snapshots.append(SnapshotGraph(adj, rng.standard_normal((feat_dim, n))))
    labels = rng.integers(0, num_classes, size=n)
    graph = DynamicGraph(snapshots, labels, np.ones(n, dtype=bool),
                         task="classification", target_dim=num_classes)
    params = init_params(T, feat_dim, num_classes, hidden_dim=d,
                         activation=activation, tied_weights=tied, seed=seed + 1)
    params = enforce_wellposedness(params, [graph], contraction_target=contraction_target)
    return params, graph


def single_graph_dataset(graph):
    return Dataset([graph], graph.task, graph.target_dim)


def central_diff(f, x, eps=1e-6):
    """Elementwise central finite difference of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)
