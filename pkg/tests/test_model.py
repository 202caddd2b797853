import numpy as np
import pytest

from helpers import random_instance, scalar_chain, single_graph_dataset

from dyneq.errors import ConvergenceError, ShapeError
from dyneq.graphs import DynamicGraph, SnapshotGraph, prev_snapshot, random_graph
from dyneq.linalg import infinity_norm, operator_norm, vec
from dyneq.model import (
    FixedPointConfig,
    ModelParams,
    composed_map,
    composed_trace,
    contraction_report,
    coupled_sweep,
    enforce_wellposedness,
    fixed_point_solve,
    get_activation,
    init_params,
    layer_step,
    load_params,
    predict,
    save_params,
)


def test_scalar_chain_fixed_point_is_two():
    params, graph = scalar_chain()
    res = fixed_point_solve(params, graph, FixedPointConfig(tol=1e-12))
    for Z in res.embeddings:
        assert Z.item() == pytest.approx(2.0, abs=1e-11)
    assert res.residual <= 1e-12
    assert res.converged


def test_one_sweep_solves_the_zero_recurrence_case():
    # With every recurrence matrix zero the coupling disappears and the
    # equilibrium is activation(V X) snapshot by snapshot.
    params, graph = random_instance(seed=3)
    for w in params.weights:
        w[:] = 0.0
    res = fixed_point_solve(params, graph, FixedPointConfig(tol=1e-14))
    act = get_activation(params.activation)
    for t0, Z in enumerate(res.embeddings):
        snap = graph.snapshots[t0]
        expected = act.f(params.input_map_at(t0) @ snap.features)
        np.testing.assert_allclose(Z, expected, atol=1e-14)
    assert res.sweeps <= 2


def test_sweep_reads_previous_snapshot_cyclically():
    params, graph = random_instance(seed=4, T=4)
    rng = np.random.default_rng(0)
    Z_list = [rng.standard_normal((params.hidden_dim, graph.num_nodes)) for _ in range(4)]
    out = coupled_sweep(params, graph, Z_list)
    for t in range(1, 5):
        src = prev_snapshot(t, 4) - 1
        snap = graph.snapshots[t - 1]
        expected = layer_step(
            params.weight_at(t - 1),
            Z_list[src],
            snap.adjacency,
            params.input_map_at(t - 1),
            snap.features,
            params.activation,
        )
        np.testing.assert_allclose(out[t - 1], expected, atol=1e-14)


def test_sweep_matches_materialized_block_map():
    # The coupled sweep is one application of the block-cyclic affine map
    # followed by the activation; materialize that map densely and compare.
    params, graph = random_instance(seed=5, n=4, d=3, T=4, activation="tanh")
    d, n, T = params.hidden_dim, graph.num_nodes, graph.num_snapshots
    assert d * n * T <= 48
    rng = np.random.default_rng(1)
    Z_list = [rng.standard_normal((d, n)) for _ in range(T)]

    act = get_activation(params.activation)
    big = np.zeros((T * d * n, T * d * n))
    bias = np.zeros(T * d * n)
    for t in range(1, T + 1):
        src = prev_snapshot(t, T) - 1
        t0 = t - 1
        snap = graph.snapshots[t0]
        block = np.kron(snap.adjacency.to_dense().T, params.weight_at(t0))
        big[t0 * d * n : (t0 + 1) * d * n, src * d * n : (src + 1) * d * n] = block
        bias[t0 * d * n : (t0 + 1) * d * n] = vec(params.input_map_at(t0) @ snap.features)
    stacked = np.concatenate([vec(Z) for Z in Z_list])
    expected = act.f(big @ stacked + bias)

    out = coupled_sweep(params, graph, Z_list)
    np.testing.assert_allclose(np.concatenate([vec(Z) for Z in out]), expected, atol=1e-10)


def test_solver_converges_from_two_starts_to_same_point():
    params, graph = random_instance(seed=6, contraction_target=0.9)
    cfg = FixedPointConfig(tol=1e-10)
    res0 = fixed_point_solve(params, graph, cfg)
    rng = np.random.default_rng(2)
    init = [rng.standard_normal(Z.shape) for Z in res0.embeddings]
    res1 = fixed_point_solve(params, graph, cfg, init=init)
    for Z0, Z1 in zip(res0.embeddings, res1.embeddings):
        np.testing.assert_allclose(Z0, Z1, atol=1e-8)


def test_residual_decays_geometrically_under_contraction():
    params, graph = random_instance(seed=7, contraction_target=0.5)
    res = fixed_point_solve(params, graph, FixedPointConfig(tol=1e-12))
    trace = np.array(res.history)
    assert trace[-1] <= 1e-12
    # Strict geometric decay after the transient sweeps.
    ratios = trace[3:] / trace[2:-1]
    assert np.all(ratios < 1.0)
    assert np.median(ratios) < 0.6


def test_solver_raises_after_budget_and_reports_last_iterate():
    params, graph = random_instance(seed=8)
    with pytest.raises(ConvergenceError) as exc:
        fixed_point_solve(params, graph, FixedPointConfig(tol=1e-14, max_sweeps=2))
    assert exc.value.last_estimate is not None


def test_enforce_wellposedness_caps_every_weight():
    params, graph = random_instance(seed=9, contraction_target=0.95)
    for w in params.weights:
        w *= 50.0
    projected = enforce_wellposedness(params, [graph], contraction_target=0.95)
    a_norms = [operator_norm(s.adjacency) for s in graph.snapshots]
    for t0 in range(graph.num_snapshots):
        radius = 0.95 / a_norms[t0]
        assert infinity_norm(projected.weight_at(t0)) <= radius + 1e-12
    rep = contraction_report(projected, [graph])
    assert rep.max_product <= 0.95 + 1e-9
    assert rep.well_posed


def test_tied_weights_use_most_restrictive_snapshot():
    # One snapshot with a large-norm adjacency forces the shared matrix to
    # satisfy the tightest bound.
    rng = np.random.default_rng(10)
    n = 5
    snaps = [
        SnapshotGraph(random_graph(n, 0.6, rng), rng.standard_normal((3, n))),
        SnapshotGraph(random_graph(n, 0.9, rng, weight_range=(2.0, 3.0)), rng.standard_normal((3, n))),
    ]
    graph = DynamicGraph(snaps, rng.integers(0, 2, n), np.ones(n, bool), target_dim=2)
    params = init_params(2, 3, 2, hidden_dim=4, tied_weights=True, seed=0)
    for w in params.weights:
        w += 10.0
    projected = enforce_wellposedness(params, [graph], contraction_target=0.9)
    norms = [operator_norm(s.adjacency) for s in snaps]
    assert infinity_norm(projected.weights[0]) <= 0.9 / max(norms) + 1e-12


def test_composed_map_runs_snapshots_in_sequence():
    params, graph = scalar_chain()
    Z = composed_map(params, graph)
    # Starting the chain at zero: z1 = relu(1) = 1, z2 = relu(1.5) = 1.5.
    assert Z[0].item() == pytest.approx(1.0)
    assert Z[1].item() == pytest.approx(1.5)
    outputs, cache = composed_trace(params, graph)
    assert len(cache) == graph.num_snapshots
    np.testing.assert_allclose(outputs[-1], Z[-1], atol=1e-15)


def test_predict_applies_readout_to_final_embeddings():
    params, graph = random_instance(seed=11)
    res = fixed_point_solve(params, graph)
    scores = predict(params, res.embeddings[-1])
    expected = params.head_weight @ res.embeddings[-1] + params.head_bias[:, None]
    np.testing.assert_allclose(scores, expected, atol=1e-14)


def test_save_load_roundtrip(tmp_path):
    params, _ = random_instance(seed=12, tied=True)
    save_params(params, tmp_path / "p.npz")
    back = load_params(tmp_path / "p.npz")
    assert back.activation == params.activation
    assert len(back.weights) == len(params.weights)
    for a, b in zip(params.weights, back.weights):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.head_weight, params.head_weight)


def test_params_validate_shapes():
    with pytest.raises(ShapeError):
        ModelParams(
            weights=[np.zeros((3, 2))],
            input_maps=[np.zeros((3, 4))],
            head_weight=np.zeros((2, 3)),
            head_bias=np.zeros(2),
        )
    with pytest.raises(ValueError):
        ModelParams(
            weights=[np.zeros((3, 3))],
            input_maps=[np.zeros((3, 4))],
            head_weight=np.zeros((2, 3)),
            head_bias=np.zeros(2),
            activation="nosuch",
        )


def test_params_validate_against_graph():
    params, graph = random_instance(seed=13)
    bad = init_params(graph.num_snapshots, graph.feat_dim + 1, 3, hidden_dim=4)
    with pytest.raises(ShapeError):
        bad.validate_against(graph)


def test_activation_derivatives_match_finite_differences():
    x = np.linspace(-2.0, 2.0, 41)
    for name in ("tanh", "sigmoid"):
        act = get_activation(name)
        eps = 1e-6
        fd1 = (act.f(x + eps) - act.f(x - eps)) / (2 * eps)
        np.testing.assert_allclose(act.deriv(x), fd1, atol=1e-9)
        fd2 = (act.deriv(x + eps) - act.deriv(x - eps)) / (2 * eps)
        np.testing.assert_allclose(act.second_deriv(x), fd2, atol=1e-9)
    relu = get_activation("relu")
    np.testing.assert_array_equal(relu.f(np.array([-1.0, 2.0])), [0.0, 2.0])
    np.testing.assert_array_equal(relu.deriv(np.array([-1.0, 2.0])), [0.0, 1.0])
