"""Experiment harness: trainers, evaluation, scaling benchmark, and
cross-route gradient verification.

Three trainers share one loop contract and one log format:

* "sgd": solve the fixed point, compute the exact equilibrium gradient
  (adjoint route by default, forward-sensitivity route on request), take a
  plain gradient step, project the weights back into the contraction set.
* "bilevel": never solves anything to tolerance; advances the coupled
  running estimates from the single-loop optimizer one step at a time.
* "noloop": feedforward baseline, one sequential pass and ordinary
  backprop, no equilibrium. Weights are still projected so capacity is
  comparable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bilevel import (
    BilevelConfig,
    gap_grad_params,
    gap_grad_z,
    gap_hvps,
    gap_value,
    init_block_state,
    update_block,
)
from .errors import MetricError
from .gradients import (
    ParamGrads,
    cross_entropy_loss_grad,
    ift_gradient,
    ift_gradient_forward,
    mse_loss_grad,
    noloop_gradient,
    loss_and_head_grads,
)
from .graphs import (
    DynamicGraph,
    Dataset,
    SnapshotGraph,
    random_graph,
)
from .metrics import (
    accuracy,
    dirichlet_energy,
    mape,
    mean_average_distance,
    roc_auc_macro,
)
from .model import (
    FixedPointConfig,
    composed_map,
    compute_weight_radii,
    coupled_sweep,
    enforce_wellposedness,
    fixed_point_solve,
    init_params,
    predict,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "train",
    "evaluate",
    "BenchRow",
    "bench",
    "fit_loglog_slope",
    "oracle_check",
]

TRAINERS = ("sgd", "bilevel", "noloop")


@dataclass
class TrainConfig:
    trainer: str = "bilevel"
    steps: int = 200
    lr: float = 0.05
    damping: float = 0.9
    v_lr: float = 0.01
    grad_avg: float = 0.9
    contraction_target: float = 0.95
    hidden_dim: int = 16
    activation: str = "tanh"
    tied_weights: bool = False
    shared_input_map: bool = True
    seed: int = 0
    tol: float = 1e-6
    max_sweeps: int = 500
    gradient_route: str = "adjoint"  # or "forward"
    allow_large_sensitivity: bool = False
    target_train_accuracy: float = None
    log_every: int = 1
    batch_size: int = None  # graphs per step; None = all training graphs
    random_block_init: bool = False


@dataclass
class TrainResult:
    params: object
    log: list
    steps_run: int
    stopped_early: bool
    final_embeddings: dict = field(default_factory=dict)  # graph index -> list of Z_t
    block_states: dict = field(default_factory=dict)  # graph index -> BlockState (bilevel only)


def _select_training(dataset, split):
    """Graph indices to train on plus the node mask applied to the loss."""
    if split is None:
        return list(range(dataset.num_graphs)), None
    if split.mode == "transductive":
        mask = np.zeros(dataset.graphs[0].num_nodes, dtype=bool)
        mask[split.train] = True
        return list(range(dataset.num_graphs)), mask
    return [int(g) for g in split.train], None


def _train_accuracy(params, graphs, finals, mask):
    accs = []
    for g, Z_final in zip(graphs, finals):
        if Z_final is None:
            return None
        m = g.label_mask if mask is None else (g.label_mask & mask)
        if not m.any():
            continue
        accs.append(accuracy(predict(params, Z_final), g.labels, m))
    return float(np.mean(accs)) if accs else None


def train(dataset, config=None, split=None, post_step_hook=None, init=None):
    """Run the configured trainer over the dataset's training portion.

    Returns a TrainResult whose log rows carry step, loss, residual, and
    wall_ms. The residual column is the largest entrywise change one full
    sweep would make at the logged state, so for the feedforward trainer it
    reports how far from an equilibrium that model runs.
    """
    cfg = config or TrainConfig()
    if cfg.trainer not in TRAINERS:
        raise ValueError(f"unknown trainer {cfg.trainer!r}; choose from {TRAINERS}")
    graph_ids, mask = _select_training(dataset, split)
    graphs = [dataset.graphs[g] for g in graph_ids]
    g0 = graphs[0]

    if init is None:
        params = init_params(
            g0.num_snapshots,
            g0.feat_dim,
            dataset.target_dim,
            hidden_dim=cfg.hidden_dim,
            activation=cfg.activation,
            tied_weights=cfg.tied_weights,
            shared_input_map=cfg.shared_input_map,
            seed=cfg.seed,
        )
    else:
        params = init.copy()
    radii = compute_weight_radii(graphs, cfg.contraction_target)
    params = enforce_wellposedness(params, radii=radii)

    solver_cfg = FixedPointConfig(tol=cfg.tol, max_sweeps=cfg.max_sweeps)
    bcfg = BilevelConfig(
        lr=cfg.lr, damping=cfg.damping, v_lr=cfg.v_lr, grad_avg=cfg.grad_avg
    )
    block_rng = np.random.default_rng(cfg.seed + 17) if cfg.random_block_init else None
    states = {gi: init_block_state(params, g, rng=block_rng) for gi, g in zip(graph_ids, graphs)}
    momentum = ParamGrads.zeros_like(params)
    warm = {gi: None for gi in graph_ids}
    finals = {gi: None for gi in graph_ids}
    graph_by_id = dict(zip(graph_ids, graphs))

    # Batches are drawn without replacement: a shuffled pass over all
    # training graphs, reshuffled once exhausted. A full-size batch (the
    # default, and any single-graph dataset) skips the shuffling so runs
    # stay deterministic across batch-size settings.
    bsize = len(graph_ids) if not cfg.batch_size else min(cfg.batch_size, len(graph_ids))
    batch_rng = np.random.default_rng(cfg.seed + 101)
    queue = []

    def next_batch():
        if bsize == len(graph_ids):
            return graph_ids
        nonlocal queue
        while len(queue) < bsize:
            queue.extend(batch_rng.permutation(len(graph_ids)).tolist())
        take, rest = queue[:bsize], queue[bsize:]
        queue = rest
        return [graph_ids[i] for i in take]

    log = []
    stopped = False
    steps_run = 0
    for step in range(1, cfg.steps + 1):
        tic = time.perf_counter()
        batch_ids = next_batch()
        mean_dir = ParamGrads.zeros_like(params)
        loss_sum = 0.0
        residual = 0.0

        if cfg.trainer == "bilevel":
            for gi in batch_ids:
                g = graph_by_id[gi]
                new_state, diag = update_block(params, g, states[gi], bcfg, mask=mask)
                states[gi] = new_state
                mean_dir.add_(diag.direction)
                loss_sum += diag.loss
                residual = max(residual, diag.residual)
                finals[gi] = new_state.zhat
            mean_dir.scale_(1.0 / len(batch_ids))
            momentum.scale_(1.0 - cfg.grad_avg)
            momentum.add_(mean_dir, cfg.grad_avg)
            for i in range(len(params.weights)):
                params.weights[i] = params.weights[i] - cfg.lr * momentum.weights[i]
            for i in range(len(params.input_maps)):
                params.input_maps[i] = params.input_maps[i] - cfg.lr * momentum.input_maps[i]
            params.head_weight = params.head_weight - cfg.lr * mean_dir.head_weight
            params.head_bias = params.head_bias - cfg.lr * mean_dir.head_bias
            params = enforce_wellposedness(params, radii=radii)

        elif cfg.trainer == "sgd":
            for gi in batch_ids:
                g = graph_by_id[gi]
                if cfg.gradient_route == "forward":
                    loss, grads, res = ift_gradient_forward(
                        params,
                        g,
                        solver_cfg,
                        sensitivity_config=solver_cfg,
                        allow_large=cfg.allow_large_sensitivity,
                        mask=mask,
                    )
                else:
                    loss, grads, res = ift_gradient(
                        params, g, solver_cfg, Z_init=warm[gi], mask=mask
                    )
                warm[gi] = res.embeddings
                finals[gi] = res.embeddings[-1]
                mean_dir.add_(grads)
                loss_sum += loss
                residual = max(residual, res.residual)
            mean_dir.scale_(1.0 / len(batch_ids))
            for i in range(len(params.weights)):
                params.weights[i] = params.weights[i] - cfg.lr * mean_dir.weights[i]
            for i in range(len(params.input_maps)):
                params.input_maps[i] = params.input_maps[i] - cfg.lr * mean_dir.input_maps[i]
            params.head_weight = params.head_weight - cfg.lr * mean_dir.head_weight
            params.head_bias = params.head_bias - cfg.lr * mean_dir.head_bias
            params = enforce_wellposedness(params, radii=radii)

        else:  # noloop
            Z_last = {}
            for gi in batch_ids:
                g = graph_by_id[gi]
                loss, grads, Z = noloop_gradient(params, g, mask=mask)
                mean_dir.add_(grads)
                loss_sum += loss
                Z_last[gi] = Z
                finals[gi] = Z[-1]
            mean_dir.scale_(1.0 / len(batch_ids))
            for i in range(len(params.weights)):
                params.weights[i] = params.weights[i] - cfg.lr * mean_dir.weights[i]
            for i in range(len(params.input_maps)):
                params.input_maps[i] = params.input_maps[i] - cfg.lr * mean_dir.input_maps[i]
            params.head_weight = params.head_weight - cfg.lr * mean_dir.head_weight
            params.head_bias = params.head_bias - cfg.lr * mean_dir.head_bias
            params = enforce_wellposedness(params, radii=radii)
            for gi in batch_ids:
                S = coupled_sweep(params, graph_by_id[gi], Z_last[gi])
                residual = max(
                    residual,
                    max(float(np.max(np.abs(S[t] - Z_last[gi][t]))) for t in range(len(S))),
                )

        wall_ms = (time.perf_counter() - tic) * 1000.0
        steps_run = step
        row = {
            "step": step,
            "loss": loss_sum / len(batch_ids),
            "residual": residual,
            "wall_ms": wall_ms,
        }
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.append(row)
        if post_step_hook is not None:
            post_step_hook(step, params, row)
        if (
            cfg.target_train_accuracy is not None
            and dataset.task == "classification"
        ):
            acc = _train_accuracy(params, graphs, [finals[gi] for gi in graph_ids], mask)
            if acc is not None and acc >= cfg.target_train_accuracy:
                stopped = True
                if not log or log[-1] is not row:
                    log.append(row)
                break

    return TrainResult(
        params=params,
        log=log,
        steps_run=steps_run,
        stopped_early=stopped,
        final_embeddings=finals,
        block_states=states if cfg.trainer == "bilevel" else {},
    )


def _eval_mask(graph, split, which):
    if split is None or split.mode == "inductive":
        return graph.label_mask
    mask = np.zeros(graph.num_nodes, dtype=bool)
    if which == "all":
        mask[:] = True
    else:
        mask[getattr(split, which)] = True
    return mask & graph.label_mask


def _eval_graph_ids(dataset, split, which):
    if split is None or split.mode == "transductive":
        return list(range(dataset.num_graphs))
    if which == "all":
        return list(range(dataset.num_graphs))
    return [int(g) for g in getattr(split, which)]


def evaluate(
    dataset,
    params,
    split=None,
    which="test",
    equilibrium=True,
    solver_config=None,
    with_embeddings=False,
):
    """Metrics over the requested portion, pooled across its graphs.

    equilibrium=False evaluates the feedforward variant (one sequential
    pass) instead of solving the fixed point. Classification reports
    accuracy, macro one-vs-rest AUC, and cross entropy; regression reports
    mean squared error and the percentage error with its exclusion count.
    Both report the oversmoothing diagnostics of the final snapshot.

    with_embeddings=True also returns the final-snapshot embedding matrix
    of each evaluated graph, in evaluation order.
    """
    cfg = solver_config or FixedPointConfig()
    gids = _eval_graph_ids(dataset, split, which)
    all_scores, all_labels = [], []
    de_vals, mad_vals, sweeps, residuals = [], [], [], []
    targets = []
    embeddings = []
    for gi in gids:
        g = dataset.graphs[gi]
        if equilibrium:
            res = fixed_point_solve(params, g, cfg)
            Z = res.embeddings
            sweeps.append(res.sweeps)
            residuals.append(res.residual)
        else:
            Z = composed_map(params, g)
        if with_embeddings:
            embeddings.append(Z[-1].copy())
        mask = _eval_mask(g, split, which)
        scores = predict(params, Z[-1])
        cols = np.nonzero(mask)[0]
        all_scores.append(scores[:, cols])
        if dataset.task == "classification":
            all_labels.append(g.labels[cols])
        else:
            targets.append(g.labels[:, cols])
        A_last = g.snapshots[-1].adjacency
        de_vals.append(dirichlet_energy(Z[-1], A_last))
        try:
            mad_vals.append(mean_average_distance(Z[-1], A_last))
        except MetricError:
            pass

    scores = np.concatenate(all_scores, axis=1)
    out = {
        "num_nodes_evaluated": int(scores.shape[1]),
        "dirichlet_energy": float(np.mean(de_vals)),
        "mean_average_distance": float(np.mean(mad_vals)) if mad_vals else None,
    }
    if equilibrium:
        out["solver_sweeps"] = float(np.mean(sweeps))
        out["solver_residual"] = float(np.max(residuals))
    if dataset.task == "classification":
        labels = np.concatenate(all_labels)
        out["accuracy"] = accuracy(scores, labels)
        try:
            out["auc_macro"] = roc_auc_macro(scores, labels)
        except MetricError:
            out["auc_macro"] = None
        out["cross_entropy"] = cross_entropy_loss_grad(scores, labels, np.ones(len(labels), bool))[0]
    else:
        y = np.concatenate(targets, axis=1)
        out["mse"] = mse_loss_grad(scores, y, np.ones(y.shape[1], bool))[0]
        try:
            value, excluded = mape(y, scores)
            out["mape"] = value
            out["mape_excluded"] = excluded
        except MetricError:
            out["mape"] = None
            out["mape_excluded"] = int(y.size)
    if with_embeddings:
        return out, embeddings
    return out


# ---------------------------------------------------------------------------
# Scaling benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    trainer: str
    num_nodes: int
    step_ms: float
    backend: str


def _bench_dataset(n, T, feat_dim, avg_degree, seed):
    rng = np.random.default_rng(seed)
    snapshots = []
    for _ in range(T):
        density = min(1.0, avg_degree / max(n - 1, 1))
        adj = random_graph(n, density, rng)
        feats = rng.standard_normal((feat_dim, n))
        snapshots.append(SnapshotGraph(adj, feats))
    labels = rng.integers(0, 4, size=n)
    g = DynamicGraph(snapshots, labels, np.ones(n, bool), task="classification", target_dim=4)
    return Dataset([g], "classification", 4)


def fit_loglog_slope(sizes, times):
    """Least-squares slope of log2(time) against log2(size).

    Undefined (NaN) with fewer than two distinct sizes.
    """
    x = np.log2(np.asarray(sizes, dtype=np.float64))
    y = np.log2(np.asarray(times, dtype=np.float64))
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        return float("nan")
    return float((x @ (y - y.mean())) / denom)


def bench(
    sizes=(50, 100, 200),
    trainers=("sgd", "bilevel"),
    oracle=False,
    hidden_dim=16,
    num_snapshots=5,
    feat_dim=8,
    avg_degree=8.0,
    timed_steps=5,
    warmup_steps=1,
    seed=0,
    contraction_target=0.5,
    tol=1e-4,
):
    """Per-step wall time of each trainer across problem sizes.

    The gradient-descent trainer can be timed on its forward-sensitivity
    route (oracle=True); that route tracks a dense per-parameter state, so
    its cost grows superlinearly in n, while the single-loop trainer's
    per-step cost stays near linear at fixed average degree. Timing runs
    under a single BLAS thread so the fitted exponents reflect operation
    counts, not thread-pool scheduling; each reported time is the fastest
    of the timed steps, which screens out scheduler interference the same
    way timeit's repeat/min idiom does. Returns (rows, slopes) where slopes
    maps trainer name to the fitted log-log exponent.
    """
    from threadpoolctl import threadpool_limits

    from .kernels import BACKEND

    rows = []
    times = {tr: [] for tr in trainers}
    with threadpool_limits(limits=1):
        for n in sizes:
            dataset = _bench_dataset(n, num_snapshots, feat_dim, avg_degree, seed + n)
            for tr in trainers:
                cfg = TrainConfig(
                    trainer=tr,
                    steps=warmup_steps + timed_steps,
                    hidden_dim=hidden_dim,
                    tied_weights=True,
                    shared_input_map=True,
                    activation="tanh",
                    contraction_target=contraction_target,
                    tol=tol,
                    seed=seed,
                    gradient_route="forward" if (tr == "sgd" and oracle) else "adjoint",
                    allow_large_sensitivity=oracle,
                    log_every=1,
                )
                result = train(dataset, cfg)
                per_step = [row["wall_ms"] for row in result.log[warmup_steps:]]
                step_ms = float(np.min(per_step))
                rows.append(BenchRow(tr, n, step_ms, BACKEND))
                times[tr].append(step_ms)
    slopes = {tr: fit_loglog_slope(sizes, times[tr]) for tr in trainers}
    return rows, slopes


# ---------------------------------------------------------------------------
# Cross-route gradient verification
# ---------------------------------------------------------------------------


def _small_instance(seed=0, n=5, d=3, T=3, feat_dim=4, activation="tanh"):
    rng = np.random.default_rng(seed)
    snapshots = []
    for _ in range(T):
        adj = random_graph(n, 0.6, rng)
        snapshots.append(SnapshotGraph(adj, rng.standard_normal((feat_dim, n))))
    labels = rng.integers(0, 3, size=n)
    g = DynamicGraph(snapshots, labels, np.ones(n, bool), task="classification", target_dim=3)
    dataset = Dataset([g], "classification", 3)
    params = init_params(T, feat_dim, 3, hidden_dim=d, activation=activation, seed=seed + 1)
    params = enforce_wellposedness(params, [g], contraction_target=0.5)
    return dataset, g, params


def _flatten(grads):
    return np.concatenate(
        [w.ravel() for w in grads.weights]
        + [v.ravel() for v in grads.input_maps]
        + [grads.head_weight.ravel(), grads.head_bias.ravel()]
    )


def _perturbed_loss(params, graph, which, index, flat_pos, eps, solver_cfg):
    p = params.copy()
    target = getattr(p, which)[index] if which in ("weights", "input_maps") else getattr(p, which)
    flat = target.ravel()
    flat[flat_pos] += eps
    res = fixed_point_solve(p, graph, solver_cfg)
    loss, _, _, _ = loss_and_head_grads(p, res.embeddings[-1], graph)
    return loss


def oracle_check(seed=0):
    """Agreement checks between independent derivative routes.

    Returns (all_ok, rows) where each row is a dict with the check name,
    the measured discrepancy, and its tolerance.
    """
    rows = []
    solver_cfg = FixedPointConfig(tol=1e-11, max_sweeps=5000)
    dataset, graph, params = _small_instance(seed)

    loss_a, grads_a, res = ift_gradient(params, graph, solver_cfg)
    loss_f, grads_f, _ = ift_gradient_forward(params, graph, solver_cfg)
    diff = float(np.max(np.abs(_flatten(grads_a) - _flatten(grads_f))))
    rows.append({"name": "adjoint_vs_forward_sensitivity", "diff": diff, "tol": 1e-6})

    rng = np.random.default_rng(seed + 7)
    fd_diffs = []
    eps = 1e-5
    for which, index, arr in (
        ("weights", 0, grads_a.weights[0]),
        ("weights", len(params.weights) - 1, grads_a.weights[-1]),
        ("input_maps", 0, grads_a.input_maps[0]),
    ):
        pos = int(rng.integers(arr.size))
        up = _perturbed_loss(params, graph, which, index, pos, eps, solver_cfg)
        dn = _perturbed_loss(params, graph, which, index, pos, -eps, solver_cfg)
        fd = (up - dn) / (2 * eps)
        fd_diffs.append(abs(fd - arr.ravel()[pos]))
    rows.append({"name": "adjoint_vs_finite_difference", "diff": float(max(fd_diffs)), "tol": 1e-5})

    z = rng.standard_normal(res.embeddings[-1].shape) * 0.3
    grad = gap_grad_z(params, graph, z)
    pos = int(rng.integers(z.size))
    zp = z.copy()
    zp.ravel()[pos] += eps
    zm = z.copy()
    zm.ravel()[pos] -= eps
    fd = (gap_value(params, graph, zp) - gap_value(params, graph, zm)) / (2 * eps)
    rows.append(
        {
            "name": "gap_gradient_vs_finite_difference",
            "diff": float(abs(fd - grad.ravel()[pos])),
            "tol": 1e-5,
        }
    )

    tangent = rng.standard_normal(z.shape)
    hzz, hwz = gap_hvps(params, graph, z, tangent)
    gp = gap_grad_z(params, graph, z + eps * tangent)
    gm = gap_grad_z(params, graph, z - eps * tangent)
    fd_hzz = float(np.max(np.abs((gp - gm) / (2 * eps) - hzz)))
    rows.append({"name": "gap_hvp_zz_vs_finite_difference", "diff": fd_hzz, "tol": 1e-4})

    cp = gap_grad_params(params, graph, z + eps * tangent)
    cm = gap_grad_params(params, graph, z - eps * tangent)
    fd_flat = (_flatten(cp) - _flatten(cm)) / (2 * eps)
    rows.append(
        {
            "name": "gap_hvp_wz_vs_finite_difference",
            "diff": float(np.max(np.abs(fd_flat - _flatten(hwz)))),
            "tol": 1e-4,
        }
    )

    # Single-loop hypergradient at the exact fixed point must match the
    # adjoint gradient once the curvature direction has been solved out.
    zstar = res.embeddings[-1]
    _, grad_z_last, _, _ = loss_and_head_grads(params, zstar, graph)
    v = np.zeros_like(zstar)
    for _ in range(20000):
        hzz, _ = gap_hvps(params, graph, zstar, v)
        newv = v - 0.1 * (hzz - grad_z_last)
        delta = float(np.max(np.abs(newv - v)))
        v = newv
        if delta < 1e-13:
            break
    _, hwz = gap_hvps(params, graph, zstar, v)
    hyper = _flatten(hwz) * -1.0
    adj_flat = _flatten(grads_a)
    # Compare only the weight and input-map entries (the readout gradient
    # does not flow through the curvature system).
    k = sum(w.size for w in params.weights) + sum(v2.size for v2 in params.input_maps)
    rows.append(
        {
            "name": "single_loop_hypergradient_vs_adjoint",
            "diff": float(np.max(np.abs(hyper[:k] - adj_flat[:k]))),
            "tol": 1e-6,
        }
    )

    for row in rows:
        row["ok"] = bool(row["diff"] <= row["tol"])
    return all(r["ok"] for r in rows), rows
