"""Dynamic-graph data model, synthetic generators, splits, normalization,
and the directory-of-CSV dataset format.

A dynamic graph is an ordered sequence of T snapshots over one shared node
set. Labels live on the final snapshot. Snapshot indices are 1-based in
every public signature (matching the cyclic ordering convention); internal
lists are 0-based.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DatasetShapeError,
    MissingFileError,
    NonFiniteError,
    ShapeError,
)
from .linalg import CsrMatrix

__all__ = [
    "SnapshotGraph",
    "DynamicGraph",
    "Dataset",
    "DatasetSplit",
    "prev_snapshot",
    "clique_adjacency",
    "random_graph",
    "gen_toy_longrange",
    "gen_toy_binary",
    "sym_normalize",
    "normalize_01",
    "split_dataset",
    "save_dataset",
    "load_dataset",
]

CLASSIFICATION = "classification"
REGRESSION = "regression"


def prev_snapshot(t, T):
    """Index of the snapshot feeding snapshot t in the cyclic coupling.

    Returns t - 1 for t in [2, T] and T for t = 1 (1-based indices), i.e.
    T - ((T - t + 1) mod T).
    """
    if not 1 <= t <= T:
        raise ValueError(f"snapshot index {t} out of range [1, {T}]")
    return T - ((T - t + 1) % T)


@dataclass
class SnapshotGraph:
    """One static snapshot: sparse adjacency (n x n) and features (l x n)."""

    adjacency: CsrMatrix
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.adjacency.n_rows != self.adjacency.n_cols:
            raise ShapeError("adjacency must be square")
        if self.features.ndim != 2:
            raise ShapeError("features must be 2-D (feat_dim x num_nodes)")
        if self.features.shape[1] != self.adjacency.n_rows:
            raise ShapeError(
                f"feature columns ({self.features.shape[1]}) != node count "
                f"({self.adjacency.n_rows})"
            )
        if not np.all(np.isfinite(self.features)):
            raise ShapeError("features contain NaN or Inf")

    @property
    def num_nodes(self):
        return self.adjacency.n_rows


@dataclass
class DynamicGraph:
    """T snapshots over a shared node set with labels on the last snapshot.

    labels: int array (n,) for classification, float array (target_dim, n)
    for regression. label_mask marks the labeled nodes.
    """

    snapshots: list
    labels: np.ndarray
    label_mask: np.ndarray
    task: str = CLASSIFICATION
    target_dim: int = 0

    def __post_init__(self):
        if len(self.snapshots) < 1:
            raise ShapeError("a dynamic graph needs at least one snapshot")
        n = self.snapshots[0].num_nodes
        l = self.snapshots[0].features.shape[0]
        for k, snap in enumerate(self.snapshots):
            if snap.num_nodes != n or snap.features.shape[0] != l:
                raise ShapeError(f"snapshot {k + 1} disagrees on (n, l)")
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        if self.label_mask.shape != (n,):
            raise ShapeError("label mask length != node count")
        if self.task == CLASSIFICATION:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ShapeError("classification labels must have one entry per node")
            if self.target_dim <= 0:
                self.target_dim = int(self.labels[self.label_mask].max()) + 1 if self.label_mask.any() else 0
        elif self.task == REGRESSION:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.ndim != 2 or self.labels.shape[1] != n:
                raise ShapeError("regression labels must have shape (target_dim, n)")
            if not np.all(np.isfinite(self.labels[:, self.label_mask])):
                raise ShapeError("labeled targets contain NaN or Inf")
            self.target_dim = self.labels.shape[0]
        else:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def num_nodes(self):
        return self.snapshots[0].num_nodes

    @property
    def num_snapshots(self):
        return len(self.snapshots)

    @property
    def feat_dim(self):
        return self.snapshots[0].features.shape[0]


@dataclass
class Dataset:
    """A list of dynamic graphs sharing (n, T, l) and task metadata."""

    graphs: list
    task: str
    target_dim: int

    def __post_init__(self):
        if not self.graphs:
            raise ShapeError("dataset must contain at least one graph")
        g0 = self.graphs[0]
        for g in self.graphs:
            if (g.num_nodes, g.num_snapshots, g.feat_dim) != (
                g0.num_nodes,
                g0.num_snapshots,
                g0.feat_dim,
            ):
                raise ShapeError("all graphs in a dataset must share (n, T, l)")
            if g.task != self.task:
                raise ShapeError("graph task disagrees with dataset task")

    @property
    def num_graphs(self):
        return len(self.graphs)


@dataclass
class DatasetSplit:
    """Train/validation/test index sets.

    mode 'transductive': indices are node ids shared by every graph.
    mode 'inductive': indices are graph (time-window) ids.
    """

    mode: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def clique_adjacency(n, weight=1.0):
    """Adjacency of the n-clique: ones off the diagonal, zero diagonal."""
    rows, cols = [], []
    for i in range(n):
        for j in range(n):
            if i != j:
                rows.append(i)
                cols.append(j)
    vals = np.full(len(rows), float(weight))
    return CsrMatrix.from_coo(n, n, rows, cols, vals)


def random_graph(n, density, rng, weight_range=(0.5, 1.0)):
    """Random symmetric weighted graph without self loops.

    Each unordered pair is kept with probability `density`; kept edges get a
    uniform weight from weight_range and are stored in both directions.
    """
    rows, cols, vals = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < density:
                w = rng.uniform(*weight_range)
                rows += [i, j]
                cols += [j, i]
                vals += [w, w]
    if not rows:  # guarantee at least one edge so the graph is nonempty
        i, j = 0, n - 1 if n > 1 else 0
        if i != j:
            rows, cols, vals = [i, j], [j, i], [1.0, 1.0]
    return CsrMatrix.from_coo(n, n, rows, cols, np.asarray(vals))


def gen_toy_longrange(num_snapshots, num_classes=10, label_snapshot=1, seed=0):
    """Ten-node clique sequence whose class signal sits at one snapshot.

    Node i carries class i (mod num_classes). Attributes are standard normal
    everywhere except at `label_snapshot`, where they are the one-hot class
    encoding; with the default ten classes that snapshot's feature matrix is
    the 10 x 10 identity. Every node is a training node.
    """
    n = 10
    feat_dim = 10
    if not 1 <= num_classes <= feat_dim:
        raise ValueError("num_classes must be in [1, 10]")
    if not 1 <= label_snapshot <= num_snapshots:
        raise ValueError("label_snapshot must be in [1, num_snapshots]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    adj = clique_adjacency(n)
    snapshots = []
    for t in range(1, num_snapshots + 1):
        if t == label_snapshot:
            feats = np.zeros((feat_dim, n))
            feats[labels, np.arange(n)] = 1.0
        else:
            feats = rng.standard_normal((feat_dim, n))
        snapshots.append(SnapshotGraph(adj, feats))
    return DynamicGraph(
        snapshots,
        labels,
        np.ones(n, dtype=bool),
        task=CLASSIFICATION,
        target_dim=num_classes,
    )


def gen_toy_binary(num_snapshots, seed=0):
    """Ten-node clique sequence with a binary label hidden at snapshot 1.

    The first two attribute dimensions of snapshot 1 are the one-hot label
    (five nodes per class); every other attribute entry is standard normal.
    """
    if not 1 <= num_snapshots <= 64:
        raise ValueError("num_snapshots must be in [1, 64]")
    n = 10
    feat_dim = 10
    rng = np.random.default_rng(seed)
    labels = np.array([0] * 5 + [1] * 5, dtype=np.int64)
    adj = clique_adjacency(n)
    snapshots = []
    for t in range(1, num_snapshots + 1):
        feats = rng.standard_normal((feat_dim, n))
        if t == 1:
            feats[0, :] = (labels == 0).astype(float)
            feats[1, :] = (labels == 1).astype(float)
        snapshots.append(SnapshotGraph(adj, feats))
    return DynamicGraph(
        snapshots,
        labels,
        np.ones(n, dtype=bool),
        task=CLASSIFICATION,
        target_dim=2,
    )


def _merge_duplicate_coo(rows, cols, vals):
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if len(rows) == 0:
        return rows, cols, vals
    new_group = np.ones(len(rows), dtype=bool)
    new_group[1:] = (np.diff(rows) != 0) | (np.diff(cols) != 0)
    starts = np.nonzero(new_group)[0]
    sums = np.add.reduceat(vals, starts)
    return rows[starts], cols[starts], sums


def sym_normalize(A, add_self_loops=True):
    """Symmetric degree normalization D^{-1/2} (A + I?) D^{-1/2}.

    Isolated nodes produce zero rows. Negative edge weights are rejected
    because the square-root degree scaling is undefined for them.
    """
    if A.n_rows != A.n_cols:
        raise ShapeError("sym_normalize requires a square matrix")
    if np.any(A.data < 0):
        raise ValueError("negative edge weights cannot be degree-normalized")
    n = A.n_rows
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(A.indptr))
    cols = A.indices.copy()
    vals = A.data.copy()
    if add_self_loops:
        rows = np.concatenate([rows, np.arange(n, dtype=np.int64)])
        cols = np.concatenate([cols, np.arange(n, dtype=np.int64)])
        vals = np.concatenate([vals, np.ones(n)])
        rows, cols, vals = _merge_duplicate_coo(rows, cols, vals)
    deg = np.zeros(n)
    np.add.at(deg, rows, vals)
    with np.errstate(divide="ignore"):
        dis = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    vals = vals * dis[rows] * dis[cols]
    return CsrMatrix.from_coo(n, n, rows, cols, vals)


def split_dataset(dataset, mode, ratios=(0.7, 0.1, 0.2), seed=0):
    """Deterministic train/val/test split.

    Transductive mode shuffles and partitions the labeled node ids of the
    first graph (node sets are shared). Inductive mode partitions the graph
    sequence into time-contiguous windows without shuffling.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    if mode == "transductive":
        items = np.nonzero(dataset.graphs[0].label_mask)[0]
        items = rng.permutation(items)
    elif mode == "inductive":
        items = np.arange(dataset.num_graphs)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    m = len(items)
    n_train = int(np.floor(ratios[0] * m))
    n_val = int(np.floor(ratios[1] * m))
    return DatasetSplit(
        mode=mode,
        train=np.sort(items[:n_train]) if mode == "transductive" else items[:n_train],
        val=np.sort(items[n_train : n_train + n_val]) if mode == "transductive" else items[n_train : n_train + n_val],
        test=np.sort(items[n_train + n_val :]) if mode == "transductive" else items[n_train + n_val :],
    )


def normalize_01(dataset, train_nodes=None, train_graphs=None):
    """Min-max normalize features and edge weights to [0, 1].

    Statistics come from the training portion only: the given node columns
    (transductive) or the given graph indices (inductive); with neither
    argument, the whole dataset. Constant feature dimensions map to zero.
    Constant edge-weight channels are left unchanged, since collapsing them
    to zero would delete the graph structure.
    """
    graph_ids = range(dataset.num_graphs) if train_graphs is None else list(train_graphs)
    cols = slice(None) if train_nodes is None else np.asarray(train_nodes, dtype=np.int64)

    feat_blocks = [
        dataset.graphs[g].snapshots[k].features[:, cols]
        for g in graph_ids
        for k in range(dataset.graphs[g].num_snapshots)
    ]
    stacked = np.concatenate(feat_blocks, axis=1)
    fmin = stacked.min(axis=1)
    fmax = stacked.max(axis=1)
    fspan = fmax - fmin

    edge_vals = [
        dataset.graphs[g].snapshots[k].adjacency.data
        for g in graph_ids
        for k in range(dataset.graphs[g].num_snapshots)
    ]
    all_edges = np.concatenate([v for v in edge_vals if len(v)]) if any(len(v) for v in edge_vals) else np.zeros(0)
    emin = all_edges.min() if all_edges.size else 0.0
    espan = (all_edges.max() - emin) if all_edges.size else 0.0

    new_graphs = []
    for g in dataset.graphs:
        new_snaps = []
        for snap in g.snapshots:
            feats = snap.features.copy()
            for d in range(feats.shape[0]):
                if fspan[d] > 0:
                    feats[d] = (feats[d] - fmin[d]) / fspan[d]
                else:
                    feats[d] = 0.0
            adj = snap.adjacency
            if espan > 0:
                adj = CsrMatrix(
                    adj.n_rows,
                    adj.n_cols,
                    adj.indptr.copy(),
                    adj.indices.copy(),
                    (adj.data - emin) / espan,
                )
            new_snaps.append(SnapshotGraph(adj, feats))
        new_graphs.append(replace(g, snapshots=new_snaps))
    return Dataset(new_graphs, dataset.task, dataset.target_dim)


# ---------------------------------------------------------------------------
# On-disk format: manifest.json + per-graph directories of CSV files.
# ---------------------------------------------------------------------------


def save_dataset(dataset, path):
    """Write the directory-of-CSV layout.

    manifest.json: {n, T, l, task, num_classes_or_target_dim, N}
    g<g>/edges_<t>.csv: header src,dst,weight (0-based node ids, t in 1..T)
    g<g>/features_<t>.csv: n rows x l columns
    g<g>/labels.csv: one row per node; classification rows hold a single
    integer (-1 marks an unlabeled node), regression rows hold target_dim
    floats.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g0 = dataset.graphs[0]
    manifest = {
        "n": g0.num_nodes,
        "T": g0.num_snapshots,
        "l": g0.feat_dim,
        "task": dataset.task,
        "num_classes_or_target_dim": dataset.target_dim,
        "N": dataset.num_graphs,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    for gi, graph in enumerate(dataset.graphs):
        gdir = path / f"g{gi}"
        gdir.mkdir(exist_ok=True)
        for t, snap in enumerate(graph.snapshots, start=1):
            with open(gdir / f"edges_{t}.csv", "w", newline="\n", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["src", "dst", "weight"])
                A = snap.adjacency
                for i in range(A.n_rows):
                    for p in range(A.indptr[i], A.indptr[i + 1]):
                        writer.writerow([i, int(A.indices[p]), repr(float(A.data[p]))])
            with open(gdir / f"features_{t}.csv", "w", newline="\n", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                for node in range(graph.num_nodes):
                    writer.writerow([repr(float(v)) for v in snap.features[:, node]])
        with open(gdir / "labels.csv", "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for node in range(graph.num_nodes):
                if dataset.task == CLASSIFICATION:
                    val = int(graph.labels[node]) if graph.label_mask[node] else -1
                    writer.writerow([val])
                else:
                    writer.writerow([repr(float(v)) for v in graph.labels[:, node]])


def _read_rows(fpath):
    if not fpath.exists():
        raise MissingFileError("missing dataset file", path=fpath)
    with open(fpath, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh) if row]


def load_dataset(path):
    """Parse a dataset directory, validating shapes and finiteness.

    Every violation is reported with the offending file's path.
    """
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingFileError("missing dataset file", path=mpath)
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    try:
        n = int(manifest["n"])
        T = int(manifest["T"])
        l = int(manifest["l"])
        task = manifest["task"]
        target_dim = int(manifest["num_classes_or_target_dim"])
        N = int(manifest["N"])
    except KeyError as exc:
        raise DatasetShapeError(f"manifest missing field {exc}", path=mpath) from exc
    if task not in (CLASSIFICATION, REGRESSION):
        raise DatasetShapeError(f"unknown task {task!r}", path=mpath)

    graphs = []
    for gi in range(N):
        gdir = path / f"g{gi}"
        snapshots = []
        for t in range(1, T + 1):
            epath = gdir / f"edges_{t}.csv"
            rows = _read_rows(epath)
            if not rows or [c.strip() for c in rows[0]] != ["src", "dst", "weight"]:
                raise DatasetShapeError("edge file must start with header src,dst,weight", path=epath)
            try:
                srcs = [int(r[0]) for r in rows[1:]]
                dsts = [int(r[1]) for r in rows[1:]]
                ws = np.array([float(r[2]) for r in rows[1:]])
            except (ValueError, IndexError) as exc:
                raise DatasetShapeError(f"malformed edge row: {exc}", path=epath) from exc
            if any(not 0 <= s < n for s in srcs) or any(not 0 <= d2 < n for d2 in dsts):
                raise DatasetShapeError("edge endpoint out of range", path=epath)
            if ws.size and not np.all(np.isfinite(ws)):
                raise NonFiniteError("edge weights contain NaN or Inf", path=epath)
            try:
                adj = CsrMatrix.from_coo(n, n, srcs, dsts, ws)
            except ShapeError as exc:
                raise DatasetShapeError(str(exc), path=epath) from exc

            fpath = gdir / f"features_{t}.csv"
            rows = _read_rows(fpath)
            if len(rows) != n or any(len(r) != l for r in rows):
                raise DatasetShapeError(f"features must be {n} rows x {l} columns", path=fpath)
            try:
                feats = np.array([[float(v) for v in r] for r in rows]).T
            except ValueError as exc:
                raise DatasetShapeError(f"malformed feature value: {exc}", path=fpath) from exc
            if not np.all(np.isfinite(feats)):
                raise NonFiniteError("features contain NaN or Inf", path=fpath)
            snapshots.append(SnapshotGraph(adj, feats))

        lpath = gdir / "labels.csv"
        rows = _read_rows(lpath)
        if len(rows) != n:
            raise DatasetShapeError(f"labels must have {n} rows", path=lpath)
        if task == CLASSIFICATION:
            try:
                raw = np.array([int(r[0]) for r in rows], dtype=np.int64)
            except (ValueError, IndexError) as exc:
                raise DatasetShapeError(f"malformed label row: {exc}", path=lpath) from exc
            mask = raw >= 0
            labels = np.where(mask, raw, 0)
        else:
            if any(len(r) != target_dim for r in rows):
                raise DatasetShapeError(f"regression labels must have {target_dim} columns", path=lpath)
            try:
                labels = np.array([[float(v) for v in r] for r in rows]).T
            except ValueError as exc:
                raise DatasetShapeError(f"malformed label value: {exc}", path=lpath) from exc
            if not np.all(np.isfinite(labels)):
                raise NonFiniteError("labels contain NaN or Inf", path=lpath)
            mask = np.ones(n, dtype=bool)
        try:
            graphs.append(DynamicGraph(snapshots, labels, mask, task=task, target_dim=target_dim))
        except ShapeError as exc:
            raise DatasetShapeError(str(exc), path=gdir) from exc
    return Dataset(graphs, task, target_dim)
