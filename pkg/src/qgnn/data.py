"""Datasets: file loading, splits, and a stochastic-block-model generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import (DataError, EdgeList, augment, load_edge_list, load_features, load_labels,
                    save_edge_list, save_features, save_labels)

SPLIT_NAMES = {"train": 0, "val": 1, "test": 2, "0": 0, "1": 1, "2": 2}

# desk-scale benchmark preset; noise calibrated so full-precision GCN clears 0.9 test accuracy
PRESET = dict(nodes=2000, classes=4, intra_p=0.02, inter_p=0.002, feature_dim=32, noise=3.0)


@dataclass
class Dataset:
    edges: EdgeList  # augmented: reverse edges and self-loops present
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.edges.num_nodes

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def random_split(n: int, seed: int, fractions=(0.6, 0.2)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def load_split(path, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One token per node line: train/val/test (or 0/1/2)."""
    tokens = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(tokens) != n:
        raise DataError(f"{path}: expected {n} split lines, found {len(tokens)}")
    try:
        codes = np.array([SPLIT_NAMES[t] for t in tokens])
    except KeyError as exc:
        raise DataError(f"{path}: unknown split token {exc}") from None
    return tuple(np.flatnonzero(codes == k) for k in range(3))


def make_dataset(edges: EdgeList, features: np.ndarray, labels: np.ndarray, seed: int = 0,
                 split=None) -> Dataset:
    n = edges.num_nodes
    if features.shape[0] != n or labels.shape[0] != n:
        raise DataError(f"graph has {n} nodes but features/labels have "
                        f"{features.shape[0]}/{labels.shape[0]} rows")
    split = split if split is not None else random_split(n, seed)
    return Dataset(augment(edges, True, True), features, labels, *split)


def load_dataset(graph_path, features_path, labels_path, split_path=None, seed: int = 0) -> Dataset:
    edges = load_edge_list(graph_path)
    X = load_features(features_path)
    y = load_labels(labels_path)
    split = load_split(split_path, edges.num_nodes) if split_path else None
    return make_dataset(edges, X, y, seed, split)


def sbm_graph(labels: np.ndarray, intra_p: float, inter_p: float, rng: np.random.Generator) -> EdgeList:
    """Undirected SBM, each pair listed once as (low id, high id)."""
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[ju], intra_p, inter_p)
    keep = rng.random(iu.size) < p
    return EdgeList(n, iu[keep], ju[keep])


def gen_synthetic(nodes: int = PRESET["nodes"], classes: int = PRESET["classes"],
                  intra_p: float = PRESET["intra_p"], inter_p: float = PRESET["inter_p"],
                  feature_dim: int = PRESET["feature_dim"], noise: float = PRESET["noise"],
                  seed: int = 0):
    """Balanced-class SBM graph with Gaussian features around random class centres.

    Returns ``(edges, features, labels)``; the edge list is not augmented.
    """
    if not (0 <= inter_p < intra_p <= 1):
        raise ValueError("need 0 <= inter_p < intra_p <= 1")
    if nodes < 1 or classes < 1 or feature_dim < 1 or noise < 0:
        raise ValueError("nodes, classes and feature_dim must be positive; noise non-negative")
    rng = np.random.default_rng(seed)
    labels = np.arange(nodes) % classes
    rng.shuffle(labels)
    edges = sbm_graph(labels, intra_p, inter_p, rng)
    centres = rng.standard_normal((classes, feature_dim))
    X = centres[labels] + noise * rng.standard_normal((nodes, feature_dim))
    return edges, X.astype(np.float32), labels.astype(np.int64)


def write_dataset(out_dir, edges: EdgeList, X: np.ndarray, y: np.ndarray) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"graph": out / "graph.txt", "features": out / "features.txt", "labels": out / "labels.txt"}
    save_edge_list(edges, paths["graph"])
    save_features(X, paths["features"])
    save_labels(y, paths["labels"])
    return paths


def synthetic_dataset(seed: int = 0, split_seed: int | None = None, **overrides) -> Dataset:
    """In-memory preset dataset (same content as ``gen-synthetic`` writes)."""
    params = {**PRESET, **overrides}
    edges, X, y = gen_synthetic(seed=seed, **params)
    return make_dataset(edges, X, y, seed if split_seed is None else split_seed)


def snap_to_grid(X: np.ndarray, bits: int) -> np.ndarray:
    """Round every entry onto the symmetric ``bits``-bit grid of ``X``'s own range."""
    lim = (1 << (bits - 1)) - 1
    m = float(np.max(np.abs(X)))
    if m == 0:
        return X.copy()
    s = m / lim
    return (np.rint(X / s) * s).astype(X.dtype)
