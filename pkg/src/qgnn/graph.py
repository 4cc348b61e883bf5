"""Edge lists and the sparse views the primitives consume.

Edge ids are positions in the :class:`EdgeList` and stay attached to every
derived view, so per-edge tensors can be indexed by id from any of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class EdgeList:
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise DataError("src and dst must have equal length")
        if self.num_nodes < 0:
            raise DataError("num_nodes must be non-negative")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= self.num_nodes):
            raise DataError(f"node id out of range [0, {self.num_nodes})")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)

    @classmethod
    def from_pairs(cls, num_nodes: int, pairs) -> "EdgeList":
        pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        return cls(num_nodes, pairs[:, 0], pairs[:, 1])

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def reversed(self) -> "EdgeList":
        return EdgeList(self.num_nodes, self.dst, self.src)


@dataclass(frozen=True)
class GraphCSR:
    """Row-compressed adjacency: row r lists (col, edge id) slots sorted by col."""

    row_offsets: np.ndarray
    col_indices: np.ndarray
    edge_ids: np.ndarray

    @property
    def num_rows(self) -> int:
        return self.row_offsets.size - 1

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @cached_property
    def row_of_slot(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_rows), np.diff(self.row_offsets))


@dataclass(frozen=True)
class IncidenceCSR:
    """V x E incidence rows: row v lists the ids of the edges incident on v."""

    row_offsets: np.ndarray
    incident_edge_ids: np.ndarray

    @property
    def num_rows(self) -> int:
        return self.row_offsets.size - 1


def _compress(num_rows: int, rows: np.ndarray, cols: np.ndarray):
    eids = np.arange(rows.size, dtype=np.int64)
    order = np.lexsort((eids, cols, rows))
    offsets = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_rows), out=offsets[1:])
    return offsets, cols[order], eids[order]


def build_csr(el: EdgeList) -> GraphCSR:
    """Out-edge view: row u lists destinations of edges leaving u."""
    return GraphCSR(*_compress(el.num_nodes, el.src, el.dst))


def build_reverse_csr(el: EdgeList) -> GraphCSR:
    """In-edge view (CSR of the transpose): row v lists sources of edges entering v."""
    return GraphCSR(*_compress(el.num_nodes, el.dst, el.src))


def build_incidence(el: EdgeList, by: str = "dst") -> IncidenceCSR:
    """Incidence rows keyed on edge destination (incoming edges) or source."""
    if by not in ("dst", "src"):
        raise ValueError("by must be 'dst' or 'src'")
    keys = el.dst if by == "dst" else el.src
    eids = np.arange(el.num_edges, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    offsets = np.zeros(el.num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=el.num_nodes), out=offsets[1:])
    return IncidenceCSR(offsets, eids[order])


def transpose_csr(csr: GraphCSR, num_cols: int) -> GraphCSR:
    rows = csr.row_of_slot
    cols = csr.col_indices
    order = np.lexsort((csr.edge_ids, rows, cols))
    offsets = np.zeros(num_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=num_cols), out=offsets[1:])
    return GraphCSR(offsets, rows[order], csr.edge_ids[order])


def augment(el: EdgeList, add_reverse: bool = True, add_self_loops: bool = True) -> EdgeList:
    """Append missing reverse edges and self-loops; original ids are unchanged."""
    pairs = el.pairs()
    present = set(pairs)
    extra = []
    if add_reverse:
        for u, v in pairs:
            if (v, u) not in present:
                present.add((v, u))
                extra.append((v, u))
    if add_self_loops:
        for v in range(el.num_nodes):
            if (v, v) not in present:
                present.add((v, v))
                extra.append((v, v))
    if not extra:
        return el
    extra = np.asarray(extra, dtype=np.int64)
    return EdgeList(el.num_nodes, np.concatenate([el.src, extra[:, 0]]),
                    np.concatenate([el.dst, extra[:, 1]]))


def gcn_norm(el: EdgeList) -> np.ndarray:
    """Per-edge symmetric normalisation ``1/sqrt(deg(src) deg(dst))``.

    Degrees are in-degrees, which equal out-degrees on the symmetrised,
    self-looped graphs this is meant for.
    """
    deg = np.bincount(el.dst, minlength=el.num_nodes).astype(np.float64)
    if el.num_edges and (deg[el.src] == 0).any():
        raise DataError("zero-degree endpoint; add self-loops first")
    return (1.0 / np.sqrt(deg[el.src] * deg[el.dst])).astype(np.float32)


@dataclass(frozen=True)
class GraphViews:
    """Every structural view one GNN layer needs, built once per graph."""

    edges: EdgeList
    in_csr: GraphCSR  # rows = destinations (forward aggregation)
    out_csr: GraphCSR  # rows = sources (aggregation on the reversed graph)
    in_inc: IncidenceCSR
    out_inc: IncidenceCSR

    @classmethod
    def build(cls, el: EdgeList) -> "GraphViews":
        return cls(el, build_reverse_csr(el), build_csr(el),
                   build_incidence(el, "dst"), build_incidence(el, "src"))

    @property
    def num_nodes(self) -> int:
        return self.edges.num_nodes

    @property
    def num_edges(self) -> int:
        return self.edges.num_edges


# --- text formats ---------------------------------------------------------

def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    return lines


def _ints(line: str, n: int, where: str) -> list[int]:
    parts = line.split()
    if len(parts) != n:
        raise DataError(f"{where}: expected {n} integers, got {line!r}")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None


def load_edge_list(path) -> EdgeList:
    """Read ``V E`` then E lines of ``src dst``."""
    lines = _read_lines(path)
    V, E = _ints(lines[0], 2, f"{path}:1")
    if len(lines) - 1 != E:
        raise DataError(f"{path}: header says {E} edges, found {len(lines) - 1}")
    pairs = [_ints(ln, 2, f"{path}:{i + 2}") for i, ln in enumerate(lines[1:])]
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    return EdgeList(V, src, dst)


def save_edge_list(el: EdgeList, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{el.num_nodes} {el.num_edges}\n")
        for u, v in zip(el.src.tolist(), el.dst.tolist()):
            fh.write(f"{u} {v}\n")


def load_features(path) -> np.ndarray:
    lines = _read_lines(path)
    V, D = _ints(lines[0], 2, f"{path}:1")
    if len(lines) - 1 != V:
        raise DataError(f"{path}: header says {V} rows, found {len(lines) - 1}")
    try:
        X = np.array([[float(t) for t in ln.split()] for ln in lines[1:]], dtype=np.float32)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if X.shape != (V, D):
        raise DataError(f"{path}: ragged rows, expected {D} values each")
    if not np.isfinite(X).all():
        raise DataError(f"{path}: non-finite feature value")
    return X


def save_features(X: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{X.shape[0]} {X.shape[1]}\n")
        for row in X:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_labels(path) -> np.ndarray:
    lines = _read_lines(path)
    try:
        y = np.array([int(ln.strip()) for ln in lines], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if (y < 0).any():
        raise DataError(f"{path}: negative class id")
    return y


def save_labels(y: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{int(v)}\n" for v in y))
