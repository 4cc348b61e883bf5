"""Quantization-aware sparse primitives: SPMM, incidence SPMM, SDDMM, segment softmax.

Feature operands may be dense arrays (full-precision passthrough) or
:class:`QuantizedTensor` codes produced by a dedicated sequential
quantization pass. Only the small int8 codes are then read through the
graph's random access pattern; results are dequantized once on the way out.
Attention scores always stay in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import instrument
from .graph import GraphCSR, IncidenceCSR
from .quant import QuantizedTensor, quantize_tensor
from .rng import RngState

MULTI_SPMM = "MultiSPMM"
MULTI_SPMV = "MultiSpMV"
FUSED = "FusedFallback"
DEFAULT_KMAX = 6


@dataclass(frozen=True)
class KernelPlan:
    strategy: str
    kernel_count: int


def plan_kernels(heads: int, dim: int, k_max: int = DEFAULT_KMAX) -> KernelPlan:
    """Split a three-operand SPMM into per-head sweeps unless that needs too many."""
    if heads < 1 or dim < 1:
        raise ValueError("heads and dim must be >= 1")
    count = heads
    if count > k_max:
        return KernelPlan(FUSED, 1)
    return KernelPlan(MULTI_SPMV if dim == 1 else MULTI_SPMM, count)


def _codes(X):
    """(array to read, scale to apply at exit or None)."""
    if isinstance(X, QuantizedTensor):
        return X.values, X.scale
    return np.asarray(X), None


def _out_dtype(*arrays):
    dt = np.result_type(*[a.dtype for a in arrays if a.dtype.kind == "f"], np.float32)
    return dt


def quantize_features(X: np.ndarray, bits: int, rng: RngState | None, *, scale: float | None = None,
                      rounding: str = "stochastic", tag: str = "features"):
    """Dedicated pass: one sequential read of ``X``, one sequential write of codes."""
    return quantize_tensor(X, bits, rng, scale=scale, rounding=rounding, tag=tag)


# --- kernels ----------------------------------------------------------------

@njit(cache=True)
def _spmm_scaled(offsets, cols, eids, w, X, out):
    for r in range(offsets.size - 1):
        for p in range(offsets[r], offsets[r + 1]):
            c = cols[p]
            a = w[eids[p]]
            for d in range(X.shape[1]):
                out[r, d] += a * X[c, d]


@njit(cache=True)
def _spmm_fused(offsets, cols, eids, alpha, X, heads, dim, out):
    for r in range(offsets.size - 1):
        for p in range(offsets[r], offsets[r + 1]):
            c = cols[p]
            e = eids[p]
            for h in range(heads):
                a = alpha[e, h]
                for d in range(h * dim, (h + 1) * dim):
                    out[r, d] += a * X[c, d]


@njit(cache=True)
def _incidence_sum(offsets, eids, F, out):
    for r in range(offsets.size - 1):
        for p in range(offsets[r], offsets[r + 1]):
            e = eids[p]
            for k in range(F.shape[1]):
                out[r, k] += F[e, k]


@njit(cache=True)
def _sddmm_dot_int(src, dst, A, B, heads, dim, out):
    for e in range(src.size):
        u = src[e]
        v = dst[e]
        for h in range(heads):
            acc = np.int32(0)
            for d in range(h * dim, (h + 1) * dim):
                acc += np.int32(A[v, d]) * np.int32(B[u, d])
            out[e, h] = acc


@njit(cache=True)
def _sddmm_dot_float(src, dst, A, B, heads, dim, out):
    for e in range(src.size):
        u = src[e]
        v = dst[e]
        for h in range(heads):
            acc = 0.0
            for d in range(h * dim, (h + 1) * dim):
                acc += A[v, d] * B[u, d]
            out[e, h] = acc


@njit(cache=True)
def _segment_softmax(offsets, eids, E, alpha, denom):
    for v in range(offsets.size - 1):
        lo, hi = offsets[v], offsets[v + 1]
        for h in range(E.shape[1]):
            m = -np.inf
            for p in range(lo, hi):
                m = max(m, E[eids[p], h])
            s = 0.0
            for p in range(lo, hi):
                x = np.exp(E[eids[p], h] - m)
                alpha[eids[p], h] = x
                s += x
            denom[v, h] = s
            for p in range(lo, hi):
                alpha[eids[p], h] = alpha[eids[p], h] / s


# --- primitives -------------------------------------------------------------

def _edge_endpoints(csr: GraphCSR):
    """(row node, col node) per edge id for a CSR view."""
    n = csr.nnz
    rows = np.empty(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    rows[csr.edge_ids] = csr.row_of_slot
    cols[csr.edge_ids] = csr.col_indices
    return rows, cols


def spmm_edge_scaled(csr: GraphCSR, alpha: np.ndarray, X, plan: KernelPlan | None = None,
                     k_max: int = DEFAULT_KMAX) -> np.ndarray:
    """``out[r] = sum over slots (r, c, e) of alpha[e] * X[c]``, head by head.

    ``alpha`` is ``(E, H)``; ``X`` is ``(num_cols, H * D)``. With the in-edge
    view this is forward aggregation over incoming edges; with the out-edge
    view it is the same product on the reversed graph.
    """
    alpha = np.asarray(alpha)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    codes, scale = _codes(X)
    heads = alpha.shape[1]
    if codes.shape[1] % heads:
        raise ValueError(f"feature width {codes.shape[1]} not divisible by {heads} heads")
    if alpha.shape[0] != csr.nnz:
        raise ValueError("one attention row per edge required")
    dim = codes.shape[1] // heads
    if plan is None:
        plan = plan_kernels(heads, dim, k_max)
    dt = _out_dtype(alpha, codes)
    out = np.zeros((csr.num_rows, codes.shape[1]), dtype=dt)
    a = alpha.astype(dt, copy=False)
    with instrument.timed("spmm"):
        if plan.strategy == FUSED:
            _spmm_fused(csr.row_offsets, csr.col_indices, csr.edge_ids, a, codes, heads, dim, out)
        else:
            for h in range(heads):
                sl = slice(h * dim, (h + 1) * dim)
                sub = np.zeros((csr.num_rows, dim), dtype=dt)
                _spmm_scaled(csr.row_offsets, csr.col_indices, csr.edge_ids,
                             np.ascontiguousarray(a[:, h]), codes[:, sl], sub)
                out[:, sl] = sub
        if scale is not None:
            out = (out.astype(np.float64) * scale).astype(dt)
            instrument.count_dequant(out.size)
    instrument.count_random_bytes("spmm", csr.nnz * codes.shape[1] * codes.itemsize)
    return out


def spmm_three_operand(csr: GraphCSR, edge_values: np.ndarray, node_values: np.ndarray) -> np.ndarray:
    """Generic ``(G ⊙ edge_values) · node_values`` with all three operands materialised."""
    edge_values = np.asarray(edge_values)
    if edge_values.ndim == 1:
        edge_values = edge_values[:, None]
    k = edge_values.shape[1]
    dt = _out_dtype(edge_values, node_values)
    out = np.zeros((csr.num_rows, k), dtype=dt)
    _spmm_fused(csr.row_offsets, csr.col_indices, csr.edge_ids, edge_values.astype(dt),
                np.ascontiguousarray(node_values, dtype=dt), k, 1, out)
    return out


def incidence_spmm(inc: IncidenceCSR, F) -> np.ndarray:
    """``out[v] = sum of F[e]`` over the edges in incidence row ``v``.

    Two operands only: no all-ones node matrix is built.
    """
    codes, scale = _codes(F)
    if codes.ndim == 1:
        codes = codes[:, None]
    dt = np.float32 if scale is not None else _out_dtype(codes)
    out = np.zeros((inc.num_rows, codes.shape[1]), dtype=dt)
    with instrument.timed("incidence_spmm"):
        _incidence_sum(inc.row_offsets, inc.incident_edge_ids, codes, out)
        if scale is not None:
            out = (out.astype(np.float64) * scale).astype(np.float32)
            instrument.count_dequant(out.size)
    instrument.count_random_bytes("incidence_spmm", codes.size * codes.itemsize)
    return out


def sddmm_add(csr: GraphCSR, S, D) -> np.ndarray:
    """Per edge (u -> v): ``S[u] + D[v]``, dequantizing each operand on load.

    ``csr`` is the out-edge view (rows are sources). The two operands carry
    independent scales, so codes cannot be added directly.
    """
    s_codes, s_scale = _codes(S)
    d_codes, d_scale = _codes(D)
    src, dst = _edge_endpoints(csr)
    with instrument.timed("sddmm_add"):
        dt = np.float32 if (s_scale is not None or d_scale is not None) else _out_dtype(s_codes, d_codes)
        a = s_codes[src].astype(np.float64) * s_scale if s_scale is not None else s_codes[src]
        b = d_codes[dst].astype(np.float64) * d_scale if d_scale is not None else d_codes[dst]
        out = (a + b).astype(dt)
    instrument.count_random_bytes("sddmm_add", src.size * (s_codes.shape[1] * s_codes.itemsize
                                                           + d_codes.shape[1] * d_codes.itemsize))
    return out


def sddmm_dot(csr: GraphCSR, A, B, heads: int = 1) -> np.ndarray:
    """Per edge (u -> v) and head: ``<A[v], B[u]>`` over that head's slice.

    Quantized operands are multiplied as integers (int32 accumulator) and the
    product of the two scales is applied once per output.
    """
    a_codes, a_scale = _codes(A)
    b_codes, b_scale = _codes(B)
    if a_codes.shape[1] != b_codes.shape[1] or a_codes.shape[1] % heads:
        raise ValueError("operand widths must match and divide into heads")
    if (a_scale is None) != (b_scale is None):
        raise ValueError("sddmm_dot needs both operands quantized or both dense")
    dim = a_codes.shape[1] // heads
    src, dst = _edge_endpoints(csr)
    with instrument.timed("sddmm_dot"):
        if a_scale is not None:
            acc = np.zeros((src.size, heads), dtype=np.int32)
            _sddmm_dot_int(src, dst, a_codes, b_codes, heads, dim, acc)
            out = (acc.astype(np.float64) * (a_scale * b_scale)).astype(np.float32)
            instrument.count_dequant(out.size)
        else:
            dt = _out_dtype(a_codes, b_codes)
            out = np.zeros((src.size, heads), dtype=dt)
            _sddmm_dot_float(src, dst, a_codes.astype(dt, copy=False), b_codes.astype(dt, copy=False),
                             heads, dim, out)
    instrument.count_random_bytes("sddmm_dot", src.size * a_codes.shape[1]
                                  * (a_codes.itemsize + b_codes.itemsize))
    return out


def segment_softmax(inc: IncidenceCSR, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over each destination's incoming edges, per head.

    ``inc`` must be keyed on destination. Scores are shifted by the
    per-destination maximum before exponentiation. Returns ``(alpha, denom)``
    where ``denom[v]`` is the shifted sum of exponentials.
    """
    E = np.asarray(E)
    if E.ndim == 1:
        E = E[:, None]
    if (np.diff(inc.row_offsets) == 0).any():
        raise ValueError("segment softmax needs every node to have an incoming edge")
    dt = _out_dtype(E)
    alpha = np.empty(E.shape, dtype=dt)
    denom = np.empty((inc.num_rows, E.shape[1]), dtype=dt)
    with instrument.timed("softmax"):
        _segment_softmax(inc.row_offsets, inc.incident_edge_ids, E.astype(dt, copy=False), alpha, denom)
    return alpha, denom


def softmax_backward(inc: IncidenceCSR, alpha: np.ndarray, d_alpha: np.ndarray,
                     dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of segment softmax.

    ``P[v] = sum over e -> v of d_alpha[e] * alpha[e]`` (incidence SPMM), then
    ``dE[e] = alpha[e] * (d_alpha[e] - P[dst(e)])`` broadcast back per edge.
    Returns ``(dE, P)``.
    """
    if alpha.shape != d_alpha.shape:
        raise ValueError("alpha and d_alpha shapes differ")
    with instrument.timed("softmax_backward"):
        prod = np.ascontiguousarray(d_alpha * alpha)
        if prod.ndim == 1:
            prod = prod[:, None]
        P = np.zeros((inc.num_rows, prod.shape[1]), dtype=prod.dtype)
        _incidence_sum(inc.row_offsets, inc.incident_edge_ids, prod, P)
        dE = alpha * (d_alpha - P[dst].reshape(alpha.shape))
    return dE.astype(alpha.dtype, copy=False), P
