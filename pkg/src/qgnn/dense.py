"""Full-precision GEMM and quantized GEMM with on-the-fly input quantization.

The quantized path walks the output in cache-sized tiles. An input tile is
quantized the first time the sweep touches it and kept in the returned
quantized operand, so each input element is quantized exactly once. Products
accumulate in int32; the dequantization sweep also tracks ``max|C|`` so the
output scale comes out of the same pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import instrument
from .quant import (QuantizedTensor, QuantParams, _scaled, check_bits, compute_scale, qmax,
                    round_codes)
from .rng import RngState

TILE_M = 64
TILE_N = 64
# 127**2 * 32768 < 2**31: the int32 accumulator cannot wrap within this K
MAX_K = 32768


@njit(cache=True)
def _matmul_acc(A, B, C):
    # i-k-j order: for each C[i, j] the k terms are added in ascending order
    M, K = A.shape
    N = B.shape[1]
    for i in range(M):
        for k in range(K):
            a = A[i, k]
            if a == 0:
                continue
            for j in range(N):
                C[i, j] += a * B[k, j]


def gemm_f32(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Matrix product in the operands' float precision with a fixed summation order.

    float32 inputs produce float32 output (the training path); float64 inputs
    stay float64, which the gradient checks rely on.
    """
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"gemm dimension mismatch: {A.shape} x {B.shape}")
    dtype = np.result_type(A.dtype, B.dtype, np.float32)
    C = np.zeros((A.shape[0], B.shape[1]), dtype=dtype)
    _matmul_acc(np.ascontiguousarray(A, dtype=dtype), np.ascontiguousarray(B, dtype=dtype), C)
    return C


def int_matmul(Aq: np.ndarray, Bq: np.ndarray) -> np.ndarray:
    """Integer product of int8 codes with an int32 accumulator."""
    C = np.zeros((Aq.shape[0], Bq.shape[1]), dtype=np.int32)
    _matmul_acc(np.ascontiguousarray(Aq, dtype=np.int32), np.ascontiguousarray(Bq, dtype=np.int32), C)
    return C


@dataclass(frozen=True)
class QGemmResult:
    C: np.ndarray  # dequantized float32 product
    s_C: float  # scale of C at the active bit width
    A_q: QuantizedTensor
    B_q: QuantizedTensor


class _LazyOperand:
    """Quantizes row (or column) tiles of a dense operand on first touch."""

    def __init__(self, X, bits, axis, tile, tag):
        self.cached = isinstance(X, QuantizedTensor)
        self.axis = axis
        self.tile = tile
        self.tag = tag
        if self.cached:
            if X.bits != bits:
                raise ValueError(f"cached operand {tag!r} has {X.bits} bits, expected {bits}")
            self.codes = X.values
            self.scale = X.scale
            self.done = None
            instrument.count_reuse(tag)
        else:
            X = np.asarray(X)
            self.src = X
            self.scale = compute_scale(X, bits)
            self.codes = np.empty(X.shape, dtype=np.int8)
            self.done = np.zeros(-(-X.shape[axis] // tile), dtype=bool)
        self.bits = bits

    def block(self, t, rng, rounding):
        lo, hi = t * self.tile, (t + 1) * self.tile
        sl = (slice(lo, hi), slice(None)) if self.axis == 0 else (slice(None), slice(lo, hi))
        if self.done is not None and not self.done[t]:
            y = _scaled(self.src[sl], self.scale)
            self.codes[sl], rng = round_codes(y, self.bits, rng, rounding)
            self.done[t] = True
        return self.codes[sl], rng

    def finish(self) -> QuantizedTensor:
        if self.done is not None:
            assert self.done.all()
            instrument.count_quantize(self.tag, self.src.size)
        return QuantizedTensor(self.codes, QuantParams(self.bits, float(self.scale)))


def qgemm_with_cached(A, B, bits: int, rng: RngState | None, *, rounding: str = "stochastic",
                      a_tag: str = "gemm.A", b_tag: str = "gemm.B") -> tuple[QGemmResult, RngState | None]:
    """Quantized GEMM where either operand may already be quantized.

    Dense operands are quantized tile-by-tile during the sweep; quantized
    operands are used as-is (and counted as reuse). RNG draws happen in sweep
    order: A row tile 0, then B column tiles left to right, then A row tile 1...
    """
    bits = check_bits(bits)
    M, K = A.shape
    K2, N = B.shape
    if K != K2:
        raise ValueError(f"gemm dimension mismatch: {A.shape} x {B.shape}")
    if K > MAX_K:
        raise ValueError(f"K={K} exceeds {MAX_K}; the int32 accumulator could overflow")
    a = _LazyOperand(A, bits, 0, TILE_M, a_tag)
    b = _LazyOperand(B, bits, 1, TILE_N, b_tag)
    if a.bits != b.bits:
        raise ValueError("operand bit widths differ")
    alpha = a.scale * b.scale
    C = np.empty((M, N), dtype=np.float32)
    cmax = 0.0
    for ti in range(-(-M // TILE_M) if M else 0):
        a_blk, rng = a.block(ti, rng, rounding)
        for tj in range(-(-N // TILE_N) if N else 0):
            b_blk, rng = b.block(tj, rng, rounding)
            c_int = int_matmul(a_blk, b_blk)
            c = (c_int.astype(np.float64) * alpha).astype(np.float32)
            C[ti * TILE_M:(ti + 1) * TILE_M, tj * TILE_N:(tj + 1) * TILE_N] = c
            if c.size:
                cmax = max(cmax, float(np.max(np.abs(c))))
    instrument.count_dequant(M * N)
    s_C = cmax / qmax(bits) if cmax > 0 else 1.0
    return QGemmResult(C, s_C, a.finish(), b.finish()), rng


def qgemm(A: np.ndarray, B: np.ndarray, bits: int, rng: RngState | None, *,
          rounding: str = "stochastic", a_tag: str = "gemm.A",
          b_tag: str = "gemm.B") -> tuple[QGemmResult, RngState | None]:
    """Quantized GEMM of two dense operands; see :func:`qgemm_with_cached`."""
    if isinstance(A, QuantizedTensor) or isinstance(B, QuantizedTensor):
        raise TypeError("qgemm takes dense operands; use qgemm_with_cached for quantized ones")
    return qgemm_with_cached(A, B, bits, rng, rounding=rounding, a_tag=a_tag, b_tag=b_tag)
