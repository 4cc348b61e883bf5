"""Symmetric, tensor-level, dynamic integer quantization.

Zero point is fixed at 0 and the integer range is ``[-(2**(B-1)-1), 2**(B-1)-1]``.
Codes are stored one per byte (int8) for every supported bit width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import instrument
from .rng import RngState, rng_next_unit, uniform_array

MIN_BITS = 2
MAX_BITS = 8
ERROR_EPS = 0.0005
DEFAULT_THRESHOLD = 0.3


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def check_bits(bits: int) -> int:
    if not (MIN_BITS <= int(bits) <= MAX_BITS):
        raise ValueError(f"bit width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float

    def __post_init__(self):
        check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8 codes
    params: QuantParams

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def bits(self) -> int:
        return self.params.bits

    @property
    def scale(self) -> float:
        return self.params.scale

    @property
    def T(self) -> "QuantizedTensor":
        return QuantizedTensor(self.values.T, self.params)


def compute_scale(X: np.ndarray, bits: int) -> float:
    """``max|X| / (2**(B-1)-1)``; an all-zero tensor gets scale 1."""
    if X.size == 0:
        raise ValueError("cannot compute a scale for an empty tensor")
    m = float(np.max(np.abs(X)))
    if m == 0.0:
        return 1.0
    return m / qmax(check_bits(bits))


def stochastic_round(x: float, rng: RngState) -> tuple[int, RngState]:
    """floor(x)+1 with probability frac(x), else floor(x)."""
    u, rng = rng_next_unit(rng)
    f = math.floor(x)
    return int(f) + int(u < x - f), rng


def _scaled(X: np.ndarray, scale: float) -> np.ndarray:
    y = np.asarray(X, dtype=np.float64) / scale
    # absorb float64 division round-off so on-grid inputs stay exactly on grid
    r = np.rint(y)
    near = np.abs(y - r) <= 8 * np.finfo(np.float64).eps * np.abs(y)
    return np.where(near, r, y)


def round_codes(y: np.ndarray, bits: int, rng: RngState | None,
                rounding: str = "stochastic") -> tuple[np.ndarray, RngState | None]:
    """Round pre-scaled values to clamped int8 codes (row-major RNG consumption)."""
    lim = qmax(bits)
    if rounding == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an RngState")
        u, rng = uniform_array(rng, y.size)
        fl = np.floor(y)
        q = fl + (u.reshape(y.shape) < (y - fl))
    elif rounding == "nearest":
        q = np.rint(y)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    return np.clip(q, -lim, lim).astype(np.int8), rng


def quantize_tensor(X: np.ndarray, bits: int, rng: RngState | None, *,
                    scale: float | None = None, rounding: str = "stochastic",
                    tag: str = "tensor") -> tuple[QuantizedTensor, RngState | None]:
    """Quantize ``X`` in one sequential pass.

    ``scale`` may be supplied when an upstream primitive already produced it
    (the fused output scale of a quantized GEMM); otherwise it is reduced here.
    """
    bits = check_bits(bits)
    X = np.asarray(X)
    if scale is None:
        scale = compute_scale(X, bits)
    codes, rng = round_codes(_scaled(X, scale), bits, rng, rounding)
    instrument.count_quantize(tag, X.size)
    return QuantizedTensor(codes, QuantParams(bits, float(scale))), rng


def dequantize_tensor(Q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    return (Q.values.astype(np.float64) * Q.scale).astype(dtype)


def quant_error(X: np.ndarray, Q: QuantizedTensor | np.ndarray) -> float:
    """Mean relative quantization error with ``eps = 0.0005``.

    ``Q`` may be a quantized tensor or its already-dequantized values.
    """
    X = np.asarray(X, dtype=np.float64)
    Xh = dequantize_tensor(Q, np.float64) if isinstance(Q, QuantizedTensor) else np.asarray(Q, np.float64)
    if X.shape != Xh.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {Xh.shape}")
    if X.size == 0:
        return 0.0
    # X and its code share a sign under symmetric quantization, so |X + Xh|
    # equals X + Xh for non-negative data and keeps each term below 1
    return float(np.mean(np.abs(X - Xh) / (np.abs(X + Xh) + ERROR_EPS)))


class BitChoice(NamedTuple):
    bits: int
    errors: dict  # bits -> Error_X
    satisfied: bool  # False when no candidate met the threshold


def error_table(X: np.ndarray, candidates: Sequence[int] = range(MIN_BITS, MAX_BITS + 1)) -> dict:
    """Error_X per bit width using deterministic nearest rounding."""
    table = {}
    for b in candidates:
        Q, _ = quantize_tensor(X, b, None, rounding="nearest", tag="bit_selection")
        table[int(b)] = quant_error(X, Q)
    return table


def select_bits(first_layer_output: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                candidates: Sequence[int] = tuple(range(MIN_BITS, MAX_BITS + 1))) -> BitChoice:
    """Smallest candidate bit width whose Error_X is within ``threshold``."""
    candidates = [check_bits(b) for b in candidates]
    if not candidates:
        raise ValueError("candidate bit list is empty")
    if candidates != sorted(candidates):
        raise ValueError("candidate bit list must be ascending")
    errors = error_table(first_layer_output, candidates)
    for b in candidates:
        if errors[b] <= threshold:
            return BitChoice(b, errors, True)
    return BitChoice(candidates[-1], errors, False)
