"""Per-primitive timing of full-precision vs quantized execution.

Wall-clock numbers on a CPU say nothing about GPU speedups; they are
reported for inspection only. The deterministic outputs worth checking are
the operation-count model and the random-access byte counters.
"""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import instrument
from .data import Dataset
from .dense import gemm_f32, qgemm
from .graph import GraphViews
from .quant import quantize_tensor
from .rng import rng_seed
from .sparse import incidence_spmm, sddmm_add, sddmm_dot, spmm_edge_scaled


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up (JIT compilation)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _bytes(fn) -> int:
    rec = instrument.Recorder()
    with instrument.recording(rec):
        fn()
    return rec.total_random_bytes


def bench_primitives(ds: Dataset, bits: int = 8, hidden: int = 128, heads: int = 4,
                     reps: int = 30, seed: int = 0) -> list[dict]:
    """One row per primitive with fp32 and quantized medians (seconds).

    Quantized timings include the quantization pass of every operand.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    views = GraphViews.build(ds.edges)
    rng = np.random.default_rng(seed)
    X = ds.features
    V, K = X.shape
    W = rng.standard_normal((K, hidden)).astype(np.float32)
    H = rng.standard_normal((V, hidden)).astype(np.float32)
    E = views.num_edges
    alpha = rng.random((E, heads)).astype(np.float32)
    S = rng.standard_normal((V, heads)).astype(np.float32)
    dE = rng.standard_normal((E, heads)).astype(np.float32)
    state = rng_seed(seed)

    def q(T):
        return quantize_tensor(T, bits, state)[0]

    cases = {
        "gemm": (lambda: gemm_f32(X, W), lambda: qgemm(X, W, bits, state)),
        "spmm": (lambda: spmm_edge_scaled(views.in_csr, alpha, H),
                 lambda: spmm_edge_scaled(views.in_csr, alpha, q(H))),
        "sddmm_dot": (lambda: sddmm_dot(views.out_csr, H, H, heads),
                      lambda: sddmm_dot(views.out_csr, q(H), q(H), heads)),
        "sddmm_add": (lambda: sddmm_add(views.out_csr, S, S),
                      lambda: sddmm_add(views.out_csr, q(S), q(S))),
        "incidence_spmm": (lambda: incidence_spmm(views.in_inc, dE),
                           lambda: incidence_spmm(views.in_inc, q(dE))),
    }
    rows = []
    for name, (f32, quant) in cases.items():
        row = {"primitive": name, "bits": bits, "reps": reps,
               "fp32_median_s": _median_time(f32, reps),
               "quant_median_s": _median_time(quant, reps),
               "fp32_random_bytes": _bytes(f32), "quant_random_bytes": _bytes(quant)}
        if name == "gemm":
            row["quant_ops_model"] = 4 * K * (V + hidden)
            row["dequant_ops_model"] = 2 * V * hidden
        rows.append(row)
    return rows
