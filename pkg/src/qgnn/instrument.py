"""Opt-in counters for quantization calls, operation counts, and memory traffic.

Primitives report into whichever :class:`Recorder` is active in the current
context; with no recorder active every hook is a no-op.
"""

from __future__ import annotations

import time
from collections import Counter, defaultdict
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field

_active: ContextVar["Recorder | None"] = ContextVar("qgnn_recorder", default=None)


@dataclass
class Recorder:
    quantize_calls: Counter = field(default_factory=Counter)
    reuse_hits: Counter = field(default_factory=Counter)
    quant_ops: int = 0
    dequant_ops: int = 0
    # bytes of feature operands read through data-dependent (gathered) indices
    random_bytes: Counter = field(default_factory=Counter)
    elapsed: dict = field(default_factory=lambda: defaultdict(float))

    @property
    def total_quantize_calls(self) -> int:
        return sum(self.quantize_calls.values())

    @property
    def total_random_bytes(self) -> int:
        return sum(self.random_bytes.values())


@contextmanager
def recording(recorder: Recorder | None = None):
    rec = recorder if recorder is not None else Recorder()
    token = _active.set(rec)
    try:
        yield rec
    finally:
        _active.reset(token)


def current() -> Recorder | None:
    return _active.get()


def count_quantize(tag: str, numel: int) -> None:
    rec = _active.get()
    if rec is not None:
        rec.quantize_calls[tag] += 1
        rec.quant_ops += 4 * int(numel)


def count_reuse(tag: str) -> None:
    rec = _active.get()
    if rec is not None:
        rec.reuse_hits[tag] += 1


def count_dequant(numel: int) -> None:
    rec = _active.get()
    if rec is not None:
        rec.dequant_ops += 2 * int(numel)


def count_random_bytes(primitive: str, nbytes: int) -> None:
    rec = _active.get()
    if rec is not None:
        rec.random_bytes[primitive] += int(nbytes)


@contextmanager
def timed(name: str):
    rec = _active.get()
    if rec is None:
        yield
        return
    t0 = time.perf_counter()
    try:
        yield
    finally:
        rec.elapsed[name] += time.perf_counter() - t0
