"""GCN and GAT layers built from the GEMM/SPMM/SDDMM primitives, with manual backward.

A layer never decides precision itself. It asks its :class:`LayerContext`
for GEMMs and quantized operands; the context either runs full precision or
quantizes, consulting the step's reuse plan so a tensor with several
quantized consumers is quantized once and then served from the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .dense import gemm_f32, qgemm_with_cached
from .graph import GraphViews, gcn_norm
from .quant import QuantizedTensor, check_bits, quantize_tensor
from .rng import RngState
from .sparse import (DEFAULT_KMAX, incidence_spmm, plan_kernels, sddmm_add, sddmm_dot,
                     segment_softmax, softmax_backward, spmm_edge_scaled)


# --- precision policy and per-step context -----------------------------------

class Precision:
    """Full precision when ``bits`` is None, otherwise B-bit quantization.

    Holds the stochastic-rounding RNG state, which advances across steps.
    """

    def __init__(self, bits: int | None = None, rng: RngState | None = None,
                 rounding: str = "stochastic"):
        if bits is not None:
            check_bits(bits)
            if rounding == "stochastic" and rng is None:
                raise ValueError("stochastic rounding needs an RngState")
        self.bits = bits
        self.rng = rng
        self.rounding = rounding

    @property
    def quantized(self) -> bool:
        return self.bits is not None

    def __repr__(self):
        return f"Precision(bits={self.bits}, rounding={self.rounding!r})"


@dataclass
class ForwardContext:
    """State owned by one training step: saved activations and the quantized-tensor cache.

    ``reuse`` is the set of fully-qualified tensor keys (``"layer.tensor"``)
    the reuse plan marked quantize-once; ``None`` disables caching entirely.
    """

    reuse: set | None = None
    cache: dict = field(default_factory=dict)
    layers: dict = field(default_factory=dict)

    def layer(self, name: str, precision: Precision) -> "LayerContext":
        lc = LayerContext(self, name, precision)
        self.layers[name] = lc
        return lc


class LayerContext:
    def __init__(self, parent: ForwardContext, name: str, precision: Precision):
        self.parent = parent
        self.name = name
        self.precision = precision
        self.saved: dict = {}

    def key(self, tensor: str) -> str:
        return f"{self.name}.{tensor}"

    def _lookup(self, tensor: str):
        return self.parent.cache.get(self.key(tensor))

    def _store(self, tensor: str, q: QuantizedTensor) -> None:
        reuse = self.parent.reuse
        if reuse is not None and self.key(tensor) in reuse:
            self.parent.cache[self.key(tensor)] = q

    def quant(self, tensor: str, X: np.ndarray, scale: float | None = None):
        """Operand for a sparse primitive: ``X`` itself, or its quantized codes."""
        p = self.precision
        if not p.quantized:
            return X
        q = self._lookup(tensor)
        if q is not None:
            instrument.count_reuse(self.key(tensor))
            return q
        q, p.rng = quantize_tensor(X, p.bits, p.rng, scale=scale, rounding=p.rounding,
                                   tag=self.key(tensor))
        self._store(tensor, q)
        return q

    def gemm(self, a_name: str, A: np.ndarray, b_name: str, B: np.ndarray,
             a_t: bool = False, b_t: bool = False) -> tuple[np.ndarray, float | None]:
        """``op(A) @ op(B)`` with ``op`` an optional transpose; returns (C, scale of C)."""
        p = self.precision
        if not p.quantized:
            return gemm_f32(A.T if a_t else A, B.T if b_t else B), None
        qa, qb = self._lookup(a_name), self._lookup(b_name)
        opa = (qa if qa is not None else A)
        opb = (qb if qb is not None else B)
        res, p.rng = qgemm_with_cached(opa.T if a_t else opa, opb.T if b_t else opb, p.bits, p.rng,
                                       rounding=p.rounding, a_tag=self.key(a_name),
                                       b_tag=self.key(b_name))
        if qa is None:
            self._store(a_name, res.A_q.T if a_t else res.A_q)
        if qb is None:
            self._store(b_name, res.B_q.T if b_t else res.B_q)
        return res.C, res.s_C


# --- reuse planning ----------------------------------------------------------

@dataclass(frozen=True)
class Op:
    name: str
    reads: tuple  # tensors consumed as quantized operands
    writes: tuple = ()
    phase: str = "forward"


@dataclass(frozen=True)
class QuantReusePlan:
    consumers: dict  # tensor -> list of consuming op names
    flagged: frozenset  # tensors quantized once and cached

    def predicted_calls(self, enabled: bool = True) -> int:
        return sum(1 if (enabled and t in self.flagged) else len(c) for t, c in self.consumers.items())

    def keys(self, prefix: str) -> set:
        return {f"{prefix}.{t}" for t in self.flagged}


def plan_quant_reuse(ops: list[Op]) -> QuantReusePlan:
    """Flag every tensor read by two or more ops as quantize-once.

    The op list holds forward ops followed by backward ops, so reading the
    same tensor in both phases (a GEMM input reused by its gradient GEMMs)
    and sharing within one phase are found by the same out-degree count.
    """
    writers: dict = {}
    for op in ops:
        for t in op.writes:
            writers.setdefault(t, []).append(op.name)
    # cycle check over the op dependency graph (op -> ops that read what it writes)
    deps = {op.name: set() for op in ops}
    for op in ops:
        for t in op.reads:
            deps[op.name].update(w for w in writers.get(t, ()) if w != op.name)
        if set(op.reads) & set(op.writes):
            raise ValueError(f"op {op.name!r} reads its own output")
    seen, done = set(), set()

    def visit(n):
        if n in done:
            return
        if n in seen:
            raise ValueError(f"computation graph has a cycle through {n!r}")
        seen.add(n)
        for m in deps[n]:
            visit(m)
        done.add(n)

    for n in deps:
        visit(n)

    consumers: dict = {}
    for op in ops:
        for t in op.reads:
            consumers.setdefault(t, []).append(op.name)
    flagged = frozenset(t for t, c in consumers.items() if len(c) >= 2)
    return QuantReusePlan(consumers, flagged)


def gcn_ops(needs_input_grad: bool = True) -> list[Op]:
    ops = [
        Op("gemm", ("H_in", "W"), ("Hp",)),
        Op("spmm", ("Hp",), ("H_out",)),
        Op("spmm_rev", ("dH_out",), ("dHp",), "backward"),
        Op("gemm_dW", ("H_in", "dHp"), ("dW",), "backward"),
    ]
    if needs_input_grad:
        ops.append(Op("gemm_dH", ("dHp", "W"), ("dH_in",), "backward"))
    return ops


def gat_ops(needs_input_grad: bool = True) -> list[Op]:
    ops = [
        Op("gemm", ("H_in", "W"), ("Hp",)),
        Op("consolidate_src", ("Hp", "a_src"), ("S",)),
        Op("consolidate_dst", ("Hp", "a_dst"), ("D",)),
        Op("sddmm_add", ("S", "D"), ("E",)),
        Op("spmm", ("Hp",), ("H_out",)),
        Op("spmm_rev", ("dH_out",), ("dHp_agg",), "backward"),
        Op("sddmm_dot", ("dH_out", "Hp"), ("d_alpha",), "backward"),
        Op("incidence_src", ("dE",), ("dS",), "backward"),
        Op("incidence_dst", ("dE",), ("dD",), "backward"),
        Op("consolidate_src_dH", ("dS", "a_src"), ("dHp",), "backward"),
        Op("consolidate_dst_dH", ("dD", "a_dst"), ("dHp",), "backward"),
        Op("consolidate_src_da", ("Hp", "dS"), ("da_src",), "backward"),
        Op("consolidate_dst_da", ("Hp", "dD"), ("da_dst",), "backward"),
        Op("gemm_dW", ("H_in", "dHp"), ("dW",), "backward"),
    ]
    if needs_input_grad:
        ops.append(Op("gemm_dH", ("dHp", "W"), ("dH_in",), "backward"))
    return ops


# --- GCN -----------------------------------------------------------------------

def gcn_forward(params: dict, views: GraphViews, H_in: np.ndarray, lc: LayerContext,
                norm: np.ndarray | None = None, k_max: int = DEFAULT_KMAX) -> np.ndarray:
    """``H_out = Â (H_in W)`` with Â the symmetrically normalised adjacency."""
    W = params["W"]
    if H_in.shape[1] != W.shape[0]:
        raise ValueError(f"input width {H_in.shape[1]} does not match W {W.shape}")
    if norm is None:
        norm = gcn_norm(views.edges)
    Hp, s_Hp = lc.gemm("H_in", H_in, "W", W)
    out = spmm_edge_scaled(views.in_csr, norm.astype(Hp.dtype, copy=False), lc.quant("Hp", Hp, s_Hp),
                           k_max=k_max)
    lc.saved.update(H_in=H_in, Hp=Hp, norm=norm)
    return out


def gcn_backward(params: dict, views: GraphViews, lc: LayerContext, dH_out: np.ndarray,
                 needs_input_grad: bool = True, k_max: int = DEFAULT_KMAX) -> dict:
    s = lc.saved
    norm = s["norm"].astype(dH_out.dtype, copy=False)
    dHp = spmm_edge_scaled(views.out_csr, norm, lc.quant("dH_out", dH_out), k_max=k_max)
    dW, _ = lc.gemm("H_in", s["H_in"], "dHp", dHp, a_t=True)
    grads = {"W": dW}
    if needs_input_grad:
        grads["H_in"], _ = lc.gemm("dHp", dHp, "W", params["W"], b_t=True)
    return grads


# --- GAT -------------------------------------------------------------------------

@dataclass
class GatLayerParams:
    W: np.ndarray  # (in_dim, heads * head_dim)
    a_src: np.ndarray  # (heads, head_dim)
    a_dst: np.ndarray
    leaky_slope: float = 0.2

    def __post_init__(self):
        h, d = self.a_src.shape
        if self.a_dst.shape != (h, d) or self.W.shape[1] != h * d:
            raise ValueError("W columns must equal heads * head_dim of the attention vectors")

    @property
    def heads(self) -> int:
        return self.a_src.shape[0]

    @property
    def head_dim(self) -> int:
        return self.a_src.shape[1]

    def as_dict(self) -> dict:
        return {"W": self.W, "a_src": self.a_src, "a_dst": self.a_dst}


def block_diag_heads(a: np.ndarray) -> np.ndarray:
    """(H, D) per-head vectors -> (H*D, H) matrix so ``H' @ M`` gives per-head dots."""
    h, d = a.shape
    M = np.zeros((h * d, h), dtype=a.dtype)
    for i in range(h):
        M[i * d:(i + 1) * d, i] = a[i]
    return M


def _head_diag(M: np.ndarray, h: int, d: int) -> np.ndarray:
    return np.stack([M[i * d:(i + 1) * d, i] for i in range(h)])


def gat_forward(params: GatLayerParams, views: GraphViews, H_in: np.ndarray, lc: LayerContext,
                concat: bool = True, k_max: int = DEFAULT_KMAX,
                quantize_scores: bool = False) -> np.ndarray:
    """Multi-head graph attention: projection, consolidation, scores, softmax, aggregation."""
    if H_in.shape[1] != params.W.shape[0]:
        raise ValueError(f"input width {H_in.shape[1]} does not match W {params.W.shape}")
    if not np.isfinite(H_in).all():
        raise ValueError("non-finite value in layer input")
    h, d = params.heads, params.head_dim
    A_src, A_dst = block_diag_heads(params.a_src), block_diag_heads(params.a_dst)

    Hp, s_Hp = lc.gemm("H_in", H_in, "W", params.W)
    S, s_S = lc.gemm("Hp", Hp, "a_src", A_src)
    D, s_D = lc.gemm("Hp", Hp, "a_dst", A_dst)
    E_pre = sddmm_add(views.out_csr, lc.quant("S", S, s_S), lc.quant("D", D, s_D))
    slope = params.leaky_slope
    mask = np.where(E_pre > 0, 1.0, slope).astype(E_pre.dtype)
    E_act = E_pre * mask
    if quantize_scores and lc.precision.quantized:
        # ablation only: scores entering the softmax pass through the quantizer
        p = lc.precision
        q, p.rng = quantize_tensor(E_act, p.bits, p.rng, rounding=p.rounding, tag=lc.key("E"))
        E_act = (q.values.astype(np.float64) * q.scale).astype(np.float32)
    alpha, denom = segment_softmax(views.in_inc, E_act)
    plan = plan_kernels(h, d, k_max)
    out = spmm_edge_scaled(views.in_csr, alpha, lc.quant("Hp", Hp, s_Hp), plan=plan)
    lc.saved.update(H_in=H_in, Hp=Hp, S=S, D=D, E_pre=E_pre, E_act=E_act, mask=mask,
                    alpha=alpha, denom=denom, A_src=A_src, A_dst=A_dst, concat=concat,
                    kernel_plan=plan)
    if concat:
        return out
    return out.reshape(out.shape[0], h, d).mean(axis=1)


def gat_backward(params: GatLayerParams, views: GraphViews, lc: LayerContext, dH_out: np.ndarray,
                 needs_input_grad: bool = True) -> dict:
    s = lc.saved
    if not s:
        raise ValueError(f"no saved forward state for layer {lc.name!r}")
    h, d = params.heads, params.head_dim
    V = views.num_nodes
    if s["concat"]:
        dOut = dH_out
    else:
        dOut = np.repeat(dH_out[:, None, :] / h, h, axis=1).reshape(V, h * d)
    if dOut.shape != s["Hp"].shape:
        raise ValueError(f"gradient shape {dOut.shape} does not match layer output {s['Hp'].shape}")
    alpha = s["alpha"]
    # each consumer asks for its operand; the reuse plan decides whether that re-quantizes
    dHp_agg = spmm_edge_scaled(views.out_csr, alpha, lc.quant("dH_out", dOut), plan=s["kernel_plan"])
    d_alpha = sddmm_dot(views.out_csr, lc.quant("dH_out", dOut), lc.quant("Hp", s["Hp"]), heads=h)
    dE_act, P = softmax_backward(views.in_inc, alpha, d_alpha.astype(alpha.dtype, copy=False),
                                 views.edges.dst)
    dE = dE_act * s["mask"]
    dS = incidence_spmm(views.out_inc, lc.quant("dE", dE))
    dD = incidence_spmm(views.in_inc, lc.quant("dE", dE))

    c_src, _ = lc.gemm("dS", dS, "a_src", s["A_src"], b_t=True)
    c_dst, _ = lc.gemm("dD", dD, "a_dst", s["A_dst"], b_t=True)
    dHp = dHp_agg + c_src + c_dst
    g_src, _ = lc.gemm("Hp", s["Hp"], "dS", dS, a_t=True)
    g_dst, _ = lc.gemm("Hp", s["Hp"], "dD", dD, a_t=True)
    dW, _ = lc.gemm("H_in", s["H_in"], "dHp", dHp, a_t=True)
    lc.saved.update(dHp_agg=dHp_agg, d_alpha=d_alpha, dE_act=dE_act, P=P, dE=dE, dS=dS, dD=dD)
    grads = {"W": dW, "a_src": _head_diag(g_src, h, d), "a_dst": _head_diag(g_dst, h, d)}
    if needs_input_grad:
        grads["H_in"], _ = lc.gemm("dHp", dHp, "W", params.W, b_t=True)
    return grads


# --- loss and optimiser ----------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per logit row required")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def sgd_update(master: dict, grads: dict, lr: float) -> dict:
    """``W <- W - lr * dW`` on full-precision master weights.

    Weights are quantized only when the next step consumes them, so the
    round-off of each update is carried forward instead of discarded.
    """
    out = {}
    for k, w in master.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {w.shape}")
        out[k] = (w - lr * g).astype(w.dtype)
    return out


class Adam:
    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def update(self, master: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, w in master.items():
            g = grads[k].astype(np.float64)
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = (w - self.lr * mh / (np.sqrt(vh) + self.eps)).astype(w.dtype)
        return out
