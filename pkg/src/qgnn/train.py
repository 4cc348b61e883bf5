"""Two-layer GCN/GAT node classification with optional quantized training."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import instrument
from .data import Dataset
from .graph import GraphViews, gcn_norm
from .layers import (Adam, ForwardContext, GatLayerParams, Precision, cross_entropy, gat_backward,
                     gat_forward, gat_ops, gcn_backward, gcn_forward, gcn_ops, plan_quant_reuse,
                     sgd_update)
from .quant import DEFAULT_THRESHOLD, MAX_BITS, MIN_BITS, BitChoice, select_bits
from .rng import rng_seed
from .sparse import DEFAULT_KMAX

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "gcn"
    precision: str = "fp32"  # fp32 | quant
    bits: int | str = 8  # 2..8 or "auto"
    epochs: int = 200
    lr: float = 0.01
    hidden: int = 128
    heads: int = 4
    seed: int = 0
    leaky_slope: float = 0.2
    k_max: int = DEFAULT_KMAX
    quantize_last: bool = False
    rounding: str = "stochastic"
    optimizer: str = "sgd"
    reuse: bool = True
    quantize_scores: bool = False
    bits_threshold: float = DEFAULT_THRESHOLD

    def validate(self) -> "TrainConfig":
        if self.model not in ("gcn", "gat"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.precision not in ("fp32", "quant"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.bits == "auto":
            if self.precision != "quant":
                raise ConfigError("bits=auto requires precision=quant")
        elif not (isinstance(self.bits, int) and MIN_BITS <= self.bits <= MAX_BITS):
            raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}] or 'auto'")
        if self.rounding not in ("stochastic", "nearest"):
            raise ConfigError(f"unknown rounding {self.rounding!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.hidden < 1 or self.heads < 1 or self.k_max < 1 or self.lr < 0:
            raise ConfigError("epochs, hidden, heads and k_max must be positive; lr non-negative")
        if self.model == "gat" and self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} must be divisible by {self.heads} heads")
        return self


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out)).astype(np.float32)


class GNNModel:
    """Hidden layer -> ReLU -> output layer; parameters are full-precision master copies."""

    def __init__(self, kind: str, in_dim: int, hidden: int, classes: int, heads: int = 1,
                 leaky_slope: float = 0.2, k_max: int = DEFAULT_KMAX, seed: int = 0):
        self.kind = kind
        self.k_max = k_max
        rng = np.random.default_rng([seed, 2])
        if kind == "gcn":
            self.params = [{"W": glorot(rng, in_dim, hidden)}, {"W": glorot(rng, hidden, classes)}]
        elif kind == "gat":
            hd = hidden // heads
            self.params = [
                {"W": glorot(rng, in_dim, hidden), "a_src": glorot(rng, hd, 1, (heads, hd)),
                 "a_dst": glorot(rng, hd, 1, (heads, hd))},
                {"W": glorot(rng, hidden, heads * classes), "a_src": glorot(rng, classes, 1, (heads, classes)),
                 "a_dst": glorot(rng, classes, 1, (heads, classes))},
            ]
        else:
            raise ConfigError(f"unknown model {kind!r}")
        self.leaky_slope = leaky_slope
        self._norm = None

    def layer_ops(self, i: int):
        ops = gcn_ops if self.kind == "gcn" else gat_ops
        return ops(needs_input_grad=i > 0)

    def reuse_keys(self, precisions) -> set:
        keys = set()
        for i, p in enumerate(precisions):
            if p.quantized:
                keys |= plan_quant_reuse(self.layer_ops(i)).keys(f"l{i}")
        return keys

    def predicted_quantize_calls(self, precisions, reuse: bool = True) -> int:
        return sum(plan_quant_reuse(self.layer_ops(i)).predicted_calls(reuse)
                   for i, p in enumerate(precisions) if p.quantized)

    def _gat(self, i):
        p = self.params[i]
        return GatLayerParams(p["W"], p["a_src"], p["a_dst"], self.leaky_slope)

    def layer_forward(self, i, views, H, lc, quantize_scores=False):
        if self.kind == "gcn":
            if self._norm is None or self._norm.size != views.num_edges:
                self._norm = gcn_norm(views.edges)
            return gcn_forward(self.params[i], views, H, lc, norm=self._norm, k_max=self.k_max)
        return gat_forward(self._gat(i), views, H, lc, concat=(i == 0), k_max=self.k_max,
                           quantize_scores=quantize_scores)

    def forward(self, views: GraphViews, X: np.ndarray, ctx: ForwardContext, precisions,
                quantize_scores: bool = False) -> np.ndarray:
        lc0 = ctx.layer("l0", precisions[0])
        pre = self.layer_forward(0, views, X, lc0, quantize_scores)
        lc0.saved["pre_act"] = pre
        h = np.maximum(pre, 0)
        lc1 = ctx.layer("l1", precisions[1])
        return self.layer_forward(1, views, h, lc1, quantize_scores)

    def backward(self, views: GraphViews, ctx: ForwardContext, dlogits: np.ndarray) -> list[dict]:
        grads = [None, None]
        for i in (1, 0):
            lc = ctx.layers[f"l{i}"]
            if self.kind == "gcn":
                g = gcn_backward(self.params[i], views, lc, dlogits, needs_input_grad=i > 0,
                                 k_max=self.k_max)
            else:
                g = gat_backward(self._gat(i), views, lc, dlogits, needs_input_grad=i > 0)
            if i > 0:
                dlogits = g.pop("H_in") * (ctx.layers["l0"].saved["pre_act"] > 0)
            grads[i] = g
        return grads


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        return float("nan")
    return float((logits.argmax(axis=1) == labels).mean())


def make_precisions(cfg: TrainConfig, bits: int | None):
    if cfg.precision == "fp32":
        return [Precision(), Precision()]
    rng = rng_seed(cfg.seed)
    rounding = cfg.rounding
    hidden = Precision(bits, rng, rounding)
    # the layer feeding the softmax stays full precision unless the ablation asks otherwise
    last = Precision(bits, rng, rounding) if cfg.quantize_last else Precision()
    return [hidden, last]


def derive_bits(cfg: TrainConfig, ds: Dataset, views: GraphViews | None = None) -> BitChoice:
    """Error_X sweep on the first layer's output with the initial weights."""
    views = views or GraphViews.build(ds.edges)
    model = GNNModel(cfg.model, ds.features.shape[1], cfg.hidden, ds.num_classes, cfg.heads,
                     cfg.leaky_slope, cfg.k_max, cfg.seed)
    ctx = ForwardContext()
    out = model.layer_forward(0, views, ds.features, ctx.layer("l0", Precision()))
    return select_bits(out, cfg.bits_threshold)


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    quantize_calls: int
    random_access_bytes: int
    elapsed: dict = field(default_factory=dict)


def train(cfg: TrainConfig, ds: Dataset, emit=None) -> list[dict]:
    """Full-batch training; returns per-epoch records followed by a summary record.

    ``emit`` (optional) is called with each record as it is produced. Every
    field except ``elapsed`` is a deterministic function of the config and data.
    """
    cfg.validate()
    views = GraphViews.build(ds.edges)
    records = []
    choice = None
    bits = None
    if cfg.precision == "quant":
        if cfg.bits == "auto":
            choice = derive_bits(cfg, ds, views)
            bits = choice.bits
            log.info("auto bit selection: %d bits (Error_X table %s)", bits, choice.errors)
        else:
            bits = cfg.bits
    model = GNNModel(cfg.model, ds.features.shape[1], cfg.hidden, ds.num_classes, cfg.heads,
                     cfg.leaky_slope, cfg.k_max, cfg.seed)
    precisions = make_precisions(cfg, bits)
    reuse_keys = model.reuse_keys(precisions) if cfg.reuse else None
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else None
    X, y = ds.features, ds.labels
    best = None
    for epoch in range(cfg.epochs):
        rec = instrument.Recorder()
        with instrument.recording(rec):
            ctx = ForwardContext(reuse=reuse_keys)
            with instrument.timed("step"):
                logits = model.forward(views, X, ctx, precisions, cfg.quantize_scores)
                loss, dl = cross_entropy(logits[ds.train_idx], y[ds.train_idx])
                dlogits = np.zeros_like(logits)
                dlogits[ds.train_idx] = dl
                grads = model.backward(views, ctx, dlogits)
                if opt is not None:
                    model.params = adam_step(opt, model.params, grads)
                else:
                    model.params = [sgd_update(p, g, cfg.lr) for p, g in zip(model.params, grads)]
        calls, nbytes = rec.total_quantize_calls, rec.total_random_bytes
        with instrument.recording(rec):
            with instrument.timed("eval"):
                logits = model.forward(views, X, ForwardContext(), precisions, cfg.quantize_scores)
        r = MetricsRecord(epoch, loss, accuracy(logits[ds.train_idx], y[ds.train_idx]),
                          accuracy(logits[ds.val_idx], y[ds.val_idx]),
                          accuracy(logits[ds.test_idx], y[ds.test_idx]),
                          calls, nbytes, {k: round(v, 6) for k, v in rec.elapsed.items()})
        d = asdict(r)
        records.append(d)
        if emit:
            emit(d)
        if best is None or r.val_acc > best.val_acc:
            best = r
    summary = {
        "summary": True,
        "model": cfg.model,
        "precision": cfg.precision,
        "bits": bits,
        "epochs": cfg.epochs,
        "best_epoch": best.epoch,
        "best_val_acc": best.val_acc,
        "test_acc_at_best_val": best.test_acc,
        "final_test_acc": records[-1]["test_acc"],
        "final_loss": records[-1]["loss"],
    }
    if choice is not None:
        summary["error_table"] = {str(k): v for k, v in choice.errors.items()}
        summary["bits_threshold_met"] = choice.satisfied
    records.append(summary)
    if emit:
        emit(summary)
    return records


def adam_step(opt: Adam, params: list[dict], grads: list[dict]) -> list[dict]:
    # one update per step over all layers, so the bias-correction counter advances once
    flat_p = {f"{i}.{k}": v for i, p in enumerate(params) for k, v in p.items()}
    flat_g = {f"{i}.{k}": v for i, g in enumerate(grads) for k, v in g.items()}
    new = opt.update(flat_p, flat_g)
    return [{k: new[f"{i}.{k}"] for k in p} for i, p in enumerate(params)]


class JsonLines:
    def __init__(self, fh):
        self.fh = fh

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()


def run_train(cfg: TrainConfig, graph_path, features_path, labels_path, split_path=None,
              report=None) -> list[dict]:
    from .data import load_dataset

    ds = load_dataset(graph_path, features_path, labels_path, split_path, seed=cfg.seed)
    t0 = time.perf_counter()
    records = train(cfg, ds, emit=JsonLines(report) if report is not None else None)
    log.info("trained %d epochs in %.1fs", cfg.epochs, time.perf_counter() - t0)
    return records
