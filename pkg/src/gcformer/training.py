"""Losses, AdamW training loop with early stopping, evaluation and ablation variants."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .graph_core import Graph, SplitMask, make_splits, normalize_adjacency, pca_reduce
from .model import VARIANTS, ForwardTrace, GCFormer, ModelConfig, build_batch
from .tokens import TokenSequences, generate_tokens, propagate_features

log = logging.getLogger(__name__)

DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass
class TrainConfig:
    k: int = 3
    p_k: int = 5
    n_k: int = 5
    alpha: float = 0.5
    beta: float = 0.1
    tau: float = 0.5
    hidden_dim: int = 128
    num_layers: int = 1
    num_heads: int = 1
    lr: float = 0.005
    weight_decay: float = 1e-5
    dropout: float = 0.1
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    variant: str = "full"
    precision: str = "f32"
    activation: str = "gelu"
    layer_norm: str = "off"
    classifier_layers: int = 2
    share_encoder_across_polarity: bool = False
    infonce_canonical: bool = False
    cl_similarity: str = "cosine"
    cl_on_unlabeled: bool = False
    resample_negatives_each_epoch: bool = False
    early_stop_metric: str = "acc"
    pca_dim: int = 0
    pca_fit_scope: str = "all_nodes"
    deterministic: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.precision not in DTYPES:
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.cl_similarity not in ("dot", "cosine"):
            raise ValueError("cl_similarity must be 'dot' or 'cosine'")
        if self.early_stop_metric not in ("acc", "loss"):
            raise ValueError("early_stop_metric must be 'acc' or 'loss'")
        if self.pca_fit_scope not in ("all_nodes", "train_only"):
            raise ValueError("pca_fit_scope must be 'all_nodes' or 'train_only'")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.field_names())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        types = {f.name: f.type for f in fields(cls)}
        coerced = {}
        for key, value in d.items():
            kind = types[key]
            if kind == "bool" and isinstance(value, str):
                value = value.strip().lower() in ("1", "true", "yes", "on")
            elif kind in ("int", "float"):
                value = {"int": int, "float": float}[kind](value)
            coerced[key] = value
        return cls(**coerced)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**asdict(self), **changes})

    def model_config(self, in_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            in_dim=in_dim,
            num_classes=num_classes,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            activation=self.activation,
            layer_norm=self.layer_norm,
            dropout=self.dropout,
            classifier_layers=self.classifier_layers,
            alpha=self.alpha,
            variant=self.variant,
            share_encoder_across_polarity=self.share_encoder_across_polarity,
        )


# --- losses -----------------------------------------------------------------


def contrastive_loss(trace: ForwardTrace, tau: float, reduction="mean", canonical=False, similarity="dot"):
    """Per-channel: -log exp(P0.mean(P1..)/tau) / sum_j exp(P0.N_j/tau), summed over channels.

    The denominator holds negatives only unless ``canonical`` adds the positive term.
    ``similarity="cosine"`` L2-normalizes P0, the positive centre and each N_j first;
    with raw dot products the negatives-only form is unbounded below.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if trace.N is None:
        raise ValueError("contrastive loss needs negative streams")
    total = 0.0
    for ch in ("attr", "topo"):
        p, n = trace.P[ch], trace.N[ch]
        anchor = p[..., 0, :]
        centre = p[..., 1:, :].mean(dim=-2)
        negs = n[..., 1:, :]
        if similarity == "cosine":
            anchor, centre, negs = (F.normalize(v, dim=-1) for v in (anchor, centre, negs))
        pos = (anchor * centre).sum(-1) / tau
        neg = torch.einsum("...d,...jd->...j", anchor, negs) / tau
        if canonical:
            neg = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
        total = total + (torch.logsumexp(neg, dim=-1) - pos)
    if reduction == "none":
        return total
    return total.mean()


def cross_entropy_loss(logits, labels, mask=None):
    """Mean negative log-likelihood over labelled nodes (``mask`` selects them)."""
    if mask is not None:
        logits, labels = logits[mask], labels[mask]
    if logits.shape[0] == 0:
        raise ValueError("no labelled node in batch")
    return F.cross_entropy(logits, labels, reduction="mean")


def total_loss(ce, cl, beta: float):
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return ce + beta * cl


def apply_variant(variant: str, beta: float) -> tuple[float, bool]:
    """Effective contrastive weight and whether negative sequences are built."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    effective_beta = 0.0 if variant in ("N", "C") else beta
    return effective_beta, variant != "N"


def objective(model: GCFormer, trace: ForwardTrace, labels, cfg: TrainConfig, label_mask=None):
    """Return (total, ce, cl) for one batch under ``cfg``'s variant."""
    beta, _ = apply_variant(cfg.variant, cfg.beta)
    ce = cross_entropy_loss(trace.logits, labels, label_mask)
    if trace.N is None:
        cl = torch.zeros((), dtype=ce.dtype)
    else:
        per_node = contrastive_loss(trace, cfg.tau, "none", cfg.infonce_canonical, cfg.cl_similarity)
        if not cfg.cl_on_unlabeled and label_mask is not None:
            per_node = per_node[label_mask]
        cl = per_node.mean()
    return total_loss(ce, cl, beta), ce, cl


# --- data preparation ---------------------------------------------------------


@dataclass
class NodeData:
    x_attr: np.ndarray
    x_topo: np.ndarray
    labels: np.ndarray
    num_classes: int


def prepare_node_data(g: Graph, cfg: TrainConfig, splits: SplitMask | None = None, adj=None) -> NodeData:
    x = g.x_attr
    if cfg.pca_dim:
        fit_rows = splits.train if (cfg.pca_fit_scope == "train_only" and splits is not None) else None
        x = pca_reduce(x, cfg.pca_dim, fit_rows)
    if adj is None:
        adj = normalize_adjacency(g)
    return NodeData(np.asarray(x, dtype=np.float64), propagate_features(adj, x, cfg.k), g.labels, g.c)


def token_graph(g: Graph, data: NodeData) -> Graph:
    """``g`` with features replaced by the (possibly PCA-reduced) training features."""
    if data.x_attr is g.x_attr:
        return g
    return Graph(g.n, g.indptr, g.indices, data.x_attr, g.labels, g.c)


# --- training ---------------------------------------------------------------


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int, mode: str = "max"):
        self.patience = patience
        self.sign = 1.0 if mode == "max" else -1.0
        self.best = -np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        score = self.sign * value
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


def _batch_tensors(nodes, tokens, data: NodeData, include_negatives, dtype):
    a, t = build_batch(nodes, tokens, data.x_attr, data.x_topo, include_negatives)
    return torch.as_tensor(a, dtype=dtype), torch.as_tensor(t, dtype=dtype)


@torch.no_grad()
def predict(model: GCFormer, data: NodeData, tokens: TokenSequences, nodes, batch_size=1024) -> np.ndarray:
    """Logits for ``nodes`` in eval mode."""
    model.eval()
    dtype = next(model.parameters()).dtype
    _, with_neg = apply_variant(model.cfg.variant, 0.0)
    out = []
    nodes = np.asarray(nodes, dtype=np.int64)
    for start in range(0, len(nodes), batch_size):
        chunk = nodes[start:start + batch_size]
        a, t = _batch_tensors(chunk, tokens, data, with_neg, dtype)
        out.append(model(a, t, tokens.p_k).logits.numpy())
    return np.concatenate(out) if out else np.zeros((0, data.num_classes))


def evaluate(model: GCFormer, data: NodeData, tokens: TokenSequences, nodes) -> float:
    """Accuracy over ``nodes``; argmax ties resolve to the smaller class index."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("empty evaluation mask")
    pred = predict(model, data, tokens, nodes).argmax(axis=1)
    return float((pred == data.labels[nodes]).mean())


def _val_loss(model, data, tokens, nodes) -> float:
    logits = torch.as_tensor(predict(model, data, tokens, nodes))
    return float(F.cross_entropy(logits, torch.as_tensor(data.labels[nodes])))


@dataclass
class FitResult:
    model: GCFormer
    history: list
    best_epoch: int


def fit(
    data: NodeData,
    tokens: TokenSequences,
    model: GCFormer,
    cfg: TrainConfig,
    splits: SplitMask,
    on_epoch=None,
) -> FitResult:
    """Mini-batch AdamW training; returns the parameters of the best validation epoch."""
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    dtype = DTYPES[cfg.precision]
    model.to(dtype)
    _, with_neg = apply_variant(cfg.variant, cfg.beta)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    labels = torch.as_tensor(data.labels, dtype=torch.long)
    is_train = np.zeros(len(data.labels), dtype=bool)
    is_train[splits.train] = True
    pool = np.arange(len(data.labels)) if cfg.cl_on_unlabeled else splits.train

    stopper = EarlyStopper(cfg.patience, "max" if cfg.early_stop_metric == "acc" else "min")
    best_state = copy.deepcopy(model.state_dict())
    history = []
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        if cfg.resample_negatives_each_epoch and epoch > 0:
            tokens = tokens.with_negatives(cfg.seed * 100003 + epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(pool)
        model.train()
        sums = np.zeros(3)
        count = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            nodes = order[start:start + cfg.batch_size]
            label_mask = torch.as_tensor(is_train[nodes])
            if not label_mask.any():
                continue
            a, t = _batch_tensors(nodes, tokens, data, with_neg, dtype)
            trace = model(a, t, tokens.p_k)
            loss, ce, cl = objective(model, trace, labels[nodes], cfg, label_mask)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            b = len(nodes)
            sums += b * np.array([loss.item(), ce.item(), cl.item()])
            count += b
        val_acc = evaluate(model, data, tokens, splits.val)
        test_acc = evaluate(model, data, tokens, splits.test)
        monitor = val_acc if cfg.early_stop_metric == "acc" else _val_loss(model, data, tokens, splits.val)
        row = {
            "epoch": epoch,
            "train_loss": sums[0] / max(count, 1),
            "ce": sums[1] / max(count, 1),
            "cl": sums[2] / max(count, 1),
            "val_acc": val_acc,
            "test_acc": test_acc,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        stop = stopper.step(monitor, epoch)
        if stopper.improved_last:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    model.load_state_dict(best_state)
    return FitResult(model, history, stopper.best_epoch)


HISTORY_FIELDS = ("epoch", "train_loss", "ce", "cl", "val_acc", "test_acc", "wall_ms")


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        w.writerows(history)


@dataclass
class RunOutput:
    test_acc: float
    val_acc: float
    tokens: TokenSequences
    fit: FitResult


def train_once(g: Graph, cfg: TrainConfig, splits: SplitMask | None = None, adj=None, tokens=None) -> RunOutput:
    """Splits, tokens, model init, fit and test evaluation for one seed."""
    adj = normalize_adjacency(g) if adj is None else adj
    splits = make_splits(g, cfg.seed) if splits is None else splits
    data = prepare_node_data(g, cfg, splits, adj)
    if tokens is None:
        tokens = generate_tokens(token_graph(g, data), adj, cfg.k, cfg.p_k, cfg.n_k, cfg.seed)
    model = GCFormer(cfg.model_config(data.x_attr.shape[1], data.num_classes), seed=cfg.seed)
    result = fit(data, tokens, model, cfg, splits)
    return RunOutput(
        test_acc=evaluate(result.model, data, tokens, splits.test),
        val_acc=evaluate(result.model, data, tokens, splits.val),
        tokens=tokens,
        fit=result,
    )

