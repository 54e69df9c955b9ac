"""Dual-channel, dual-polarity Transformer backbone with signed readout."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .tokens import CHANNELS, TokenSequences

VARIANTS = ("full", "N", "C", "NE", "NN")
CHECKPOINT_MAGIC = b"GCM1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_dim: int
    num_classes: int
    hidden_dim: int = 128
    num_layers: int = 1
    num_heads: int = 1
    activation: str = "gelu"
    layer_norm: str = "off"
    dropout: float = 0.0
    classifier_layers: int = 2
    alpha: float = 0.5
    variant: str = "full"
    share_encoder_across_polarity: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError("activation must be 'gelu' or 'relu'")
        if self.layer_norm not in ("off", "pre"):
            raise ValueError("layer_norm must be 'off' or 'pre'")


def build_inputs(node: int, tokens: TokenSequences, x_attr, x_topo, include_negatives=True):
    """Raw attribute and topology sequences for one node: [node, positives..., negatives...]."""
    a, t = build_batch(np.array([node]), tokens, x_attr, x_topo, include_negatives)
    return a[0], t[0]


def build_batch(nodes, tokens: TokenSequences, x_attr, x_topo, include_negatives=True):
    nodes = np.asarray(nodes, dtype=np.int64)
    n = len(x_attr)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
        raise IndexError("node id out of range")
    out = []
    for ch, x in (("attr", x_attr), ("topo", x_topo)):
        parts = [nodes[:, None], tokens.positives(ch)[nodes]]
        if include_negatives:
            parts.append(tokens.negatives(ch)[nodes])
        out.append(x[np.concatenate(parts, axis=1)])
    return out[0], out[1]


def attention_head(h, w_q, w_k, w_v, dropout: nn.Module | None = None, return_weights=False):
    """Softmax(Q K^T / sqrt(d_k)) V for one head; ``h`` is (..., s, d_in)."""
    q, k, v = h @ w_q, h @ w_k, h @ w_v
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(w_q.shape[-1]), dim=-1)
    out = (dropout(weights) if dropout is not None else weights) @ v
    return (out, weights) if return_weights else out


def signed_readout(p, n):
    return p[..., 0, :] - n[..., 0, :]


def fuse(h_attr, h_topo, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return alpha * h_attr + (1.0 - alpha) * h_topo


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)


class TransformerLayer(nn.Module):
    def __init__(self, d: int, heads: int, activation="gelu", layer_norm="off", dropout=0.0):
        super().__init__()
        d_k = d // heads
        self.w_q = nn.Parameter(torch.empty(heads, d, d_k))
        self.w_k = nn.Parameter(torch.empty(heads, d, d_k))
        self.w_v = nn.Parameter(torch.empty(heads, d, d_k))
        self.w_o = nn.Parameter(torch.empty(heads * d_k, d))
        self.ffn_in = nn.Linear(d, 2 * d)
        self.ffn_out = nn.Linear(2 * d, d)
        self.act = nn.GELU() if activation == "gelu" else nn.ReLU()
        self.drop = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d) if layer_norm == "pre" else None
        self.norm2 = nn.LayerNorm(d) if layer_norm == "pre" else None
        bound = 1.0 / math.sqrt(d)
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.uniform_(w, -bound, bound)

    def msa(self, h, weights_out: list | None = None):
        heads = []
        for m in range(self.w_q.shape[0]):
            out, w = attention_head(h, self.w_q[m], self.w_k[m], self.w_v[m], self.drop, True)
            heads.append(out)
            if weights_out is not None:
                weights_out.append(w)
        return torch.cat(heads, dim=-1) @ self.w_o

    def ffn(self, h):
        return self.ffn_out(self.drop(self.act(self.ffn_in(h))))

    def forward(self, h, weights_out: list | None = None):
        x = self.norm1(h) if self.norm1 is not None else h
        h = self.msa(x, weights_out) + h
        x = self.norm2(h) if self.norm2 is not None else h
        return self.ffn(x) + h


class Encoder(nn.Module):
    def __init__(self, d, layers, heads, activation, layer_norm, dropout):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerLayer(d, heads, activation, layer_norm, dropout) for _ in range(layers)
        )

    def forward(self, h, weights_out: list | None = None):
        for layer in self.layers:
            h = layer(h, weights_out)
        return h


@dataclass
class ForwardTrace:
    """Per-batch activations; P/N/H keyed by channel ('attr', 'topo')."""

    P: dict
    N: dict | None
    H: dict
    z: torch.Tensor
    logits: torch.Tensor
    attention: list = field(default_factory=list)


class GCFormer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.proj = nn.ParameterDict({ch: nn.Parameter(torch.empty(cfg.in_dim, d)) for ch in CHANNELS})
        polarities = ("pos",) if cfg.share_encoder_across_polarity else ("pos", "neg")
        self.encoders = nn.ModuleDict(
            {
                f"{ch}_{pol}": Encoder(d, cfg.num_layers, cfg.num_heads, cfg.activation, cfg.layer_norm, cfg.dropout)
                for ch in CHANNELS
                for pol in polarities
            }
        )
        self.virtual_tokens = nn.Parameter(torch.empty(len(CHANNELS), d))
        layers = []
        for _ in range(cfg.classifier_layers - 1):
            layers += [nn.Linear(d, d), nn.GELU() if cfg.activation == "gelu" else nn.ReLU(), nn.Dropout(cfg.dropout)]
        layers.append(nn.Linear(d, cfg.num_classes))
        self.classifier = nn.Sequential(*layers)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name == "virtual_tokens":
                with torch.no_grad():
                    p.copy_(0.02 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
            elif ".norm" in name:
                nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
            elif name.endswith("bias"):
                # nn.Linear bias: fan_in is the owning weight's input width
                owner = self.get_submodule(name.rsplit(".", 1)[0])
                _uniform_(p, owner.in_features, gen)
            elif p.dim() == 3:
                _uniform_(p, p.shape[1], gen)
            elif name.startswith("proj") or name.endswith("w_o"):
                _uniform_(p, p.shape[0], gen)
            else:  # nn.Linear weight, stored out x in
                _uniform_(p, p.shape[1], gen)

    def encoder(self, channel: str, polarity: str) -> Encoder:
        key = f"{channel}_{polarity}"
        return self.encoders[key] if key in self.encoders else self.encoders[f"{channel}_pos"]

    def encode_streams(self, seq_attr, seq_topo, p_k: int, variant: str | None = None, attention: list | None = None):
        """Project both channels, split positives/negatives, prepend virtual tokens, encode."""
        variant = variant or self.cfg.variant
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        P, N, H = {}, ({} if variant != "N" else None), {}
        for idx, (ch, seq) in enumerate((("attr", seq_attr), ("topo", seq_topo))):
            h = seq @ self.proj[ch]
            P[ch] = self.encoder(ch, "pos")(h[..., : 1 + p_k, :], attention)
            if variant == "N":
                H[ch] = P[ch][..., 0, :]
                continue
            neg = h[..., 1 + p_k:, :]
            vt = self.virtual_tokens[idx].expand(*neg.shape[:-2], 1, neg.shape[-1])
            neg = torch.cat([vt, neg], dim=-2)
            N[ch] = neg if variant == "NN" else self.encoder(ch, "neg")(neg, attention)
            H[ch] = signed_readout(P[ch], N[ch]) if variant in ("full", "C") else P[ch][..., 0, :]
        return P, N, H

    def classify(self, z):
        return self.classifier(z)

    def forward(self, seq_attr, seq_topo, p_k: int, variant: str | None = None, return_attention=False) -> ForwardTrace:
        attention = [] if return_attention else None
        P, N, H = self.encode_streams(seq_attr, seq_topo, p_k, variant, attention)
        z = fuse(H["attr"], H["topo"], self.cfg.alpha)
        return ForwardTrace(P, N, H, z, self.classify(z), attention or [])


def gradients(model: nn.Module, loss: torch.Tensor) -> dict:
    """d loss / d parameter for every named parameter; unused parameters get zeros."""
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def save_checkpoint(model: GCFormer, path) -> None:
    """GCM1 layout: magic, u32 version, u32 len + JSON config, u32 count, then per
    parameter (state_dict order): u16 len + name, u32 ndim, u32 dims, f32 data, all LE."""
    echo = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack(f"<I{t.dim()}I", t.dim(), *t.shape))
            fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path, dtype=torch.float32) -> GCFormer:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GCM1 checkpoint")
    version, n_echo = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig(**json.loads(data[off:off + n_echo]))
    off += n_echo
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.copy())
    model = GCFormer(cfg).to(dtype)
    model.load_state_dict(state)
    return model
