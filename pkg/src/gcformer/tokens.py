"""Hybrid positive/negative token generation in attribute and topology spaces."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph_core import Graph, normalize_adjacency

TOKEN_MAGIC = b"GCT1"
CHANNELS = ("attr", "topo")

# Above this node count similarities are computed in row panels instead of one n x n block.
DENSE_LIMIT = 4096
PANEL_ROWS = 1024
TIE_DECIMALS = 12


def propagate_features(adj: sp.spmatrix, x: np.ndarray, k: int) -> np.ndarray:
    """Return adj^k @ x via k sparse-dense products."""
    if k < 0:
        raise ValueError("propagation step k must be >= 0")
    out = np.asarray(x, dtype=np.float64)
    for _ in range(k):
        out = adj @ out
    return np.asarray(out)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    # zero rows stay zero, so their cosine with anything is 0
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cosine_scores(x: np.ndarray, rows=None) -> np.ndarray:
    """Cosine similarities of ``rows`` (default: all) against every node."""
    u = _unit_rows(x)
    sel = u if rows is None else u[rows]
    return np.clip(sel @ u.T, -1.0, 1.0)


def _topk_row(scores: np.ndarray, exclude: int, p_k: int) -> np.ndarray:
    # scores equal up to rounding noise count as ties, which go to the smaller id
    scores = np.round(scores, TIE_DECIMALS)
    scores[exclude] = -np.inf
    n = len(scores)
    thresh = np.partition(scores, n - p_k)[n - p_k]
    cand = np.flatnonzero(scores >= thresh)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:p_k]]


def cosine_topk(features: np.ndarray, i: int, p_k: int) -> np.ndarray:
    """Ids j != i with the ``p_k`` largest cosine similarities to node i.

    Descending similarity; ties go to the smaller id.
    """
    n = len(features)
    if p_k >= n:
        raise ValueError(f"p_k={p_k} must be < n={n}")
    return _topk_row(cosine_scores(features, [i])[0], i, p_k)


def topk_all(features: np.ndarray, p_k: int, panel_rows: int | None = None) -> np.ndarray:
    """Top-``p_k`` cosine neighbours for every node, computed in row panels."""
    n = len(features)
    if p_k >= n:
        raise ValueError(f"p_k={p_k} must be < n={n}")
    if panel_rows is None:
        panel_rows = n if n <= DENSE_LIMIT else PANEL_ROWS
    u = _unit_rows(features)
    out = np.empty((n, p_k), dtype=np.int64)
    for start in range(0, n, panel_rows):
        stop = min(start + panel_rows, n)
        panel = np.clip(u[start:stop] @ u.T, -1.0, 1.0)
        for r, i in enumerate(range(start, stop)):
            out[i] = _topk_row(panel[r], i, p_k)
    return out


def _node_rng(seed: int, node: int, channel: int) -> np.random.Generator:
    return np.random.default_rng([seed, channel, node])


def sample_negatives(n: int, i: int, positives, n_k: int, seed: int, channel: int = 0) -> np.ndarray:
    """Uniformly draw ``n_k`` distinct ids from all nodes minus ``positives`` and ``i``."""
    excluded = np.unique(np.append(np.asarray(positives, dtype=np.int64), i))
    pool = n - len(excluded)
    if n_k > pool:
        raise ValueError(f"cannot sample n_k={n_k} negatives from a remainder of {pool}")
    draws = _node_rng(seed, i, channel).choice(pool, size=n_k, replace=False)
    # map rank r in the remainder to its node id: skip every excluded id <= it
    shift = excluded - np.arange(len(excluded))
    return draws + np.searchsorted(shift, draws, side="right")


@dataclass(frozen=True)
class TokenSequences:
    """Per-channel positive (n x p_k) and negative (n x n_k) id tables."""

    pos_attr: np.ndarray
    neg_attr: np.ndarray
    pos_topo: np.ndarray
    neg_topo: np.ndarray

    @property
    def n(self) -> int:
        return self.pos_attr.shape[0]

    @property
    def p_k(self) -> int:
        return self.pos_attr.shape[1]

    @property
    def n_k(self) -> int:
        return self.neg_attr.shape[1]

    def positives(self, channel: str) -> np.ndarray:
        return self.pos_attr if channel == "attr" else self.pos_topo

    def negatives(self, channel: str) -> np.ndarray:
        return self.neg_attr if channel == "attr" else self.neg_topo

    def to_bytes(self) -> bytes:
        head = TOKEN_MAGIC + struct.pack("<QII", self.n, self.p_k, self.n_k)
        body = []
        for pos, neg in ((self.pos_attr, self.neg_attr), (self.pos_topo, self.neg_topo)):
            body.append(np.concatenate([pos, neg], axis=1).astype("<u4").tobytes())
        return head + b"".join(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenSequences":
        if data[:4] != TOKEN_MAGIC:
            raise ValueError("not a token cache (bad magic)")
        n, p_k, n_k = struct.unpack_from("<QII", data, 4)
        width = p_k + n_k
        ids = np.frombuffer(data, dtype="<u4", offset=20).astype(np.int64)
        if ids.size != 2 * n * width:
            raise ValueError("token cache truncated")
        attr, topo = ids.reshape(2, n, width)
        return cls(attr[:, :p_k], attr[:, p_k:], topo[:, :p_k], topo[:, p_k:])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TokenSequences":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def with_negatives(self, seed: int) -> "TokenSequences":
        """Same positives, negatives redrawn under a new seed."""
        return TokenSequences(
            self.pos_attr,
            _negatives_for(self.pos_attr, self.n_k, seed, 0),
            self.pos_topo,
            _negatives_for(self.pos_topo, self.n_k, seed, 1),
        )


def _negatives_for(positives: np.ndarray, n_k: int, seed: int, channel: int) -> np.ndarray:
    n = len(positives)
    return np.stack(
        [sample_negatives(n, i, positives[i], n_k, seed, channel) for i in range(n)]
    ).reshape(n, n_k)


def topology_features(g: Graph, k: int, adj=None) -> np.ndarray:
    if adj is None:
        adj = normalize_adjacency(g)
    return propagate_features(adj, g.x_attr, k)


def generate_tokens(
    g: Graph, adj, k: int, p_k: int, n_k: int, seed: int, panel_rows: int | None = None
) -> TokenSequences:
    if p_k < 1 or n_k < 0:
        raise ValueError("need p_k >= 1 and n_k >= 0")
    if p_k + n_k > g.n - 1:
        raise ValueError(f"p_k + n_k = {p_k + n_k} exceeds the {g.n - 1} candidate nodes")
    x_topo = propagate_features(adj, g.x_attr, k)
    pos_attr = topk_all(g.x_attr, p_k, panel_rows)
    pos_topo = topk_all(x_topo, p_k, panel_rows)
    return TokenSequences(
        pos_attr,
        _negatives_for(pos_attr, n_k, seed, 0),
        pos_topo,
        _negatives_for(pos_topo, n_k, seed, 1),
    )
