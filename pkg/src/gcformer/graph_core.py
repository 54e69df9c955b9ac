"""Graph storage, normalization, homophily, splits, PCA, SBM generation and file I/O."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

FEATURE_MAGIC = b"GCF1"


class GraphFormatError(ValueError):
    """Malformed graph input; the message names the file and line."""


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph with CSR adjacency (both directions stored)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    x_attr: np.ndarray
    labels: np.ndarray
    c: int = field(default=-1)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.c < 0:
            object.__setattr__(self, "c", int(labels.max()) + 1 if labels.size else 0)
        if self.indptr.shape != (self.n + 1,):
            raise ValueError("indptr must have n+1 entries")
        if self.x_attr.shape[0] != self.n or labels.shape != (self.n,):
            raise ValueError("feature/label row count does not match n")
        if labels.size and (labels.min() < 0 or labels.max() >= self.c):
            raise ValueError("labels must lie in [0, c)")
        missing = np.setdiff1d(np.arange(self.c), labels)
        if missing.size:
            raise ValueError(f"label {int(missing[0])} never occurs")

    @classmethod
    def from_edges(cls, n, edges, x_attr, labels, c=-1) -> "Graph":
        """Build from an iterable of (u, v) pairs; symmetrizes, dedups, drops self-loops."""
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError("node id out of range")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]])
        adj = sp.csr_matrix(
            (np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n)
        )
        adj.sum_duplicates()
        adj.sort_indices()
        return cls(
            n=int(n),
            indptr=adj.indptr.astype(np.int64),
            indices=adj.indices.astype(np.int64),
            x_attr=np.asarray(x_attr),
            labels=labels,
            c=c,
        )

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return len(self.indices) // 2

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v."""
        rows = np.repeat(np.arange(self.n), self.degrees())
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)


@dataclass(frozen=True)
class SplitMask:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def mask(self, name: str, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=bool)
        out[getattr(self, name)] = True
        return out


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetric normalization with self-loops: (D+I)^-1/2 (A+I) (D+I)^-1/2."""
    a = (g.adjacency() + sp.identity(g.n, format="csr")).tocsr()
    a.sort_indices()
    deg = g.degrees() + 1.0
    rows = np.repeat(np.arange(g.n), np.diff(a.indptr))
    a.data = 1.0 / np.sqrt(deg[rows] * deg[a.indices])
    return a


def edge_homophily(g: Graph) -> float:
    edges = g.edge_list()
    if len(edges) == 0:
        raise ValueError("undefined homophily: graph has no edges")
    same = g.labels[edges[:, 0]] == g.labels[edges[:, 1]]
    return float(same.mean())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_splits(g: Graph, seed: int) -> SplitMask:
    """Per-class stratified 50/25/25 split, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for cls in range(g.c):
        members = np.flatnonzero(g.labels == cls)
        m = len(members)
        if m < 4:
            raise ValueError(f"class {cls} has {m} members; need at least 4 to split")
        members = rng.permutation(members)
        n_train = _round_half_up(0.5 * m)
        n_val = _round_half_up(0.25 * m)
        train.append(members[:n_train])
        val.append(members[n_train:n_train + n_val])
        test.append(members[n_train + n_val:])
    return SplitMask(
        train=np.sort(np.concatenate(train)),
        val=np.sort(np.concatenate(val)),
        test=np.sort(np.concatenate(test)),
    )


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # target_dim x d, rows orthonormal
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit(x: np.ndarray, target_dim: int) -> PCAModel:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if target_dim > min(n, d) or target_dim < 1:
        raise ValueError(f"target_dim={target_dim} must be in [1, min(n, d)={min(n, d)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2 / max(n - 1, 1)
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return PCAModel(mean, vt[:target_dim], var[:target_dim], ratio[:target_dim])


def pca_reduce(x: np.ndarray, target_dim: int, fit_rows: np.ndarray | None = None) -> np.ndarray:
    """Project mean-centred ``x`` onto its top principal components.

    ``fit_rows`` restricts the fit to a subset of rows (e.g. training nodes);
    the projection is still applied to every row.
    """
    x = np.asarray(x, dtype=np.float64)
    model = pca_fit(x if fit_rows is None else x[fit_rows], target_dim)
    return model.transform(x)


def sbm_generate(
    block_sizes,
    p_intra: float,
    p_inter: float,
    feature_dim: int,
    feature_noise: float,
    seed: int,
) -> Graph:
    """Stochastic block model with Gaussian features around orthogonal class means."""
    if not (0 <= p_intra <= 1 and 0 <= p_inter <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    sizes = [int(b) for b in block_sizes]
    if any(b <= 0 for b in sizes):
        raise ValueError("block sizes must be positive")
    c = len(sizes)
    if feature_dim < c:
        raise ValueError("feature_dim must be >= number of blocks for orthogonal class means")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), sizes)
    n = len(labels)
    us, vs = [], []
    for i in range(n - 1):
        rest = labels[i + 1:]
        p = np.where(rest == labels[i], p_intra, p_inter)
        hit = np.flatnonzero(rng.random(n - i - 1) < p)
        us.append(np.full(len(hit), i))
        vs.append(hit + i + 1)
    edges = np.stack([np.concatenate(us), np.concatenate(vs)], axis=1) if n > 1 else np.zeros((0, 2))
    means = np.eye(c, feature_dim)
    x = means[labels] + feature_noise * rng.standard_normal((n, feature_dim))
    return Graph.from_edges(n, edges, x, labels, c=c)


# --- file formats -----------------------------------------------------------


def read_edges(path) -> np.ndarray:
    path = Path(path)
    edges = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def read_features(path) -> np.ndarray:
    """CSV features, or the binary GCF1 format when the file starts with its magic."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return read_features_binary(path)
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(tok) for tok in row])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-numeric feature token") from None
            if len(rows[-1]) != len(rows[0]):
                raise GraphFormatError(f"{path}:{lineno}: expected {len(rows[0])} columns")
    return np.asarray(rows, dtype=np.float64)


def read_features_binary(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise GraphFormatError(f"{path}: bad magic")
    n, d = struct.unpack_from("<QQ", data, 4)
    body = np.frombuffer(data, dtype="<f4", offset=20)
    if body.size != n * d:
        raise GraphFormatError(f"{path}: expected {n * d} floats, found {body.size}")
    return body.reshape(n, d).astype(np.float64)


def write_features_binary(path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", *x.shape))
        fh.write(x.tobytes())


def read_labels(path) -> np.ndarray:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer label {line!r}") from None
    return np.asarray(out, dtype=np.int64)


def load_graph(edge_path, feature_path, label_path) -> Graph:
    x = read_features(feature_path)
    labels = read_labels(label_path)
    if len(x) != len(labels):
        raise GraphFormatError(
            f"row-count mismatch: {feature_path} has {len(x)} rows, {label_path} has {len(labels)}"
        )
    edges = read_edges(edge_path)
    n = len(labels)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = int(np.flatnonzero((edges < 0) | (edges >= n))[0] // 2)
        raise GraphFormatError(f"{edge_path}: node id out of range in edge {tuple(edges[bad])} (n={n})")
    return Graph.from_edges(n, edges, x, labels)


def save_graph(g: Graph, edge_path, feature_path, label_path, binary_features: bool = False) -> None:
    with open(edge_path, "w", encoding="utf-8") as fh:
        fh.write("# undirected edges, 0-based\n")
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    if binary_features:
        write_features_binary(feature_path, g.x_attr)
    else:
        with open(feature_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in g.x_attr])
    with open(label_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in g.labels)
