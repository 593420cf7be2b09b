"""Places-layer scene graphs, their JSON form, a planted synthetic generator,
feature encoding and label masking.

A graph is immutable; masking functions return a new graph.  Labels are kept
as an int array with ``-1`` meaning "no label".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ontology import SpatialOntology

SPLITS = ("train", "val", "test")
NO_LABEL = -1


class SceneGraphError(ValueError):
    pass


@dataclass(frozen=True)
class PlaceNode:
    position: tuple[float, float, float]
    histogram: np.ndarray
    label: int | None
    split: str


@dataclass(frozen=True, eq=False)
class SceneGraph:
    positions: np.ndarray  # (N, 3) metres
    histograms: np.ndarray  # (N, n) basis-point label counts
    labels: np.ndarray  # (N,) int, NO_LABEL when absent
    splits: np.ndarray  # (N,) of "train" | "val" | "test"
    edges: np.ndarray  # (E, 2) undirected, u != v
    low_levels: tuple[str, ...]
    high_levels: tuple[str, ...]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n_nodes = pos.shape[0]
        hist = np.asarray(self.histograms, dtype=np.float64)
        if hist.ndim != 2 or hist.shape[0] != n_nodes:
            raise SceneGraphError(f"histograms must be ({n_nodes}, n), got {hist.shape}")
        low, high = tuple(self.low_levels), tuple(self.high_levels)
        if not low or not high:
            raise SceneGraphError("vocabularies must be non-empty")
        if hist.shape[1] != len(low):
            raise SceneGraphError(f"histogram length {hist.shape[1]} != {len(low)} low-level concepts")
        if np.any(hist < 0):
            raise SceneGraphError("histogram counts must be non-negative")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape != (n_nodes,):
            raise SceneGraphError("one label slot per node required")
        bad = np.nonzero((labels < NO_LABEL) | (labels >= len(high)))[0]
        if bad.size:
            raise SceneGraphError(f"node {bad[0]}: label {labels[bad[0]]} outside [0, {len(high)})")
        splits = np.asarray(self.splits, dtype=object).reshape(-1)
        if splits.shape != (n_nodes,) or not all(s in SPLITS for s in splits):
            raise SceneGraphError(f"every node needs a split in {SPLITS}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            bad = np.nonzero((edges < 0) | (edges >= n_nodes))
            if bad[0].size:
                e = bad[0][0]
                raise SceneGraphError(f"edge {e} = {edges[e].tolist()} references a node outside [0, {n_nodes})")
            loops = np.nonzero(edges[:, 0] == edges[:, 1])[0]
            if loops.size:
                raise SceneGraphError(f"edge {loops[0]} is a self-loop")
        for name, arr in (("positions", pos), ("histograms", hist), ("labels", labels), ("edges", edges)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "splits", splits)
        object.__setattr__(self, "low_levels", low)
        object.__setattr__(self, "high_levels", high)

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def node(self, i: int) -> PlaceNode:
        lab = int(self.labels[i])
        return PlaceNode(tuple(self.positions[i]), self.histograms[i], None if lab == NO_LABEL else lab, self.splits[i])

    @property
    def nodes(self) -> list[PlaceNode]:
        return [self.node(i) for i in range(self.num_nodes)]

    def split_mask(self, split: str | Sequence[str]) -> np.ndarray:
        wanted = (split,) if isinstance(split, str) else tuple(split)
        return np.isin(self.splits, wanted)

    def labeled_mask(self, split: str | Sequence[str] | None = None) -> np.ndarray:
        m = self.labels != NO_LABEL
        return m if split is None else m & self.split_mask(split)

    def with_labels(self, labels: np.ndarray) -> "SceneGraph":
        return replace(self, labels=np.asarray(labels, dtype=np.int64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.histograms, other.histograms)
            and np.array_equal(self.labels, other.labels)
            and list(self.splits) == list(other.splits)
            and np.array_equal(self.edges, other.edges)
            and self.low_levels == other.low_levels
            and self.high_levels == other.high_levels
        )

    def __repr__(self) -> str:
        return f"SceneGraph(nodes={self.num_nodes}, edges={self.num_edges}, |L|={len(self.low_levels)}, |H|={len(self.high_levels)})"

    def to_dict(self) -> dict:
        hist = self.histograms
        as_int = np.all(hist == np.round(hist))
        nodes = []
        for i in range(self.num_nodes):
            h = hist[i]
            nodes.append(
                {
                    "pos": [float(v) for v in self.positions[i]],
                    "hist": [int(v) for v in h] if as_int else [float(v) for v in h],
                    "label": None if self.labels[i] == NO_LABEL else int(self.labels[i]),
                    "split": str(self.splits[i]),
                }
            )
        return {
            "low_levels": list(self.low_levels),
            "high_levels": list(self.high_levels),
            "nodes": nodes,
            "edges": [[int(u), int(v)] for u, v in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        if not isinstance(d, dict):
            raise SceneGraphError("scene graph JSON must be an object")
        for key in ("low_levels", "high_levels", "nodes", "edges"):
            if key not in d:
                raise SceneGraphError(f"missing field '{key}'")
        n_low = len(d["low_levels"])
        pos, hist, labels, splits = [], [], [], []
        for i, node in enumerate(d["nodes"]):
            try:
                p, h, lab, s = node["pos"], node["hist"], node.get("label"), node["split"]
            except (KeyError, TypeError) as e:
                raise SceneGraphError(f"nodes[{i}]: missing field {e}") from e
            if len(p) != 3:
                raise SceneGraphError(f"nodes[{i}].pos must have 3 coordinates")
            if len(h) != n_low:
                raise SceneGraphError(f"nodes[{i}].hist has length {len(h)}, expected {n_low}")
            if lab is not None and not (isinstance(lab, int) and 0 <= lab < len(d["high_levels"])):
                raise SceneGraphError(f"nodes[{i}].label {lab!r} outside [0, {len(d['high_levels'])})")
            pos.append(p)
            hist.append(h)
            labels.append(NO_LABEL if lab is None else lab)
            splits.append(s)
        edges = d["edges"]
        for k, e in enumerate(edges):
            if not (isinstance(e, list) and len(e) == 2):
                raise SceneGraphError(f"edges[{k}]: expected [u, v], got {e!r}")
        try:
            return cls(
                positions=np.asarray(pos, dtype=np.float64).reshape(-1, 3),
                histograms=np.asarray(hist, dtype=np.float64).reshape(len(hist), n_low),
                labels=np.asarray(labels, dtype=np.int64),
                splits=np.asarray(splits, dtype=object),
                edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                low_levels=d["low_levels"],
                high_levels=d["high_levels"],
            )
        except SceneGraphError as e:
            raise SceneGraphError(str(e)) from None


def save(graph: SceneGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict()) + "\n")


def load(path) -> SceneGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SceneGraphError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        return SceneGraph.from_dict(data)
    except SceneGraphError as e:
        raise SceneGraphError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def planted_ontology(m: int, n: int, k: int, seed: int = 0, overlap: bool = False) -> SpatialOntology:
    """Random ontology with exactly ``k`` low-level concepts per region.

    Without ``overlap`` the regions get disjoint concept sets (requires
    ``m * k <= n``); leftover concepts stay disconnected.
    """
    rng = np.random.default_rng(seed)
    low = [f"object_{j:02d}" for j in range(n)]
    high = [f"region_{i:02d}" for i in range(m)]
    omega = np.zeros((m, n))
    if overlap:
        for i in range(m):
            omega[i, rng.choice(n, size=k, replace=False)] = 1.0
    else:
        if m * k > n:
            raise ValueError(f"disjoint planting needs m*k <= n ({m}*{k} > {n})")
        perm = rng.permutation(n)
        for i in range(m):
            omega[i, perm[i * k:(i + 1) * k]] = 1.0
    return SpatialOntology(low, high, omega)


@dataclass(frozen=True)
class SynthConfig:
    ontology: SpatialOntology
    num_nodes: int = 2000
    num_regions_per_class: int = 2
    knn_k: int = 6
    histogram_draws: int = 20
    noise_rate: float = 0.2
    region_spread: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be positive")
        if self.knn_k < 1 or self.knn_k >= self.num_nodes:
            raise ValueError(f"knn_k must lie in [1, num_nodes), got {self.knn_k}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.num_regions_per_class < 1 or self.histogram_draws < 0:
            raise ValueError("num_regions_per_class must be >= 1 and histogram_draws >= 0")


def knn_edges(positions: np.ndarray, k: int) -> np.ndarray:
    """Symmetric k-nearest-neighbour graph as sorted unique (u, v) pairs, u < v."""
    n = positions.shape[0]
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, idx = cKDTree(positions).query(positions, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    cols = idx[:, 1:].reshape(-1)
    pairs = np.stack([np.minimum(rows, cols), np.maximum(rows, cols)], axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


def assign_splits(n: int, rng: np.random.Generator, fractions=(0.7, 0.15, 0.15)) -> np.ndarray:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    splits = np.empty(n, dtype=object)
    order = rng.permutation(n)
    splits[order[:n_train]] = "train"
    splits[order[n_train:n_train + n_val]] = "val"
    splits[order[n_train + n_val:]] = "test"
    return splits


def generate_synthetic(config: SynthConfig) -> SceneGraph:
    onto = config.ontology
    m, n = onto.n_high, onto.n_low
    support = [np.nonzero(onto.omega[i])[0] for i in range(m)]
    if any(s.size == 0 for s in support):
        raise ValueError("every high-level concept needs at least one planted edge")
    rng = np.random.default_rng(config.seed)
    n_regions = m * config.num_regions_per_class
    seeds = rng.random((n_regions, 3))
    region_class = np.repeat(np.arange(m), config.num_regions_per_class)
    region_of = rng.permutation(np.arange(config.num_nodes) % n_regions)
    positions = seeds[region_of] + rng.normal(scale=config.region_spread, size=(config.num_nodes, 3))
    labels = region_class[region_of].astype(np.int64)

    hist = np.zeros((config.num_nodes, n))
    draws = config.histogram_draws
    if draws:
        noisy = rng.random((config.num_nodes, draws)) < config.noise_rate
        uniform = rng.integers(0, n, size=(config.num_nodes, draws))
        pick = rng.random((config.num_nodes, draws))
        for v in range(config.num_nodes):
            s = support[labels[v]]
            planted = s[np.minimum((pick[v] * s.size).astype(np.int64), s.size - 1)]
            concepts = np.where(noisy[v], uniform[v], planted)
            hist[v] = np.bincount(concepts, minlength=n)

    return SceneGraph(
        positions=positions,
        histograms=hist,
        labels=labels,
        splits=assign_splits(config.num_nodes, rng),
        edges=knn_edges(positions, config.knn_k),
        low_levels=onto.low_levels,
        high_levels=onto.high_levels,
    )


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def l1_normalize_rows(hist: np.ndarray) -> np.ndarray:
    hist = np.asarray(hist, dtype=np.float64)
    s = hist.sum(axis=-1, keepdims=True)
    return hist / np.where(s > 0, s, 1.0)


def projection_matrix(embed_dim: int, n: int, seed: int) -> np.ndarray:
    """Fixed ``embed_dim x n`` matrix with entries +-1/sqrt(embed_dim)."""
    signs = np.random.default_rng(seed).integers(0, 2, size=(embed_dim, n)) * 2 - 1
    return signs / math.sqrt(embed_dim)


class FeatureEncoder(TransformerMixin, BaseEstimator):
    """Node features = min-max scaled position ++ projected semantic histogram.

    The semantic part stands in for a word-embedding summary of the basis-point
    labels: the l1-normalised histogram is multiplied by a seeded random sign
    matrix, so proportional histograms encode identically.
    """

    def __init__(self, embed_dim: int = 32, seed: int = 0):
        self.embed_dim = embed_dim
        self.seed = seed

    def fit(self, graph: SceneGraph, y=None):
        graphs = graph if isinstance(graph, (list, tuple)) else [graph]
        pos = np.concatenate([g.positions[g.split_mask("train")] for g in graphs])
        if pos.shape[0] == 0:
            pos = np.concatenate([g.positions for g in graphs])
        self.pos_min_ = pos.min(axis=0)
        self.pos_max_ = pos.max(axis=0)
        self.n_low_ = graphs[0].histograms.shape[1]
        self.projection_ = projection_matrix(self.embed_dim, self.n_low_, self.seed)
        return self

    def transform(self, graph: SceneGraph) -> np.ndarray:
        check_is_fitted(self, "projection_")
        if graph.histograms.shape[1] != self.n_low_:
            raise SceneGraphError(
                f"histogram length {graph.histograms.shape[1]} does not match the fitted encoder ({self.n_low_})"
            )
        span = self.pos_max_ - self.pos_min_
        pos = (graph.positions - self.pos_min_) / np.where(span > 0, span, 1.0)
        emb = l1_normalize_rows(graph.histograms) @ self.projection_.T
        return np.concatenate([pos, emb], axis=1)

    @property
    def output_dim(self) -> int:
        return 3 + self.embed_dim

    def state(self) -> dict:
        check_is_fitted(self, "projection_")
        return {
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "pos_min": self.pos_min_.tolist(),
            "pos_max": self.pos_max_.tolist(),
            "n_low": self.n_low_,
        }

    @classmethod
    def from_state(cls, s: dict) -> "FeatureEncoder":
        enc = cls(embed_dim=s["embed_dim"], seed=s["seed"])
        enc.pos_min_ = np.asarray(s["pos_min"], dtype=np.float64)
        enc.pos_max_ = np.asarray(s["pos_max"], dtype=np.float64)
        enc.n_low_ = int(s["n_low"])
        enc.projection_ = projection_matrix(enc.embed_dim, enc.n_low_, enc.seed)
        return enc


def encode_features(graph: SceneGraph, enc: FeatureEncoder) -> np.ndarray:
    return enc.transform(graph)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def kept_count(n_labels: int, keep_fraction: float) -> int:
    """``ceil(keep_fraction * n_labels)`` with float noise trimmed; never 0 when keep_fraction > 0."""
    if keep_fraction <= 0 or n_labels == 0:
        return 0
    raw = keep_fraction * n_labels
    k = math.ceil(round(raw, 9))
    return int(min(n_labels, max(1, k)))


def mask_labels(graph: SceneGraph, keep_fraction: float, seed: int) -> SceneGraph:
    """Keep a seeded uniform sample of the labelled training nodes; val/test untouched."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in [0, 1], got {keep_fraction}")
    candidates = np.nonzero(graph.labeled_mask("train"))[0]
    if not graph.split_mask("train").any():
        raise SceneGraphError("graph has no training split")
    keep = kept_count(candidates.size, keep_fraction)
    if keep == candidates.size:
        return graph
    chosen = np.random.default_rng(seed).permutation(candidates)[:keep]
    labels = graph.labels.copy()
    drop = np.setdiff1d(candidates, chosen)
    labels[drop] = NO_LABEL
    return graph.with_labels(labels)


def mask_classes(graph: SceneGraph, masked_class_indices: Sequence[int], scope: str = "train_only") -> SceneGraph:
    """Remove labels of the given classes from training (and, with
    ``scope="train_val"``, validation) nodes; test labels stay."""
    masked = sorted(set(int(c) for c in masked_class_indices))
    m = len(graph.high_levels)
    for c in masked:
        if not 0 <= c < m:
            raise ValueError(f"class index {c} outside [0, {m})")
    if len(masked) >= m:
        raise ValueError("cannot mask every class")
    if not masked:
        return graph
    splits = {"train_only": ("train",), "train_val": ("train", "val")}.get(scope)
    if splits is None:
        raise ValueError(f"scope must be 'train_only' or 'train_val', got {scope!r}")
    hit = graph.split_mask(splits) & np.isin(graph.labels, masked)
    labels = graph.labels.copy()
    labels[hit] = NO_LABEL
    return graph.with_labels(labels)
