"""Graph-attention region classifier: a GAT stack followed by a two-layer MLP
and a row softmax over high-level concepts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .diffcore import Segments, Tensor

CHECKPOINT_FORMAT = "ontoscene-region-classifier"
CHECKPOINT_VERSION = 1


class GraphIndex:
    """Directed message-passing structure for an undirected place graph.

    Each undirected edge becomes two directed ones and every node gets a
    self-loop; entries are sorted by destination so per-neighbourhood maxima
    reduce over contiguous slices.
    """

    def __init__(self, num_nodes: int, edges: np.ndarray):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValueError(f"edge endpoint outside [0, {num_nodes})")
        loops = np.arange(num_nodes, dtype=np.int64)
        src = np.concatenate([edges[:, 0], edges[:, 1], loops])
        dst = np.concatenate([edges[:, 1], edges[:, 0], loops])
        order = np.lexsort((src, dst))
        self.num_nodes = num_nodes
        self.src = src[order]
        self.dst = dst[order]
        self.src_seg = Segments(self.src, num_nodes)
        self.dst_seg = Segments(self.dst, num_nodes)
        self.indptr = np.append(np.searchsorted(self.dst, np.arange(num_nodes)), self.src.size)
        self._layouts: dict[int, tuple] = {}

    @property
    def num_directed(self) -> int:
        return self.src.size

    def adjacency(self, weights: np.ndarray) -> sp.csr_matrix:
        """(N, N) matrix with ``weights[e]`` at (dst[e], src[e])."""
        return sp.csr_matrix((weights, self.src, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def _head_layout(self, heads: int):
        # one (N*H, N*H) matrix serves all heads: row v*H + k holds head k of node v,
        # which matches the row-major reshape of an (N, H*F) array to (N*H, F)
        layout = self._layouts.get(heads)
        if layout is None:
            n = self.num_nodes
            k = np.arange(heads)
            rows = (self.dst[:, None] * heads + k).ravel()
            cols = (self.src[:, None] * heads + k).ravel()
            fwd = np.lexsort((cols, rows))
            bwd = np.lexsort((rows, cols))
            size = n * heads + 1
            layout = (
                fwd, cols[fwd], np.searchsorted(rows[fwd], np.arange(size)),
                bwd, rows[bwd], np.searchsorted(cols[bwd], np.arange(size)),
            )
            self._layouts[heads] = layout
        return layout

    def head_adjacency(self, alpha: np.ndarray, transpose: bool = False) -> sp.csr_matrix:
        """Block matrix applying per-head attention weights ``alpha`` (E, H)."""
        heads = alpha.shape[1]
        fwd, fcols, fptr, bwd, brows, bptr = self._head_layout(heads)
        size = self.num_nodes * heads
        flat = alpha.reshape(-1)
        if transpose:
            return sp.csr_matrix((flat[bwd], brows, bptr), shape=(size, size))
        return sp.csr_matrix((flat[fwd], fcols, fptr), shape=(size, size))


def attend(alpha: Tensor, h: Tensor, gi: GraphIndex, per_head: int) -> Tensor:
    """``out[v, head k] = sum over in-edges (u -> v) of alpha[e, k] * h[u, head k]``."""
    heads = alpha.shape[1]
    n, width = h.shape
    head_sum = np.kron(np.eye(heads), np.ones((per_head, 1)))

    def compute(a, x):
        return (gi.head_adjacency(a) @ x.reshape(n * heads, per_head)).reshape(n, width)

    def vjp(g, out, a, x):
        gx = (gi.head_adjacency(a, transpose=True) @ g.reshape(n * heads, per_head)).reshape(n, width)
        ga = (g[gi.dst] * x[gi.src]) @ head_sum
        return ga, gx

    return dc.custom_op("attend", compute, vjp, alpha, h)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> tuple[np.ndarray, float]:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape), limit


@dataclass(frozen=True)
class ModelDims:
    in_dim: int
    num_classes: int
    hidden_dim: int = 32
    layers: int = 3
    heads: int = 4
    dropout: float = 0.25
    negative_slope: float = 0.2

    def __post_init__(self):
        if min(self.in_dim, self.num_classes, self.hidden_dim, self.layers, self.heads) < 1:
            raise ValueError("model dimensions must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class GatLayer:
    """Multi-head additive attention (GAT v1), heads concatenated."""

    def __init__(self, in_dim: int, heads: int, per_head: int, slope: float, rng: np.random.Generator):
        self.heads = heads
        self.per_head = per_head
        self.slope = slope
        width = heads * per_head
        w, self.weight_limit = glorot(rng, in_dim, width, (in_dim, width))
        # attention vectors live on the block diagonal of a (width, heads) matrix
        self.block = np.kron(np.eye(heads), np.ones((per_head, 1)))
        a_src, self.att_limit = glorot(rng, per_head, 1, (width, heads))
        a_dst, _ = glorot(rng, per_head, 1, (width, heads))
        self.weight = Tensor(w, requires_grad=True)
        self.att_src = Tensor(a_src * self.block, requires_grad=True)
        self.att_dst = Tensor(a_dst * self.block, requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.att_src, self.att_dst, self.bias]

    def attention(self, h: Tensor, gi: GraphIndex) -> Tensor:
        """Normalised coefficients, one row per directed edge, one column per head."""
        s_src = dc.matmul(h, dc.mul(self.att_src, self.block))
        s_dst = dc.matmul(h, dc.mul(self.att_dst, self.block))
        e = dc.leaky_relu(dc.add(dc.gather_rows(s_src, gi.src_seg), dc.gather_rows(s_dst, gi.dst_seg)), self.slope)
        return dc.segment_softmax(e, gi.dst_seg)

    def __call__(self, x: Tensor, gi: GraphIndex) -> Tensor:
        h = dc.matmul(x, self.weight)
        alpha = self.attention(h, gi)
        return dc.add_rowvec(attend(alpha, h, gi, self.per_head), self.bias)


class RegionClassifier:
    """GAT layers (ReLU + dropout after each) -> Linear -> ReLU -> Linear -> softmax."""

    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        self.seed = seed
        rng = np.random.default_rng(seed)
        per_head = dims.hidden_dim // dims.heads
        self.gat_layers = []
        in_dim = dims.in_dim
        for _ in range(dims.layers):
            self.gat_layers.append(GatLayer(in_dim, dims.heads, per_head, dims.negative_slope, rng))
            in_dim = dims.hidden_dim
        w1, l1 = glorot(rng, dims.hidden_dim, dims.hidden_dim, (dims.hidden_dim, dims.hidden_dim))
        w2, l2 = glorot(rng, dims.hidden_dim, dims.num_classes, (dims.hidden_dim, dims.num_classes))
        self.mlp_w1 = Tensor(w1, requires_grad=True)
        self.mlp_b1 = Tensor(np.zeros(dims.hidden_dim), requires_grad=True)
        self.mlp_w2 = Tensor(w2, requires_grad=True)
        self.mlp_b2 = Tensor(np.zeros(dims.num_classes), requires_grad=True)
        self._limits = {"mlp_w1": l1, "mlp_w2": l2}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.gat_layers):
            for name, p in zip(("weight", "att_src", "att_dst", "bias"), layer.parameters()):
                out.append((f"gat{i}.{name}", p))
        out += [("mlp_w1", self.mlp_w1), ("mlp_b1", self.mlp_b1), ("mlp_w2", self.mlp_w2), ("mlp_b2", self.mlp_b2)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def init_limits(self) -> dict[str, float]:
        """Glorot bound each weight tensor was drawn under (biases are zero)."""
        lim = dict(self._limits)
        for i, layer in enumerate(self.gat_layers):
            lim[f"gat{i}.weight"] = layer.weight_limit
            lim[f"gat{i}.att_src"] = layer.att_limit
            lim[f"gat{i}.att_dst"] = layer.att_limit
        return lim

    def forward(self, features, gi: GraphIndex, training: bool = False, seed=0) -> Tensor:
        """Per-node class distributions, shape (N, num_classes).

        ``seed`` keys the dropout masks (int or tuple of ints); it is ignored
        in eval mode.
        """
        x = dc.as_tensor(features)
        if x.data.ndim != 2 or x.shape[1] != self.dims.in_dim:
            raise ValueError(f"features must be (N, {self.dims.in_dim}), got {x.shape}")
        if x.shape[0] != gi.num_nodes:
            raise ValueError(f"{x.shape[0]} feature rows for a graph of {gi.num_nodes} nodes")
        keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
        for i, layer in enumerate(self.gat_layers):
            x = dc.relu_dropout(layer(x, gi), self.dims.dropout, training, keys + (i,))
        hidden = dc.relu(dc.add_rowvec(dc.matmul(x, self.mlp_w1), self.mlp_b1))
        logits = dc.add_rowvec(dc.matmul(hidden, self.mlp_w2), self.mlp_b2)
        return dc.softmax_rows(logits)

    __call__ = forward

    def predict_proba(self, features, gi: GraphIndex) -> np.ndarray:
        return self.forward(features, gi, training=False).data

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, values: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise ValueError("snapshot does not match this model")
        for p, v in zip(params, values):
            if p.shape != v.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {v.shape}")
            p.data = v.copy()

    # -- checkpoints -------------------------------------------------------

    def to_dict(self, extra: dict | None = None) -> dict:
        d = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": asdict(self.dims),
            "seed": self.seed,
            "params": {name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()} for name, p in self.named_parameters()},
        }
        if extra:
            d.update(extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegionClassifier":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a region-classifier checkpoint (format={d.get('format')!r})")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        model = cls(ModelDims(**d["dims"]), seed=d.get("seed", 0))
        stored = d["params"]
        names = [n for n, _ in model.named_parameters()]
        if sorted(stored) != sorted(names):
            raise ValueError(f"checkpoint parameters {sorted(stored)} do not match the architecture")
        for name, p in model.named_parameters():
            entry = stored[name]
            if tuple(entry["shape"]) != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {entry['shape']} != expected {list(p.shape)}")
            p.data = np.asarray(entry["data"], dtype=np.float64).reshape(p.shape)
        return model


def save_checkpoint(model: RegionClassifier, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model.to_dict(extra)) + "\n")


def load_checkpoint(path) -> tuple[RegionClassifier, dict]:
    d = json.loads(Path(path).read_text())
    return RegionClassifier.from_dict(d), d
