"""Predicates, axioms and losses grounding the ontology on a scene graph, plus
the train / evaluate / ablate harness."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import fuzzy
from .diffcore import Tensor
from .fuzzy import AggregatorConfig
from .model import GraphIndex, ModelDims, RegionClassifier
from .ontology import SpatialOntology, normalized_biadjacency
from .scenegraph import NO_LABEL, FeatureEncoder, SceneGraph, l1_normalize_rows, mask_classes, mask_labels

log = logging.getLogger(__name__)

LOSS_KINDS = ("cross_entropy", "sat_equiv", "sat_incl", "sat_both")
_ATOL = 1e-9


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, reason: str):
        super().__init__(f"trial aborted at epoch {epoch}: {reason}")
        self.epoch = epoch
        self.reason = reason


# ---------------------------------------------------------------------------
# predicates (single node)
# ---------------------------------------------------------------------------


def _onehot_check(y: np.ndarray) -> None:
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError(f"label must be one-hot, got {y.tolist()}")


def is_class_of(probs_row, label_onehot) -> Tensor:
    """``y . p``: truth that the node belongs to its labelled class."""
    y = np.asarray(label_onehot, dtype=np.float64)
    _onehot_check(y)
    p = dc.as_tensor(probs_row)
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and label {y.shape} differ in length")
    return dc.sum_all(dc.mul(p, y))


def _ontology_target(omega_hat, q_hat) -> np.ndarray:
    omega_hat = np.asarray(omega_hat, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if omega_hat.ndim != 2 or q_hat.shape[-1] != omega_hat.shape[1]:
        raise ValueError(f"omega_hat {omega_hat.shape} and q_hat {q_hat.shape} are incompatible")
    return q_hat @ omega_hat.T


def is_valid(omega_hat, q_hat) -> float:
    """Share of the histogram mass sitting on concepts with at least one edge."""
    return float(_ontology_target(omega_hat, q_hat).sum())


def is_similar(probs_row, omega_hat, q_hat) -> Tensor:
    target = _ontology_target(omega_hat, q_hat)
    p = dc.as_tensor(probs_row)
    if p.shape != target.shape:
        raise ValueError(f"probs {p.shape} vs {target.shape} high-level concepts")
    return dc.sum_all(dc.mul(p, target))


# ---------------------------------------------------------------------------
# batched predicates and axioms
# ---------------------------------------------------------------------------


def class_truths(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Row-wise ``is_class_of`` for integer labels (all valid)."""
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return dc.sum_rows(dc.mul(probs, onehot))


def inclusion_truths(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Goguen ``is_valid -> is_similar`` per row; ``targets`` holds ``omega_hat @ q_hat`` rows."""
    valid = np.clip(targets.sum(axis=1), 0.0, 1.0)
    similar = dc.clamp(dc.sum_rows(dc.mul(probs, targets)), 0.0, 1.0)
    return fuzzy.implies_goguen(valid, similar)


def equivalence_axiom(probs, labels_onehot, p: float = 2.0) -> Tensor:
    probs = dc.as_tensor(probs)
    y = np.asarray(labels_onehot, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"labels {y.shape} vs probs {probs.shape}")
    if y.shape[0] == 0:
        raise ValueError("equivalence axiom over zero labelled nodes")
    for row in y:
        _onehot_check(row)
    return fuzzy.forall_pme(dc.sum_rows(dc.mul(probs, y)), p)


def inclusion_axiom(probs, omega_hat, q_hats, p: float = 4.0) -> Tensor:
    probs = dc.as_tensor(probs)
    targets = _ontology_target(omega_hat, np.atleast_2d(q_hats))
    if targets.shape != probs.shape:
        raise ValueError(f"q_hats give {targets.shape} targets for probs {probs.shape}")
    return fuzzy.forall_pme(inclusion_truths(probs, targets), p)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AxiomSet:
    use_equiv: bool
    use_incl: bool
    aggregator: AggregatorConfig = AggregatorConfig()

    def __post_init__(self):
        if not (self.use_equiv or self.use_incl):
            raise ValueError("an axiom set needs at least one active axiom")

    @classmethod
    def for_loss(cls, loss_kind: str, aggregator: AggregatorConfig = AggregatorConfig()) -> "AxiomSet | None":
        if loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
        if loss_kind == "cross_entropy":
            return None
        return cls(loss_kind in ("sat_equiv", "sat_both"), loss_kind in ("sat_incl", "sat_both"), aggregator)


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "sat_both"
    learning_rate: float = 0.001
    weight_decay: float = 5e-5
    max_epochs: int = 1000
    convergence_delta: float = 1e-6
    convergence_patience: int = 10
    trials: int = 10
    keep_fraction: float = 1.0
    masked_classes: tuple[int, ...] = ()
    # "train_only" or "train_val": where masked-class labels are removed
    mask_scope: str = "train_only"
    # nodes the inclusion axiom quantifies over: "train_val" or "all"
    incl_scope: str = "train_val"
    p_forall_equiv: float = 2.0
    p_forall_incl: float = 4.0
    p_satagg: float = 2.0
    hidden_dim: int = 32
    layers: int = 3
    heads: int = 4
    dropout: float = 0.25
    embed_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "masked_classes", tuple(int(c) for c in self.masked_classes))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.convergence_delta < 0:
            raise ValueError("learning_rate, weight_decay and convergence_delta must be non-negative")
        if self.max_epochs < 1 or self.convergence_patience < 1 or self.trials < 1:
            raise ValueError("max_epochs, convergence_patience and trials must be >= 1")
        if not 0.0 <= self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must lie in [0, 1], got {self.keep_fraction}")
        if self.mask_scope not in ("train_only", "train_val"):
            raise ValueError(f"mask_scope must be 'train_only' or 'train_val', got {self.mask_scope!r}")
        if self.incl_scope not in ("train_val", "all"):
            raise ValueError(f"incl_scope must be 'train_val' or 'all', got {self.incl_scope!r}")
        self.aggregator  # validates p values

    @property
    def aggregator(self) -> AggregatorConfig:
        return AggregatorConfig(self.p_forall_equiv, self.p_forall_incl, self.p_satagg)

    @property
    def axioms(self) -> AxiomSet | None:
        return AxiomSet.for_loss(self.loss_kind, self.aggregator)

    def dims(self, in_dim: int, num_classes: int) -> ModelDims:
        return ModelDims(in_dim, num_classes, self.hidden_dim, self.layers, self.heads, self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masked_classes"] = list(self.masked_classes)
        return d


# ---------------------------------------------------------------------------
# graph preparation
# ---------------------------------------------------------------------------


def align_to_ontology(graph: SceneGraph, onto: SpatialOntology) -> SceneGraph:
    """Reorder histogram columns and labels to the ontology's vocabularies."""
    if graph.low_levels == onto.low_levels and graph.high_levels == onto.high_levels:
        return graph
    if set(graph.low_levels) != set(onto.low_levels) or set(graph.high_levels) != set(onto.high_levels):
        raise ValueError("scene graph and ontology use different concept vocabularies")
    col = [graph.low_levels.index(c) for c in onto.low_levels]
    remap = np.array([onto.high_levels.index(c) for c in graph.high_levels])
    labels = np.where(graph.labels == NO_LABEL, NO_LABEL, remap[np.maximum(graph.labels, 0)])
    return replace(
        graph,
        histograms=graph.histograms[:, col],
        labels=labels,
        low_levels=onto.low_levels,
        high_levels=onto.high_levels,
    )


@dataclass
class Prepared:
    """Everything the loss needs for one graph, computed once per trial."""

    graph: SceneGraph
    features: np.ndarray
    index: GraphIndex
    targets: np.ndarray  # (N, m) rows of omega_hat @ q_hat
    train_nodes: np.ndarray  # labelled training nodes
    train_labels: np.ndarray
    incl_nodes: np.ndarray


def prepare(graph: SceneGraph, onto: SpatialOntology, encoder: FeatureEncoder, incl_scope: str = "train_val") -> Prepared:
    graph = align_to_ontology(graph, onto)
    targets = l1_normalize_rows(graph.histograms) @ normalized_biadjacency(onto).T
    train = np.nonzero(graph.labeled_mask("train"))[0]
    if incl_scope == "all":
        incl = np.arange(graph.num_nodes)
    else:
        incl = np.nonzero(graph.split_mask(("train", "val")))[0]
    return Prepared(
        graph=graph,
        features=encoder.transform(graph),
        index=GraphIndex(graph.num_nodes, graph.edges),
        targets=targets,
        train_nodes=train,
        train_labels=graph.labels[train],
        incl_nodes=incl,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    loss: Tensor
    equiv: float | None = None
    incl: float | None = None


def compute_loss(loss_kind: str, outputs: Sequence[Tensor], data: Sequence[Prepared], aggregator: AggregatorConfig = AggregatorConfig()) -> LossParts:
    """Scalar training loss over one or more graphs.

    ``outputs[i]`` is the model's (N_i, m) probability tensor for ``data[i]``.
    Quantifiers range over the union of the graphs' nodes.
    """
    axioms = AxiomSet.for_loss(loss_kind, aggregator)
    if len(outputs) != len(data) or not data:
        raise ValueError("need one output tensor per prepared graph")

    def labelled_truths():
        parts = [
            class_truths(dc.gather_rows(p, d.train_nodes), d.train_labels)
            for p, d in zip(outputs, data)
            if d.train_nodes.size
        ]
        return dc.concat(parts) if parts else None

    if axioms is None:
        truths = labelled_truths()
        if truths is None:
            raise ValueError("cross-entropy needs at least one labelled training node")
        nll = dc.neg(dc.log(dc.clamp(truths, lo=fuzzy.EPS)))
        return LossParts(dc.mean_all(nll))

    agg = axioms.aggregator
    formulas, parts = [], LossParts(loss=None)
    if axioms.use_equiv:
        truths = labelled_truths()
        if truths is None:
            raise ValueError(f"{loss_kind}: equivalence axiom has no labelled training nodes")
        eq = fuzzy.forall_pme(truths, agg.p_forall_equiv)
        formulas.append(eq)
        parts.equiv = eq.item()
    if axioms.use_incl:
        vals = [
            inclusion_truths(dc.gather_rows(p, d.incl_nodes), d.targets[d.incl_nodes])
            for p, d in zip(outputs, data)
            if d.incl_nodes.size
        ]
        if not vals:
            raise ValueError(f"{loss_kind}: inclusion axiom has no nodes to quantify over")
        inc = fuzzy.forall_pme(dc.concat(vals), agg.p_forall_incl)
        formulas.append(inc)
        parts.incl = inc.item()
    parts.loss = dc.sub(1.0, fuzzy.sat_agg(formulas, agg.p_satagg))
    return parts


def sat_loss(axiom_truths: Sequence, p_satagg: float = 2.0) -> Tensor:
    """``1 - SatAgg`` over precomputed axiom truths."""
    return dc.sub(1.0, fuzzy.sat_agg(axiom_truths, p_satagg))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=1)


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    equiv: list[float | None] = field(default_factory=list)
    incl: list[float | None] = field(default_factory=list)
    val_accuracy: list[float | None] = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: RegionClassifier
    encoder: FeatureEncoder
    history: History
    train_seconds: float


def _val_accuracy(model: RegionClassifier, data: Sequence[Prepared]) -> float | None:
    hits = total = 0
    for d in data:
        mask = d.graph.labeled_mask("val")
        if not mask.any():
            continue
        pred = predict_labels(model.predict_proba(d.features, d.index))
        hits += int(np.sum(pred[mask] == d.graph.labels[mask]))
        total += int(mask.sum())
    return hits / total if total else None


def train(graphs: SceneGraph | Sequence[SceneGraph], onto: SpatialOntology, config: TrainConfig, seed: int = 1) -> TrainResult:
    """Full-graph Adam training; returns the best-validation snapshot.

    ``graphs`` are used as given: label masking is the caller's job (see
    :func:`prepare_trial_graphs`).  Dropout masks are keyed by
    ``(seed, epoch, graph_index, layer)``.
    """
    graphs = [graphs] if isinstance(graphs, SceneGraph) else list(graphs)
    if not graphs:
        raise ValueError("no graphs to train on")
    if not any(g.split_mask("train").any() for g in graphs):
        raise ValueError("no node is in the training split")
    graphs = [align_to_ontology(g, onto) for g in graphs]
    encoder = FeatureEncoder(embed_dim=config.embed_dim, seed=0).fit(graphs)
    data = [prepare(g, onto, encoder, config.incl_scope) for g in graphs]
    model = RegionClassifier(config.dims(encoder.output_dim, onto.n_high), seed=seed)
    opt = dc.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    agg = config.aggregator

    hist = History()
    best_acc, best = -1.0, None
    prev, streak = None, 0
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        opt.zero_grad()
        outputs = [model.forward(d.features, d.index, training=True, seed=(seed, epoch, gi)) for gi, d in enumerate(data)]
        parts = compute_loss(config.loss_kind, outputs, data, agg)
        value = parts.loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(epoch, f"non-finite loss {value}")
        parts.loss.backward()
        for name, p in model.named_parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingAborted(epoch, f"non-finite gradient in {name}")
        opt.step()

        acc = _val_accuracy(model, data)
        hist.loss.append(value)
        hist.equiv.append(parts.equiv)
        hist.incl.append(parts.incl)
        hist.val_accuracy.append(acc)
        score = -1.0 if acc is None else acc
        if best is None or score > best_acc:
            best_acc, best, hist.best_epoch = score, model.snapshot(), epoch

        if prev is not None and abs(value - prev) < config.convergence_delta:
            streak += 1
        else:
            streak = 0
        prev = value
        if streak >= config.convergence_patience:
            hist.stop_reason = "converged"
            break
    else:
        hist.stop_reason = "max_epochs"

    if any(a is not None for a in hist.val_accuracy):
        model.restore(best)
    else:
        # nothing to select on: keep the final parameters
        hist.best_epoch = hist.epochs - 1
    return TrainResult(model, encoder, hist, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: list[float | None]
    masked_class_accuracy: float | None
    confusion: list[list[int]]  # rows: true class, columns: predicted
    num_nodes: int
    infer_seconds_per_graph: float

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("infer_seconds_per_graph")
        return d


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, m: int) -> np.ndarray:
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, m: int, masked_classes: Sequence[int] = (), infer_seconds: float = 0.0) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("no labelled nodes to evaluate")
    cm = confusion_matrix(y_true, y_pred, m)
    counts = cm.sum(axis=1)
    per_class = [float(cm[c, c] / counts[c]) if counts[c] else None for c in range(m)]
    masked = np.isin(y_true, list(masked_classes))
    masked_acc = float(np.mean(y_pred[masked] == y_true[masked])) if masked.any() else None
    return Metrics(
        accuracy=float(np.mean(y_true == y_pred)),
        per_class_accuracy=per_class,
        masked_class_accuracy=masked_acc,
        confusion=cm.tolist(),
        num_nodes=int(y_true.size),
        infer_seconds_per_graph=infer_seconds,
    )


def infer(model: RegionClassifier, encoder: FeatureEncoder, graph: SceneGraph, onto: SpatialOntology) -> tuple[np.ndarray, float]:
    """Eval-mode class probabilities for every node, plus the forward wall time."""
    graph = align_to_ontology(graph, onto)
    features = encoder.transform(graph)
    t0 = time.perf_counter()
    probs = model.predict_proba(features, GraphIndex(graph.num_nodes, graph.edges))
    return probs, time.perf_counter() - t0


def evaluate(
    model: RegionClassifier,
    encoder: FeatureEncoder,
    graphs: SceneGraph | Sequence[SceneGraph],
    onto: SpatialOntology,
    split: str | Sequence[str] = "test",
    masked_classes: Sequence[int] = (),
) -> Metrics:
    graphs = [graphs] if isinstance(graphs, SceneGraph) else list(graphs)
    truth, pred, times = [], [], []
    for g in graphs:
        g = align_to_ontology(g, onto)
        probs, dt = infer(model, encoder, g, onto)
        mask = g.labeled_mask(split)
        truth.append(g.labels[mask])
        pred.append(predict_labels(probs)[mask])
        times.append(dt)
    return metrics_from_predictions(
        np.concatenate(truth), np.concatenate(pred), onto.n_high, masked_classes, float(np.mean(times))
    )


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def prepare_trial_graphs(graphs: Sequence[SceneGraph], config: TrainConfig, seed: int) -> list[SceneGraph]:
    """Apply class masking, then seeded label thinning, to each graph.

    The thinning seed depends only on the trial seed and graph position, so
    every loss kind sees the same retained labels.
    """
    out = []
    for i, g in enumerate(graphs):
        g = mask_classes(g, config.masked_classes, scope=config.mask_scope)
        out.append(mask_labels(g, config.keep_fraction, seed=seed * 1000 + i))
    return out


@dataclass(frozen=True)
class TrialRow:
    loss_kind: str
    keep_fraction: float
    trial: int
    seed: int
    accuracy: float | None
    masked_class_accuracy: float | None
    epochs: int
    train_seconds: float
    infer_seconds_per_graph: float
    status: str = "ok"
    error: str = ""


def run_trial(graphs: Sequence[SceneGraph], onto: SpatialOntology, config: TrainConfig, trial: int) -> TrialRow:
    seed = trial
    try:
        train_graphs = prepare_trial_graphs(graphs, config, seed)
        res = train(train_graphs, onto, config, seed=seed)
        m = evaluate(res.model, res.encoder, graphs, onto, "test", config.masked_classes)
    except (TrainingAborted, ValueError, FloatingPointError) as e:
        log.warning("trial %s/%s/%d failed: %s", config.loss_kind, config.keep_fraction, trial, e)
        return TrialRow(config.loss_kind, config.keep_fraction, trial, seed, None, None, 0, 0.0, 0.0, "aborted", str(e))
    return TrialRow(
        config.loss_kind,
        config.keep_fraction,
        trial,
        seed,
        m.accuracy,
        m.masked_class_accuracy,
        res.history.epochs,
        res.train_seconds,
        m.infer_seconds_per_graph,
    )


def _run_job(args) -> TrialRow:
    return run_trial(*args)


@dataclass(frozen=True)
class CellSummary:
    loss_kind: str
    keep_fraction: float
    trials: int
    completed: int
    mean_accuracy: float | None
    std_accuracy: float | None
    mean_masked_class_accuracy: float | None
    std_masked_class_accuracy: float | None
    complete: bool


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class AblationResult:
    rows: list[TrialRow]
    cells: list[CellSummary]


def summarize(rows: Sequence[TrialRow]) -> list[CellSummary]:
    keys = sorted({(r.loss_kind, r.keep_fraction) for r in rows}, key=lambda k: (LOSS_KINDS.index(k[0]), -k[1]))
    cells = []
    for loss, frac in keys:
        group = [r for r in rows if r.loss_kind == loss and r.keep_fraction == frac]
        ok = [r for r in group if r.status == "ok"]
        acc = _mean_std([r.accuracy for r in ok])
        macc = _mean_std([r.masked_class_accuracy for r in ok if r.masked_class_accuracy is not None])
        cells.append(CellSummary(loss, frac, len(group), len(ok), acc[0], acc[1], macc[0], macc[1], len(ok) == len(group)))
    return cells


def run_ablation(
    datasets: SceneGraph | Sequence[SceneGraph],
    onto: SpatialOntology,
    loss_kinds: Sequence[str],
    keep_fractions: Sequence[float],
    trials: int,
    base: TrainConfig = TrainConfig(),
    jobs: int = 1,
) -> AblationResult:
    """Every (loss, fraction, trial) combination; trial ``t`` uses seed ``t``."""
    datasets = [datasets] if isinstance(datasets, SceneGraph) else list(datasets)
    if not loss_kinds or not keep_fractions or trials < 1:
        raise ValueError("ablation needs at least one loss kind, keep fraction and trial")
    for k in loss_kinds:
        AxiomSet.for_loss(k)
    work = [
        (datasets, onto, replace(base, loss_kind=k, keep_fraction=float(f), trials=trials), t)
        for k in loss_kinds
        for f in keep_fractions
        for t in range(1, trials + 1)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_job, work))
    else:
        rows = [_run_job(w) for w in work]
    rows.sort(key=lambda r: (LOSS_KINDS.index(r.loss_kind), -r.keep_fraction, r.trial))
    return AblationResult(rows, summarize(rows))
