"""scikit-learn style wrapper around :func:`grounding.train`.

Samples are whole scene graphs rather than rows of a feature matrix, so
``fit`` takes a graph (or list of graphs) and reads labels and splits from it.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import grounding
from .grounding import TrainConfig
from .ontology import SpatialOntology
from .scenegraph import SceneGraph

_TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig) if f.name != "trials")


class OntologyRegionClassifier(ClassifierMixin, BaseEstimator):
    def __init__(
        self,
        ontology: SpatialOntology | None = None,
        loss_kind: str = "sat_both",
        learning_rate: float = 0.001,
        weight_decay: float = 5e-5,
        max_epochs: int = 1000,
        convergence_delta: float = 1e-6,
        convergence_patience: int = 10,
        keep_fraction: float = 1.0,
        masked_classes: tuple = (),
        mask_scope: str = "train_only",
        incl_scope: str = "train_val",
        p_forall_equiv: float = 2.0,
        p_forall_incl: float = 4.0,
        p_satagg: float = 2.0,
        hidden_dim: int = 32,
        layers: int = 3,
        heads: int = 4,
        dropout: float = 0.25,
        embed_dim: int = 32,
        seed: int = 1,
    ):
        self.ontology = ontology
        self.loss_kind = loss_kind
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.convergence_delta = convergence_delta
        self.convergence_patience = convergence_patience
        self.keep_fraction = keep_fraction
        self.masked_classes = masked_classes
        self.mask_scope = mask_scope
        self.incl_scope = incl_scope
        self.p_forall_equiv = p_forall_equiv
        self.p_forall_incl = p_forall_incl
        self.p_satagg = p_satagg
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.heads = heads
        self.dropout = dropout
        self.embed_dim = embed_dim
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in _TRAIN_FIELDS}, trials=1)

    def fit(self, X, y=None):
        """Train on graph(s) ``X``; labels come from the graphs, ``y`` is ignored."""
        if self.ontology is None:
            raise ValueError("an ontology is required")
        cfg = self.train_config()
        graphs = _as_graphs(X)
        graphs = grounding.prepare_trial_graphs(graphs, cfg, self.seed)
        res = grounding.train(graphs, self.ontology, cfg, seed=self.seed)
        self.model_ = res.model
        self.encoder_ = res.encoder
        self.history_ = res.history
        self.classes_ = np.arange(self.ontology.n_high)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        out = [grounding.infer(self.model_, self.encoder_, g, self.ontology)[0] for g in _as_graphs(X)]
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return grounding.predict_labels(self.predict_proba(X))

    def score(self, X, y=None, sample_weight=None, split: str = "test") -> float:
        """Accuracy on the labelled ``split`` nodes, or against ``y`` when given."""
        if y is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "model_")
        return grounding.evaluate(self.model_, self.encoder_, _as_graphs(X), self.ontology, split).accuracy


def _as_graphs(X) -> list[SceneGraph]:
    graphs = [X] if isinstance(X, SceneGraph) else list(X)
    if not graphs or not all(isinstance(g, SceneGraph) for g in graphs):
        raise TypeError("expected a SceneGraph or a non-empty sequence of SceneGraphs")
    return graphs
