"""Spatial ontologies: a bipartite inclusion graph between low-level concepts
(things observed in the mesh, e.g. "sink") and high-level concepts (regions,
e.g. "kitchen"), stored as an m x n biadjacency matrix.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("likely", "sometimes", "rarely")


class OntologyError(ValueError):
    """Malformed ontology data or a failed construction."""


class ConstructionError(OntologyError):
    pass


def _check_unique(items: Sequence[str], what: str) -> None:
    seen = set()
    for s in items:
        if not isinstance(s, str) or not s:
            raise OntologyError(f"{what}: concepts must be non-empty strings, got {s!r}")
        if s in seen:
            raise OntologyError(f"{what}: duplicate concept {s!r}")
        seen.add(s)


@dataclass(frozen=True, eq=False)
class SpatialOntology:
    low_levels: tuple[str, ...]
    high_levels: tuple[str, ...]
    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low_levels", tuple(self.low_levels))
        object.__setattr__(self, "high_levels", tuple(self.high_levels))
        _check_unique(self.low_levels, "low_levels")
        _check_unique(self.high_levels, "high_levels")
        omega = np.asarray(self.omega, dtype=np.float64)
        m, n = len(self.high_levels), len(self.low_levels)
        if omega.shape != (m, n):
            raise OntologyError(f"omega has shape {omega.shape}, expected ({m}, {n}) for |H|={m}, |L|={n}")
        if np.any(omega < 0) or not np.all(np.isfinite(omega)):
            raise OntologyError("omega entries must be finite and non-negative")
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def from_edges(cls, low_levels, high_levels, edges) -> "SpatialOntology":
        """Build from ``(high, low)`` pairs given as indices or concept strings."""
        low_levels, high_levels = list(low_levels), list(high_levels)
        omega = np.zeros((len(high_levels), len(low_levels)))
        hi_index = {h: i for i, h in enumerate(high_levels)}
        lo_index = {l: j for j, l in enumerate(low_levels)}
        for h, l in edges:
            i = hi_index[h] if isinstance(h, str) else int(h)
            j = lo_index[l] if isinstance(l, str) else int(l)
            if not (0 <= i < len(high_levels) and 0 <= j < len(low_levels)):
                raise OntologyError(f"edge ({h}, {l}) out of range")
            omega[i, j] = 1.0
        return cls(low_levels, high_levels, omega)

    @property
    def n_low(self) -> int:
        return len(self.low_levels)

    @property
    def n_high(self) -> int:
        return len(self.high_levels)

    def edges(self) -> list[tuple[int, int]]:
        """(high index, low index) pairs in row-major order."""
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.omega))]

    def edge_names(self) -> list[tuple[str, str]]:
        return [(self.high_levels[i], self.low_levels[j]) for i, j in self.edges()]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialOntology):
            return NotImplemented
        return (
            self.low_levels == other.low_levels
            and self.high_levels == other.high_levels
            and np.array_equal(self.omega, other.omega)
        )

    def __repr__(self) -> str:
        return f"SpatialOntology(|L|={self.n_low}, |H|={self.n_high}, edges={int(np.count_nonzero(self.omega))})"

    def to_dict(self) -> dict:
        return {
            "low_levels": list(self.low_levels),
            "high_levels": list(self.high_levels),
            "edges": [[i, j] for i, j in self.edges()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialOntology":
        if not isinstance(d, dict):
            raise OntologyError("ontology JSON must be an object")
        unknown = set(d) - {"low_levels", "high_levels", "edges", "omega"}
        if unknown:
            raise OntologyError(f"unknown ontology field(s): {sorted(unknown)}")
        for key in ("low_levels", "high_levels"):
            if not isinstance(d.get(key), list):
                raise OntologyError(f"field '{key}' must be a list of strings")
        low, high = d["low_levels"], d["high_levels"]
        if "omega" in d:
            omega = np.asarray(d["omega"], dtype=np.float64)
            if omega.ndim != 2 or omega.shape[0] != len(high):
                raise OntologyError(f"field 'omega' has {len(d['omega'])} rows but there are {len(high)} high_levels")
            return cls(low, high, omega)
        edges = d.get("edges")
        if not isinstance(edges, list):
            raise OntologyError("field 'edges' must be a list of [high_index, low_index] pairs")
        for k, e in enumerate(edges):
            if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
                raise OntologyError(f"edges[{k}]: expected [high_index, low_index], got {e!r}")
            if not (0 <= e[0] < len(high)) or not (0 <= e[1] < len(low)):
                raise OntologyError(f"edges[{k}]: index out of range ({e[0]}, {e[1]})")
        _check_unique(low, "low_levels")
        _check_unique(high, "high_levels")
        return cls.from_edges(low, high, [tuple(e) for e in edges])


def save(onto: SpatialOntology, path) -> None:
    Path(path).write_text(json.dumps(onto.to_dict(), indent=2) + "\n")


def load(path) -> SpatialOntology:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise OntologyError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        return SpatialOntology.from_dict(data)
    except OntologyError as e:
        raise OntologyError(f"{path}: {e}") from e


def normalized_biadjacency(onto: SpatialOntology | np.ndarray) -> np.ndarray:
    """Column-wise l1 normalisation; all-zero columns stay zero."""
    omega = onto.omega if isinstance(onto, SpatialOntology) else np.asarray(onto, dtype=np.float64)
    col = np.abs(omega).sum(axis=0)
    safe = np.where(col > 0, col, 1.0)
    return omega / safe


def drop_unknown(concepts: Sequence[str], unknown: str = "unknown") -> list[str]:
    return [c for c in concepts if c.strip().lower() != unknown]


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


def _pylist(items: Sequence[str]) -> str:
    return "[" + ", ".join(repr(s) for s in items) + "]"


@dataclass(frozen=True)
class PromptTemplates:
    score_template: str = "{low} is often found in {high}"
    completion_template: str = (
        "Which {k} items from {low_levels} are most likely to distinguish {high} from {others}. "
        "Answer with a python list using exact strings in {low_levels}."
    )
    exclusion_suffix: str = " Do not respond with concepts in {excluded}."

    def score(self, low: str, high: str) -> str:
        return self.score_template.format(low=low, high=high)

    def completion(self, k: int, low_levels: Sequence[str], high: str, high_levels: Sequence[str]) -> str:
        others = [h for h in high_levels if h != high]
        return self.completion_template.format(
            k=k, low_levels=_pylist(low_levels), high=high, others=_pylist(others)
        )

    def exclusion(self, excluded: Sequence[str]) -> str:
        return self.exclusion_suffix.format(excluded=_pylist(sorted(excluded)))


class LmScorer(Protocol):
    def score(self, text: str) -> float: ...


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str: ...


# ---------------------------------------------------------------------------
# text scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoringConfig:
    temperature: float
    threshold: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def edge_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``scores / temperature`` along the last axis."""
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def retained_prefix(weights: np.ndarray, threshold: float) -> np.ndarray:
    """Indices kept for one low-level concept.

    Sorted by weight (descending, stable on ties) and cut at the shortest
    prefix whose cumulative weight exceeds ``threshold``.
    """
    order = np.argsort(-weights, kind="stable")
    csum = np.cumsum(weights[order])
    over = np.nonzero(csum > threshold)[0]
    r = int(over[0]) + 1 if over.size else len(order)
    return order[:r]


def build_by_scoring(
    scorer: LmScorer,
    low_levels: Sequence[str],
    high_levels: Sequence[str],
    config: ScoringConfig,
    templates: PromptTemplates = PromptTemplates(),
) -> SpatialOntology:
    if not low_levels or not high_levels:
        raise ConstructionError("vocabularies must be non-empty")
    scores = np.empty((len(low_levels), len(high_levels)))
    for i, low in enumerate(low_levels):
        for j, high in enumerate(high_levels):
            prompt = templates.score(low, high)
            try:
                scores[i, j] = float(scorer.score(prompt))
            except Exception as e:
                raise ConstructionError(f"scorer failed on prompt {prompt!r}: {e}") from e
    weights = edge_weights(scores, config.temperature)
    omega = np.zeros((len(high_levels), len(low_levels)))
    for i in range(len(low_levels)):
        omega[retained_prefix(weights[i], config.threshold), i] = 1.0
    return SpatialOntology(low_levels, high_levels, omega)


# ---------------------------------------------------------------------------
# text completion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompletionConfig:
    k: int
    repeats: int = 1
    max_retries: int = 3
    max_workers: int = 1

    def __post_init__(self):
        if self.k < 1 or self.repeats < 1 or self.max_retries < 1 or self.max_workers < 1:
            raise ValueError("k, repeats, max_retries and max_workers must be positive")


_QUOTED = re.compile(r"""'((?:[^'\\]|\\.)*)'|"((?:[^"\\]|\\.)*)\"""")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_concepts(response: str) -> list[str]:
    """Pull candidate concept strings out of a free-form reply.

    Quoted strings win; otherwise the text is split on commas and newlines
    after dropping list brackets and bullet markers.
    """
    quoted = [a if a else b for a, b in _QUOTED.findall(response)]
    quoted = [q.strip() for q in quoted if q.strip()]
    if quoted:
        return quoted
    body = response.strip().strip("[]()")
    out = []
    for piece in re.split(r"[,\n]", body):
        piece = _BULLET.sub("", piece).strip().strip("[]`'\". ")
        if piece:
            out.append(piece)
    return out


@dataclass
class CompletionTranscript:
    """Every prompt sent for one high-level concept, in order."""

    high: str
    prompts: list[str] = field(default_factory=list)
    responses: list[str] = field(default_factory=list)
    hallucinated: set[str] = field(default_factory=set)
    tally: Counter = field(default_factory=Counter)


def _complete_one(client: ChatClient, i: int, low_levels, high_levels, config, templates) -> CompletionTranscript:
    high = high_levels[i]
    vocab = set(low_levels)
    base = templates.completion(config.k, low_levels, high, high_levels)
    tr = CompletionTranscript(high)
    for rep in range(config.repeats):
        prompt = base
        for attempt in range(config.max_retries):
            reply = client.complete(prompt)
            tr.prompts.append(prompt)
            tr.responses.append(reply)
            tokens = list(dict.fromkeys(parse_concepts(reply)))
            bad = [t for t in tokens if t not in vocab]
            if not bad and tokens:
                tr.tally.update(tokens)
                break
            tr.hallucinated.update(bad)
            log.debug("%s repeat %d attempt %d rejected: %s", high, rep, attempt, bad or "no concepts")
            prompt = base + templates.exclusion(tr.hallucinated) if tr.hallucinated else base
        else:
            unresolved = sorted(tr.hallucinated) or ["<no parsable concept>"]
            raise ConstructionError(
                f"no valid reply for high-level concept {high!r} after {config.max_retries} attempts; "
                f"unresolved: {unresolved}"
            )
    return tr


def build_by_completion(
    client: ChatClient,
    low_levels: Sequence[str],
    high_levels: Sequence[str],
    config: CompletionConfig,
    templates: PromptTemplates = PromptTemplates(),
    transcripts: list | None = None,
) -> SpatialOntology:
    """Ask the client, per high-level concept, for its ``k`` most distinctive
    low-level concepts, ``config.repeats`` times, and keep the ``k`` most
    frequent answers (ties broken alphabetically).

    Pass a list as ``transcripts`` to receive one :class:`CompletionTranscript`
    per high-level concept.
    """
    low_levels, high_levels = list(low_levels), list(high_levels)
    if not low_levels or not high_levels:
        raise ConstructionError("vocabularies must be non-empty")
    if config.k > len(low_levels):
        raise ConstructionError(f"k={config.k} exceeds the number of low-level concepts ({len(low_levels)})")

    def job(i):
        return _complete_one(client, i, low_levels, high_levels, config, templates)

    if config.max_workers > 1:
        with ThreadPoolExecutor(config.max_workers) as pool:
            results = list(pool.map(job, range(len(high_levels))))
    else:
        results = [job(i) for i in range(len(high_levels))]

    lo_index = {l: j for j, l in enumerate(low_levels)}
    omega = np.zeros((len(high_levels), len(low_levels)))
    for i, tr in enumerate(results):
        ranked = sorted(tr.tally.items(), key=lambda kv: (-kv[1], kv[0]))
        if len(ranked) < config.k:
            raise ConstructionError(
                f"only {len(ranked)} distinct concept(s) proposed for {tr.high!r}, need k={config.k}"
            )
        for concept, _ in ranked[: config.k]:
            omega[i, lo_index[concept]] = 1.0
    if transcripts is not None:
        transcripts.extend(results)
    return SpatialOntology(low_levels, high_levels, omega)


# ---------------------------------------------------------------------------
# evaluation against human judgments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelationJudgment:
    low: str
    high: str
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise OntologyError(f"judgment label must be one of {LABELS}, got {self.label!r}")


def load_judgments(path) -> list[RelationJudgment]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise OntologyError(f"{path}: judgments must be a JSON list")
    out = []
    for k, d in enumerate(data):
        try:
            out.append(RelationJudgment(d["low"], d["high"], d["label"]))
        except (KeyError, TypeError) as e:
            raise OntologyError(f"{path}: judgment [{k}] is missing field {e}") from e
    return out


def evaluate_against_reference(onto: SpatialOntology, judgments: Sequence[RelationJudgment]) -> dict:
    """Score edge presence against "likely" (positive) vs "sometimes"/"rarely" (negative)."""
    if not judgments:
        raise OntologyError("no judgments to evaluate against")
    lo = {l: j for j, l in enumerate(onto.low_levels)}
    hi = {h: i for i, h in enumerate(onto.high_levels)}
    tp = fp = fn = tn = 0
    for jd in judgments:
        if jd.low not in lo:
            raise OntologyError(f"judgment references unknown low-level concept {jd.low!r}")
        if jd.high not in hi:
            raise OntologyError(f"judgment references unknown high-level concept {jd.high!r}")
        predicted = onto.omega[hi[jd.high], lo[jd.low]] > 0
        actual = jd.label == "likely"
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    total = tp + fp + fn + tn
    return {
        "accuracy": (tp + tn) / total,
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }
