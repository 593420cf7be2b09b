"""``ontoscene`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
configuration or input.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence


from . import grounding, llm, model as model_mod, ontology as onto_mod, scenegraph as sg
from .grounding import LOSS_KINDS, AblationResult, TrainConfig
from .ontology import CompletionConfig, ConstructionError, OntologyError, ScoringConfig, SpatialOntology
from .scenegraph import SceneGraph, SceneGraphError, SynthConfig
from .validation import (
    ConfigError,
    check_choice,
    check_fraction,
    check_keys,
    check_positive_int,
    check_readable,
    check_writable_dir,
    check_writable_target,
)

log = logging.getLogger("ontoscene")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3

TRIAL_COLUMNS = (
    "loss_kind",
    "keep_fraction",
    "trial",
    "seed",
    "accuracy",
    "masked_class_accuracy",
    "epochs",
    "train_seconds",
    "infer_seconds_per_graph",
)
CELL_COLUMNS = (
    "loss_kind",
    "keep_fraction",
    "trials",
    "completed",
    "mean_accuracy",
    "std_accuracy",
    "mean_masked_class_accuracy",
    "std_masked_class_accuracy",
    "complete",
)
_TIMING = ("train_seconds", "infer_seconds_per_graph")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSection:
    m: int = 6
    n: int = 20
    k: int = 3
    ontology_seed: int = 0
    overlap: bool = False
    num_nodes: int = 2000
    num_regions_per_class: int = 2
    knn_k: int = 6
    histogram_draws: int = 20
    noise_rate: float = 0.2
    region_spread: float = 0.06
    seed: int = 0

    def synth_config(self, onto: SpatialOntology) -> SynthConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(SynthConfig) if f.name != "ontology"}
        return SynthConfig(ontology=onto, **kw)


@dataclass(frozen=True)
class AblationSection:
    loss_kinds: tuple[str, ...] = LOSS_KINDS
    keep_fractions: tuple[float, ...] = (1.0, 0.1, 0.01, 0.004, 0.002, 0.001)
    trials: int = 10
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "loss_kinds", tuple(self.loss_kinds))
        object.__setattr__(self, "keep_fractions", tuple(float(f) for f in self.keep_fractions))
        if not self.loss_kinds or not self.keep_fractions:
            raise ConfigError("ablation needs at least one loss kind and one keep fraction")
        for k in self.loss_kinds:
            check_choice(k, "ablation.loss_kinds", LOSS_KINDS)
        for f in self.keep_fractions:
            check_fraction(f, "ablation.keep_fractions")
        check_positive_int(self.trials, "ablation.trials")
        check_positive_int(self.jobs, "ablation.jobs")


@dataclass(frozen=True)
class ScoringSection:
    temperature: float = 1.0
    threshold: float | None = None  # no default: must be chosen per vocabulary


@dataclass(frozen=True)
class CompletionSection:
    k: int = 3
    repeats: int = 1
    max_retries: int = 3
    max_workers: int = 1


@dataclass(frozen=True)
class LlmSection:
    model: str | None = None
    endpoint: str | None = None
    timeout: float = 60.0
    cache_dir: str | None = None
    temperature: float = 1.0


@dataclass(frozen=True)
class MockSection:
    ontology: str | None = None  # path; default: a planted ontology over the vocabulary
    seed: int = 0
    hallucination_rate: float = 0.0


@dataclass(frozen=True)
class PathsSection:
    graphs: tuple[str, ...] = ()
    ontology: str | None = None
    vocab: str | None = None
    judgments: str | None = None
    model: str | None = None
    out: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        g = self.graphs
        object.__setattr__(self, "graphs", (g,) if isinstance(g, str) else tuple(g))


SECTIONS = {
    "synth": SynthSection,
    "train": TrainConfig,
    "ablation": AblationSection,
    "scoring": ScoringSection,
    "completion": CompletionSection,
    "llm": LlmSection,
    "mock": MockSection,
    "paths": PathsSection,
}


@dataclass(frozen=True)
class RunConfig:
    synth: SynthSection = SynthSection()
    train: TrainConfig = TrainConfig()
    ablation: AblationSection = AblationSection()
    scoring: ScoringSection = ScoringSection()
    completion: CompletionSection = CompletionSection()
    llm: LlmSection = LlmSection()
    mock: MockSection = MockSection()
    paths: PathsSection = PathsSection()

    @classmethod
    def from_dict(cls, d: dict, where: str = "config") -> "RunConfig":
        check_keys(d, SECTIONS, where)
        kwargs = {}
        for name, section in SECTIONS.items():
            raw = d.get(name, {})
            check_keys(raw, [f.name for f in fields(section)], f"{where}.{name}")
            try:
                kwargs[name] = section(**raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{where}.{name}: {e}") from e
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out


def _parse_override(text: str) -> tuple[str, str, object]:
    key, sep, value = text.partition("=")
    section, dot, field_name = key.partition(".")
    if not sep or not dot or not field_name:
        raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value  # bare strings
    return section, field_name, parsed


def resolve_config(path: str | None, overrides: Sequence[tuple[str, str, object]]) -> RunConfig:
    """File values, then ``overrides`` (section, key, value) on top."""
    data: dict = {}
    if path:
        p = check_readable(path, "config file")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    for section, key, value in overrides:
        data.setdefault(section, {})
        if not isinstance(data[section], dict):
            raise ConfigError(f"config section {section!r} must be an object")
        data[section][key] = value
    return RunConfig.from_dict(data, where=str(path) if path else "config")


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(json.dumps(obj, indent=2) + "\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _sidecar(out: Path) -> Path:
    return out.with_name(out.stem + ".config.json")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def emit_report(result: AblationResult, out_dir, timing: bool = False) -> list[Path]:
    """Write ``trials.csv``, ``cells.csv`` and ``summary.json`` into ``out_dir``.

    Timing columns stay empty unless ``timing`` is set, so reruns are
    byte-identical.  Every file is staged first and only then renamed into
    place.
    """
    if not result.rows or not result.cells:
        raise ValueError("no ablation results to report")
    out_dir = Path(out_dir)
    rows = []
    for r in result.rows:
        d = asdict(r)
        if not timing:
            for c in _TIMING:
                d[c] = None
        rows.append(d)
    cells = [asdict(c) for c in result.cells]
    summary = {
        "complete": all(c.complete for c in result.cells),
        "cells": cells,
        "failures": [
            {"loss_kind": r.loss_kind, "keep_fraction": r.keep_fraction, "trial": r.trial, "error": r.error}
            for r in result.rows
            if r.status != "ok"
        ],
    }
    payload = {
        "trials.csv": _csv_text(TRIAL_COLUMNS, rows),
        "cells.csv": _csv_text(CELL_COLUMNS, cells),
        "summary.json": json.dumps(summary, indent=2) + "\n",
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in payload.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w") as f:
                f.write(text)
            staged.append((tmp, out_dir / name))
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)
    return [dest for _, dest in staged]


# ---------------------------------------------------------------------------
# loading helpers
# ---------------------------------------------------------------------------


def _load_graph(path) -> SceneGraph:
    check_readable(path, "scene graph")
    try:
        return sg.load(path)
    except SceneGraphError as e:
        raise ConfigError(str(e)) from e


def _load_ontology(path) -> SpatialOntology:
    check_readable(path, "ontology")
    try:
        return onto_mod.load(path)
    except ConstructionError:
        raise
    except OntologyError as e:
        raise ConfigError(str(e)) from e


def _load_model(path):
    check_readable(path, "model")
    try:
        model, extra = model_mod.load_checkpoint(path)
        encoder = sg.FeatureEncoder.from_state(extra["encoder"])
        onto = SpatialOntology.from_dict(extra["ontology"])
        train_cfg = extra.get("train_config", {})
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: not a usable model file ({e})") from e
    return model, encoder, onto, train_cfg


def _load_vocab(path) -> tuple[list[str], list[str]]:
    p = check_readable(path, "vocabulary")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    check_keys(d, ("low_levels", "high_levels"), str(p))
    try:
        low, high = list(d["low_levels"]), list(d["high_levels"])
    except KeyError as e:
        raise ConfigError(f"{p}: missing field {e}") from e
    if not low or not high:
        raise ConfigError(f"{p}: vocabularies must be non-empty")
    return low, high


def _first(*values):
    for v in values:
        if v:
            return v
    return None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _mock_ontology(cfg: RunConfig, low, high, k: int) -> SpatialOntology:
    if cfg.mock.ontology:
        return _load_ontology(cfg.mock.ontology)
    if low is None:
        raise ConfigError("--mock needs a vocabulary (--vocab) or a mock ontology (mock.ontology)")
    planted = sg.planted_ontology(len(high), len(low), min(k, len(low)), seed=cfg.mock.seed, overlap=True)
    return SpatialOntology(low, high, planted.omega)


def _vocab_for(cfg: RunConfig, args):
    path = _first(args.vocab, cfg.paths.vocab)
    return _load_vocab(path) if path else (None, None)


def cmd_ontology_score(args, cfg: RunConfig) -> int:
    out = Path(_first(args.out, cfg.paths.out) or "")
    if not str(out):
        raise ConfigError("ontology score needs --out")
    check_writable_target(out)
    if cfg.scoring.threshold is None:
        raise ConfigError("scoring.threshold has no default; set it in the config or with --threshold")
    try:
        sconf = ScoringConfig(cfg.scoring.temperature, cfg.scoring.threshold)
    except ValueError as e:
        raise ConfigError(f"scoring: {e}") from e
    low, high = _vocab_for(cfg, args)
    if args.mock:
        ref = _mock_ontology(cfg, low, high, cfg.completion.k)
        low, high = low or list(ref.low_levels), high or list(ref.high_levels)
        scorer = llm.PlantedScorer(ref, seed=cfg.mock.seed)
    else:
        if low is None:
            raise ConfigError("ontology score needs --vocab")
        scorer = llm.scorer_from_env(
            cache_dir=cfg.llm.cache_dir, endpoint=cfg.llm.endpoint, model=cfg.llm.model, timeout=cfg.llm.timeout
        )
    result = onto_mod.build_by_scoring(scorer, low, high, sconf)
    write_json_atomic(out, result.to_dict())
    write_json_atomic(_sidecar(out), {"command": "ontology score", "mock": args.mock, **cfg.to_dict()})
    return EXIT_OK


def cmd_ontology_complete(args, cfg: RunConfig) -> int:
    out = Path(_first(args.out, cfg.paths.out) or "")
    if not str(out):
        raise ConfigError("ontology complete needs --out")
    check_writable_target(out)
    c = cfg.completion
    try:
        cconf = CompletionConfig(c.k, c.repeats, c.max_retries, c.max_workers)
    except ValueError as e:
        raise ConfigError(f"completion: {e}") from e
    low, high = _vocab_for(cfg, args)
    if args.mock:
        ref = _mock_ontology(cfg, low, high, c.k)
        low, high = low or list(ref.low_levels), high or list(ref.high_levels)
        client = llm.PlantedChatClient(ref, seed=cfg.mock.seed, hallucination_rate=cfg.mock.hallucination_rate)
    else:
        client = llm.client_from_env(
            cache_dir=cfg.llm.cache_dir,
            endpoint=cfg.llm.endpoint,
            model=cfg.llm.model,
            timeout=cfg.llm.timeout,
            temperature=cfg.llm.temperature,
        )
        if low is None:
            raise ConfigError("ontology complete needs --vocab")
    transcripts: list = []
    result = onto_mod.build_by_completion(client, low, high, cconf, transcripts=transcripts)
    write_json_atomic(out, result.to_dict())
    write_json_atomic(
        out.with_name(out.stem + ".transcripts.json"),
        [
            {"high": t.high, "prompts": t.prompts, "responses": t.responses, "rejected": sorted(t.hallucinated)}
            for t in transcripts
        ],
    )
    write_json_atomic(_sidecar(out), {"command": "ontology complete", "mock": args.mock, **cfg.to_dict()})
    return EXIT_OK


def cmd_ontology_eval(args, cfg: RunConfig) -> int:
    onto_path = _first(args.ontology, cfg.paths.ontology)
    judg_path = _first(args.judgments, cfg.paths.judgments)
    if not onto_path or not judg_path:
        raise ConfigError("ontology eval needs --ontology and --judgments")
    onto = _load_ontology(onto_path)
    check_readable(judg_path, "judgments")
    try:
        judgments = onto_mod.load_judgments(judg_path)
        metrics = onto_mod.evaluate_against_reference(onto, judgments)
    except (OntologyError, json.JSONDecodeError) as e:
        raise ConfigError(str(e)) from e
    out = _first(args.out, cfg.paths.out)
    if out:
        check_writable_target(out)
        write_json_atomic(out, metrics)
    else:
        print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _first(args.out, cfg.paths.out)
    if not out:
        raise ConfigError("synth needs --out")
    out = check_writable_target(out)
    onto_out = Path(args.ontology_out) if args.ontology_out else out.with_name(out.stem + ".ontology.json")
    check_writable_target(onto_out)
    s = cfg.synth
    onto_path = _first(args.ontology, cfg.paths.ontology)
    try:
        onto = _load_ontology(onto_path) if onto_path else sg.planted_ontology(s.m, s.n, s.k, s.ontology_seed, s.overlap)
        graph = sg.generate_synthetic(s.synth_config(onto))
    except (ValueError, SceneGraphError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"synth: {e}") from e
    write_json_atomic(out, graph.to_dict())
    write_json_atomic(onto_out, onto.to_dict())
    write_json_atomic(_sidecar(out), {"command": "synth", **cfg.to_dict()})
    return EXIT_OK


def _graphs_and_ontology(args, cfg: RunConfig, need_ontology: bool = True):
    paths = list(args.graph or []) or list(cfg.paths.graphs)
    if not paths:
        raise ConfigError("at least one --graph is required")
    onto_path = _first(getattr(args, "ontology", None), cfg.paths.ontology)
    if need_ontology and not onto_path:
        raise ConfigError("--ontology is required")
    for p in paths:
        check_readable(p, "scene graph")
    onto = _load_ontology(onto_path) if onto_path else None
    return [_load_graph(p) for p in paths], onto


def cmd_train(args, cfg: RunConfig) -> int:
    out_dir = _first(args.out_dir, cfg.paths.out_dir)
    if not out_dir:
        raise ConfigError("train needs --out-dir")
    out_dir = check_writable_dir(out_dir)
    graphs, onto = _graphs_and_ontology(args, cfg)
    tc = cfg.train
    seed = args.seed
    try:
        for g in graphs:
            grounding.align_to_ontology(g, onto)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    trial_graphs = grounding.prepare_trial_graphs(graphs, tc, seed)
    res = grounding.train(trial_graphs, onto, tc, seed=seed)
    metrics = grounding.evaluate(res.model, res.encoder, graphs, onto, "test", tc.masked_classes)
    extra = {"encoder": res.encoder.state(), "ontology": onto.to_dict(), "train_config": tc.to_dict(), "trial_seed": seed}
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json_atomic(out_dir / "model.json", res.model.to_dict(extra))
    m = metrics.to_dict(timing=args.timing)
    m["epochs"] = res.history.epochs
    m["best_epoch"] = res.history.best_epoch
    m["stop_reason"] = res.history.stop_reason
    if args.timing:
        m["train_seconds"] = res.train_seconds
    write_json_atomic(out_dir / "metrics.json", m)
    write_json_atomic(out_dir / "history.json", res.history.to_dict())
    write_json_atomic(out_dir / "config.json", {"command": "train", "seed": seed, **cfg.to_dict()})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model_path = _first(args.model, cfg.paths.model)
    if not model_path:
        raise ConfigError("eval needs --model")
    model, encoder, stored_onto, train_cfg = _load_model(model_path)
    graphs, onto = _graphs_and_ontology(args, cfg, need_ontology=False)
    onto = onto or stored_onto
    out = _first(args.out, cfg.paths.out)
    if out:
        check_writable_target(out)
    masked = train_cfg.get("masked_classes", [])
    try:
        metrics = grounding.evaluate(model, encoder, graphs, onto, args.split, masked)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    m = metrics.to_dict(timing=args.timing)
    if out:
        write_json_atomic(out, m)
        write_json_atomic(_sidecar(Path(out)), {"command": "eval", "split": args.split, **cfg.to_dict()})
    else:
        print(json.dumps(m))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out_dir = _first(args.out_dir, cfg.paths.out_dir)
    if not out_dir:
        raise ConfigError("ablate needs --out-dir")
    out_dir = check_writable_dir(out_dir)
    graphs, onto = _graphs_and_ontology(args, cfg)
    a = cfg.ablation
    try:
        for g in graphs:
            grounding.align_to_ontology(g, onto)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    result = grounding.run_ablation(graphs, onto, a.loss_kinds, a.keep_fractions, a.trials, cfg.train, jobs=a.jobs)
    emit_report(result, out_dir, timing=args.timing)
    write_json_atomic(out_dir / "config.json", {"command": "ablate", **cfg.to_dict()})
    incomplete = [c for c in result.cells if not c.complete]
    if incomplete:
        log.warning("%d cell(s) incomplete; see summary.json", len(incomplete))
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    model_path = _first(args.model, cfg.paths.model)
    out = _first(args.out, cfg.paths.out)
    if not model_path or not out:
        raise ConfigError("predict needs --model and --out")
    check_writable_target(out)
    model, encoder, stored_onto, _ = _load_model(model_path)
    graphs, onto = _graphs_and_ontology(args, cfg, need_ontology=False)
    if len(graphs) != 1:
        raise ConfigError("predict takes exactly one --graph")
    onto = onto or stored_onto
    try:
        graph = grounding.align_to_ontology(graphs[0], onto)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    probs, _ = grounding.infer(model, encoder, graph, onto)
    labeled = graph.with_labels(grounding.predict_labels(probs))
    write_json_atomic(out, labeled.to_dict())
    return EXIT_OK


PALETTE = (
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4",
    "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080",
    "#e6beff", "#9a6324", "#fffac8", "#800000", "#aaffc3",
)
_SPLIT_COLORS = {"train": "#4363d8", "val": "#f58231", "test": "#3cb44b"}


def graph_to_dot(graph: SceneGraph, color_by: str = "label", scale: float = 10.0) -> str:
    """Undirected DOT with fixed node positions (x, y) for ``neato -n``."""
    lines = ["graph places {", '  node [shape=circle, style=filled, width=0.12, label=""];']
    if color_by == "label":
        legend = ", ".join(f"{PALETTE[i % len(PALETTE)]}={h}" for i, h in enumerate(graph.high_levels))
        lines.append(f"  // colors: {legend}")
    for i in range(graph.num_nodes):
        x, y, _ = graph.positions[i]
        if color_by == "label":
            lab = int(graph.labels[i])
            color = "#bbbbbb" if lab == sg.NO_LABEL else PALETTE[lab % len(PALETTE)]
        else:
            color = _SPLIT_COLORS[graph.splits[i]]
        lines.append(f'  {i} [pos="{x * scale:.4f},{y * scale:.4f}!", fillcolor="{color}"];')
    for u, v in graph.edges:
        lines.append(f"  {u} -- {v};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export_dot(args, cfg: RunConfig) -> int:
    out = _first(args.out, cfg.paths.out)
    if not out:
        raise ConfigError("export-dot needs --out")
    check_writable_target(out)
    graphs, _ = _graphs_and_ontology(args, cfg, need_ontology=False)
    if len(graphs) != 1:
        raise ConfigError("export-dot takes exactly one --graph")
    Path(out).write_text(graph_to_dot(graphs[0], args.color_by))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (JSON-parsed), repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def _graph_args(p, model: bool = False, ontology: bool = True) -> None:
    p.add_argument("--graph", action="append", help="scene-graph JSON (repeatable)")
    if ontology:
        p.add_argument("--ontology", help="ontology JSON")
    if model:
        p.add_argument("--model", help="model checkpoint from 'train'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ontoscene", description="Ontology-guided region classification for scene-graph places.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    onto = sub.add_parser("ontology", help="build or evaluate a spatial ontology")
    osub = onto.add_subparsers(dest="ontology_command", metavar="ACTION", parser_class=_Parser)
    osub.required = True
    for name, helptext in (("score", "text-scoring builder"), ("complete", "text-completion builder")):
        p = osub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--vocab", help='JSON {"low_levels": [...], "high_levels": [...]}')
        p.add_argument("--out", help="ontology JSON to write")
        p.add_argument("--mock", action="store_true", help="use the deterministic offline language model")
        if name == "score":
            p.add_argument("--temperature", type=float)
            p.add_argument("--threshold", type=float)
        else:
            p.add_argument("--k", type=int)
            p.add_argument("--repeats", type=int)
    p = osub.add_parser("eval", help="precision/recall against relation judgments")
    _common(p)
    p.add_argument("--ontology")
    p.add_argument("--judgments", help='JSON list of {"low", "high", "label"}')
    p.add_argument("--out")

    p = sub.add_parser("synth", help="generate a synthetic scene graph and its planted ontology")
    _common(p)
    p.add_argument("--out", help="scene-graph JSON to write")
    p.add_argument("--ontology", help="plant from this ontology instead of a random one")
    p.add_argument("--ontology-out", help="where to write the ontology (default: <out>.ontology.json)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _graph_args(p)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=1, help="trial seed (default 1)")
    p.add_argument("--loss-kind", choices=LOSS_KINDS)
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--timing", action="store_true", help="include wall-clock fields in outputs")

    p = sub.add_parser("eval", help="evaluate a trained model")
    _common(p)
    _graph_args(p, model=True)
    p.add_argument("--split", default="test", choices=sg.SPLITS)
    p.add_argument("--out")
    p.add_argument("--timing", action="store_true")

    p = sub.add_parser("ablate", help="loss-kind x keep-fraction x trial sweep")
    _common(p)
    _graph_args(p)
    p.add_argument("--out-dir")
    p.add_argument("--jobs", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--loss-kinds", help="comma-separated")
    p.add_argument("--keep-fractions", help="comma-separated")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--timing", action="store_true")

    p = sub.add_parser("predict", help="write predicted labels into a scene graph")
    _common(p)
    _graph_args(p, model=True)
    p.add_argument("--out")

    p = sub.add_parser("export-dot", help="render a place graph as Graphviz DOT")
    _common(p)
    _graph_args(p, ontology=False)
    p.add_argument("--out")
    p.add_argument("--color-by", choices=("label", "split"), default="label")
    return parser


def _flag_overrides(args) -> list[tuple[str, str, object]]:
    ov = [_parse_override(s) for s in args.overrides]
    pick = lambda name: getattr(args, name, None)  # noqa: E731
    mapping = [
        ("temperature", "scoring", "temperature"),
        ("threshold", "scoring", "threshold"),
        ("k", "completion", "k"),
        ("repeats", "completion", "repeats"),
        ("loss_kind", "train", "loss_kind"),
        ("keep_fraction", "train", "keep_fraction"),
        ("max_epochs", "train", "max_epochs"),
        ("jobs", "ablation", "jobs"),
        ("trials", "ablation", "trials"),
    ]
    for attr, section, key in mapping:
        if pick(attr) is not None:
            ov.append((section, key, pick(attr)))
    if args.command == "synth" and pick("seed") is not None:
        ov.append(("synth", "seed", args.seed))
    if pick("loss_kinds"):
        ov.append(("ablation", "loss_kinds", [s.strip() for s in args.loss_kinds.split(",") if s.strip()]))
    if pick("keep_fractions"):
        try:
            fr = [float(s) for s in args.keep_fractions.split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError(f"--keep-fractions: {e}") from e
        ov.append(("ablation", "keep_fractions", fr))
    return ov


COMMANDS = {
    ("ontology", "score"): cmd_ontology_score,
    ("ontology", "complete"): cmd_ontology_complete,
    ("ontology", "eval"): cmd_ontology_eval,
    ("synth", None): cmd_synth,
    ("train", None): cmd_train,
    ("eval", None): cmd_eval,
    ("ablate", None): cmd_ablate,
    ("predict", None): cmd_predict,
    ("export-dot", None): cmd_export_dot,
}


def _fail(code: int, kind: str, message: str) -> int:
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[(args.command, getattr(args, "ontology_command", None))]
    try:
        cfg = resolve_config(args.config, _flag_overrides(args))
        return handler(args, cfg)
    except llm.MissingCredentials as e:
        return _fail(EXIT_CONFIG, "config", f"{e}; set {e.var} or pass --mock")
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except (ConstructionError, grounding.TrainingAborted, llm.TransportError, OSError) as e:
        return _fail(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}")
    except Exception as e:  # anything else is still a single-line runtime failure
        log.debug("unhandled error", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}")


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
