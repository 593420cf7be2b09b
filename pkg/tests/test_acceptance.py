"""Acceptance suite: one PASS/FAIL line per criterion.

The two training-heavy criteria honour ``ONTOSCENE_ACCEPT_EPOCHS`` (default
200) and ``ONTOSCENE_ACCEPT_TRIALS`` (default 10); set the former to 1000 for
the full-length protocol.
"""

import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ontoscene import cli
from ontoscene import diffcore as dc
from ontoscene import fuzzy
from ontoscene import grounding as gr
from ontoscene import ontology as om
from ontoscene import scenegraph as sg
from ontoscene.llm import PlantedChatClient, ScriptedChatClient, TableScorer
from ontoscene.model import GraphIndex, ModelDims, RegionClassifier
from ontoscene.ontology import CompletionConfig, PromptTemplates, RelationJudgment, ScoringConfig, SpatialOntology
from test_diffcore import _op_cases

EPOCHS = int(os.environ.get("ONTOSCENE_ACCEPT_EPOCHS", "200"))
TRIALS = int(os.environ.get("ONTOSCENE_ACCEPT_TRIALS", "10"))
FRACTIONS = (1.0, 0.1, 0.01, 0.004, 0.002, 0.001)
CELL_LIMIT_S = 300.0


@pytest.fixture(scope="module")
def synthetic():
    onto = sg.planted_ontology(6, 20, 3, seed=0)
    graph = sg.generate_synthetic(sg.SynthConfig(onto, num_nodes=2000, noise_rate=0.2, seed=0))
    return onto, graph


def test_criterion_01_gradients(criterion):
    t0 = time.perf_counter()
    worst, checks = 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for _, f, leaves in _op_cases(rng):
            worst = max(worst, dc.gradcheck(f, leaves))
            checks += 1
        a = dc.Tensor(rng.uniform(0.05, 0.95, 8), requires_grad=True)
        b = dc.Tensor(rng.uniform(0.05, 0.95, 8), requires_grad=True)
        b.data = np.where(np.abs(a.data - b.data) < 1e-2, np.clip(b.data + 0.05, 0, 0.99), b.data)
        b.data = np.where(np.abs(a.data + b.data - 1.0) < 1e-2, b.data * 0.9, b.data)
        w = rng.normal(size=8)
        logic = [
            lambda: dc.sum_all(dc.mul(fuzzy.not_std(a), w)),
            lambda: dc.sum_all(dc.mul(fuzzy.and_prod(a, b), w)),
            lambda: dc.sum_all(dc.mul(fuzzy.or_probsum(a, b), w)),
            lambda: dc.sum_all(dc.mul(fuzzy.lukasiewicz(a, b, "and"), w)),
            lambda: dc.sum_all(dc.mul(fuzzy.lukasiewicz(a, b, "or"), w)),
            lambda: dc.sum_all(dc.mul(fuzzy.implies_goguen(a, b), w)),
            lambda: dc.sum_all(dc.mul(fuzzy.implies_reichenbach(a, b), w)),
            lambda: fuzzy.forall_pme(a, 2),
            lambda: fuzzy.forall_pme(b, 4),
            lambda: fuzzy.sat_agg([fuzzy.forall_pme(a, 2), fuzzy.forall_pme(b, 4)], 2),
        ]
        for f in logic:
            worst = max(worst, dc.gradcheck(f, [a, b]))
            checks += 1
        # full GAT + MLP forward, parameters jittered away from ReLU kinks
        n = 8
        edges = np.array([[i, (i + 1) % n] for i in range(n - 1)] + [[0, 5], [2, 6]])
        gi = GraphIndex(n, edges)
        model = RegionClassifier(ModelDims(4, 3, hidden_dim=6, layers=2, heads=2, dropout=0.2), seed=seed)
        for p in model.parameters():
            p.data = p.data + 0.3 * rng.normal(size=p.shape)
        x = dc.Tensor(rng.normal(size=(n, 4)), requires_grad=True)
        wn = rng.normal(size=(n, 3))
        fwd = lambda: dc.sum_all(dc.mul(model.forward(x, gi, training=True, seed=(seed, 0)), wn))  # noqa: E731
        worst = max(worst, dc.gradcheck(fwd, model.parameters() + [x]))
        checks += 1
    elapsed = time.perf_counter() - t0
    criterion(
        1,
        "gradient correctness",
        worst < 1e-4 and elapsed < 60.0,
        f"{checks} gradchecks over 20 seeds, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)",
    )


def _connected_mass(omega, q):
    total = sum(q)
    return sum(q[j] for j in range(len(q)) if any(row[j] > 0 for row in omega)) / total if total else 0.0


def test_criterion_02_predicates(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        m, n = int(rng.integers(1, 8)), int(rng.integers(1, 16))
        omega = (rng.random((m, n)) < 0.35) * rng.uniform(0.1, 3.0, (m, n))
        q = rng.integers(0, 6, n).astype(float)
        onto = SpatialOntology([f"l{j}" for j in range(n)], [f"h{i}" for i in range(m)], omega)
        q_hat = sg.l1_normalize_rows(q[None])[0]
        got = gr.is_valid(om.normalized_biadjacency(onto), q_hat)
        worst = max(worst, abs(got - _connected_mass(omega.tolist(), q.tolist())))
    onto = SpatialOntology.from_edges(["l1", "l2", "l3"], ["h1", "h2"], [(0, 0), (1, 0), (0, 1)])
    sim = gr.is_similar([0.6, 0.4], om.normalized_biadjacency(onto), np.array([2.0, 1.0, 1.0]) / 4).item()
    criterion(
        2,
        "predicate oracles",
        worst <= 1e-12 and abs(sim - 0.4) <= 1e-12,
        f"is_valid worst |err| {worst:.1e} over 100 instances (<= 1e-12); worked is_similar = {sim:.15f} (0.4)",
    )


def test_criterion_03_scoring(criterion):
    rng = np.random.default_rng(3)
    sum_err, minimal = 0.0, True
    for _ in range(200):
        w = om.edge_weights(rng.uniform(-30, 0, rng.integers(1, 12)), float(rng.uniform(0.05, 20)))
        gamma = float(rng.uniform(0.01, 0.99))
        sum_err = max(sum_err, abs(w.sum() - 1.0))
        kept = om.retained_prefix(w, gamma)
        # the prefix must exceed gamma, and dropping its last element must not
        minimal &= (w[kept].sum() > gamma or len(kept) == len(w)) and w[kept[:-1]].sum() <= gamma
    high = ["kitchen", "bathroom", "bedroom", "office"]
    table = TableScorer({PromptTemplates().score("sink", h): s for h, s in zip(high, (-1.0, -2.0, -3.0, -4.0))})
    edges = int(om.build_by_scoring(table, ["sink"], high, ScoringConfig(1.0, 0.8)).omega.sum())
    criterion(
        3,
        "scoring builder",
        sum_err <= 1e-9 and minimal and edges == 2,
        f"max |sum-1| {sum_err:.1e} (<= 1e-9); minimal prefix on 200 draws: {minimal}; fixture edges {edges} (2)",
    )


def test_criterion_04_completion(criterion):
    planted = sg.planted_ontology(6, 20, 3, seed=4)
    recovered = om.build_by_completion(
        PlantedChatClient(planted, seed=0), planted.low_levels, planted.high_levels, CompletionConfig(k=3)
    )
    replies = {"living room": iter(["['sofa', 'sofa-bed', 'tv']", "['sofa', 'tv']"]), "bedroom": iter(["['bed', 'tv']"])}
    client = ScriptedChatClient(lambda p: next(replies["living room" if "distinguish living room" in p else "bedroom"]))
    om.build_by_completion(client, ["sofa", "bed", "tv", "sink"], ["living room", "bedroom"], CompletionConfig(k=2))
    suffixed = [p for p in client.prompts if "Do not respond with concepts in" in p]
    seq = iter(["['a', 'b']", "['a', 'c']", "['a', 'b']"])
    tally = om.build_by_completion(
        ScriptedChatClient(lambda p: next(seq)), ["a", "b", "c", "d"], ["h"], CompletionConfig(k=2, repeats=3)
    )
    ok = recovered == planted and len(suffixed) == 1 and tally.edge_names() == [("h", "a"), ("h", "b")]
    criterion(
        4,
        "completion builder",
        ok,
        f"planted recovered: {recovered == planted}; suffixed re-queries: {len(suffixed)} (1); "
        f"tally top-2: {[l for _, l in tally.edge_names()]} (['a', 'b'])",
    )


@pytest.mark.slow
def test_criterion_05_sparse_label_trend(criterion, synthetic):
    onto, graph = synthetic
    base = gr.TrainConfig(max_epochs=EPOCHS)
    cells = [("cross_entropy", 0.001), ("sat_both", 0.001), ("sat_incl", 0.001), ("cross_entropy", 1.0), ("sat_both", 1.0)]
    acc, seconds, epochs = {}, {}, {}
    for loss, frac in cells:
        t0 = time.perf_counter()
        res = gr.run_ablation(graph, onto, [loss], [frac], TRIALS, base)
        seconds[loss, frac] = time.perf_counter() - t0
        c = res.cells[0]
        assert c.complete, [r.error for r in res.rows if r.status != "ok"]
        acc[loss, frac] = 100 * c.mean_accuracy
        epochs[loss, frac] = np.mean([r.epochs for r in res.rows])
    both, ce, incl = acc["sat_both", 0.001], acc["cross_entropy", 0.001], acc["sat_incl", 0.001]
    gap_full = abs(acc["sat_both", 1.0] - acc["cross_entropy", 1.0])
    slowest = max(seconds.values())
    per_epoch = max(seconds[k] / (TRIALS * epochs[k]) for k in cells)
    ok = both >= ce + 10 and both >= incl - 2 and gap_full <= 5 and slowest < CELL_LIMIT_S
    criterion(
        5,
        "sparse-label trend",
        ok,
        f"keep 0.001: Both {both:.1f} vs CE {ce:.1f} (>= +10) and Incl {incl:.1f} (>= -2); "
        f"keep 1.0: |Both-CE| {gap_full:.1f} (<= 5); {TRIALS} trials x {EPOCHS} max epochs, slowest cell "
        f"{slowest:.0f}s (< {CELL_LIMIT_S:.0f}s), {1000 * per_epoch:.0f} ms/epoch",
    )


@pytest.mark.slow
def test_criterion_06_zero_shot(criterion, synthetic):
    onto, graph = synthetic
    trials = min(TRIALS, 3)
    chance = 1 / onto.n_high
    base = gr.TrainConfig(max_epochs=EPOCHS, masked_classes=(0, 1))
    res = gr.run_ablation(graph, onto, ["cross_entropy", "sat_incl", "sat_both"], [1.0], trials, base)
    masked = {c.loss_kind: c.mean_masked_class_accuracy for c in res.cells}
    ok = masked["sat_incl"] > 2 * chance and masked["sat_both"] > 2 * chance and masked["cross_entropy"] < chance
    criterion(
        6,
        "zero-shot masked classes",
        ok,
        f"masked-class acc over {trials} trials: Incl {masked['sat_incl']:.3f}, Both {masked['sat_both']:.3f} "
        f"(> {2 * chance:.3f}); CE {masked['cross_entropy']:.3f} (< {chance:.3f})",
    )


@pytest.mark.slow
def test_criterion_07_incl_label_independence(criterion, synthetic):
    onto, graph = synthetic
    res = gr.run_ablation(graph, onto, ["sat_incl"], FRACTIONS, 3, gr.TrainConfig(max_epochs=25))
    by_seed = {}
    for r in res.rows:
        by_seed.setdefault(r.seed, set()).add((r.accuracy, r.epochs))
    ok = all(len(v) == 1 for v in by_seed.values())
    summary = ", ".join(f"seed {s}: {sorted(v)[0][0]:.4f}" for s, v in sorted(by_seed.items()))
    criterion(
        7,
        "SAT(Incl) label independence",
        ok,
        f"distinct results per seed across {len(FRACTIONS)} fractions: "
        f"{[len(v) for v in by_seed.values()]} (all 1); {summary}",
    )


def test_criterion_08_inference_runtime(criterion):
    onto = sg.planted_ontology(6, 20, 3, seed=0)
    g = sg.generate_synthetic(sg.SynthConfig(onto, num_nodes=1283, knn_k=9, seed=1))
    keep = np.sort(np.random.default_rng(0).choice(len(g.edges), 7407, replace=False))
    g = replace(g, edges=g.edges[keep])
    enc = sg.FeatureEncoder(embed_dim=32).fit(g)
    model = RegionClassifier(gr.TrainConfig().dims(enc.output_dim, onto.n_high), seed=1)
    times = []
    with threadpool_limits(1):
        for _ in range(7):
            t0 = time.perf_counter()
            gr.infer(model, enc, g, onto)
            times.append(time.perf_counter() - t0)
    first, median = times[0], float(np.median(times))
    criterion(
        8,
        "inference runtime",
        median < 0.1 and first < 0.1 and (g.num_nodes, len(g.edges)) == (1283, 7407),
        f"{g.num_nodes} nodes / {len(g.edges)} edges, 1 thread: first {first * 1000:.1f} ms, "
        f"median of 7 {median * 1000:.1f} ms (< 100 ms)",
    )


def _snapshot(directory: Path) -> dict[str, bytes]:
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def _pipeline(root: Path) -> None:
    small = ["--set", "train.hidden_dim=8", "--set", "train.layers=2", "--set", "train.heads=2", "--set", "train.embed_dim=8"]
    vocab = root / "vocab.json"
    vocab.write_text(json.dumps({"low_levels": ["sink", "oven", "bed", "pillow", "sofa", "tv"],
                                 "high_levels": ["kitchen", "bedroom", "living room"]}))
    steps = [
        ["synth", "--set", "synth.num_nodes=300", "--out", root / "g.json"],
        ["ontology", "complete", "--mock", "--vocab", vocab, "--k", "2", "--out", root / "complete.json"],
        ["ontology", "score", "--mock", "--vocab", vocab, "--threshold", "0.6", "--out", root / "score.json"],
        ["train", "--graph", root / "g.json", "--ontology", root / "g.ontology.json", "--out-dir", root / "run",
         "--max-epochs", "5", *small],
        ["eval", "--model", root / "run" / "model.json", "--graph", root / "g.json", "--out", root / "eval.json"],
        ["predict", "--model", root / "run" / "model.json", "--graph", root / "g.json", "--out", root / "pred.json"],
        ["export-dot", "--graph", root / "pred.json", "--out", root / "g.dot"],
        ["ablate", "--graph", root / "g.json", "--ontology", root / "g.ontology.json", "--out-dir", root / "ablate",
         "--loss-kinds", "cross_entropy,sat_both", "--keep-fractions", "1,0.01", "--trials", "2", "--max-epochs", "3",
         *small],
    ]
    for argv in steps:
        code = cli.dispatch([str(a) for a in argv])
        assert code == 0, argv


def test_criterion_09_determinism(criterion, tmp_path):
    # identical relative layout so any recorded path is identical too
    snaps = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        cwd = os.getcwd()
        os.chdir(root)
        try:
            _pipeline(Path("."))
        finally:
            os.chdir(cwd)
        snaps.append(_snapshot(root))
    differing = sorted(k for k in snaps[0].keys() | snaps[1].keys() if snaps[0].get(k) != snaps[1].get(k))
    criterion(
        9,
        "determinism",
        not differing and len(snaps[0]) > 10,
        f"{len(snaps[0])} files from 8 commands compared byte-for-byte, differing: {differing or 'none'}",
    )


def test_criterion_10_ontology_metrics(criterion):
    o = SpatialOntology.from_edges(["a", "b", "c", "d", "e"], ["h"], [("h", "a"), ("h", "b"), ("h", "c")])
    judged = [
        RelationJudgment("a", "h", "likely"),
        RelationJudgment("b", "h", "likely"),
        RelationJudgment("c", "h", "rarely"),
        RelationJudgment("d", "h", "likely"),
        RelationJudgment("e", "h", "sometimes"),
    ]
    m = om.evaluate_against_reference(o, judged)
    perfect = om.evaluate_against_reference(
        o, [RelationJudgment(l, "h", "likely" if o.omega[0, j] else "rarely") for j, l in enumerate(o.low_levels)]
    )
    ok = (
        math.isclose(m["precision"], 2 / 3)
        and math.isclose(m["recall"], 2 / 3)
        and math.isclose(m["accuracy"], 3 / 5)
        and perfect["precision"] == perfect["recall"] == perfect["accuracy"] == 1.0
    )
    criterion(
        10,
        "ontology metrics",
        ok,
        f"fixture P {m['precision']:.4f} R {m['recall']:.4f} A {m['accuracy']:.4f} (0.6667/0.6667/0.6000); "
        f"perfect agreement P/R/A = {perfect['precision']}/{perfect['recall']}/{perfect['accuracy']}",
    )
