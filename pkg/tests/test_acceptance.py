"""Acceptance suite: one test per criterion, reported as a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v`` to see one line per
criterion; each test also prints a ``[criterion N] PASS`` summary with the
measured values.
"""

import hashlib
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from hacd import autodiff as ad
from hacd import objectives as obj
from hacd import trainer as tr
from hacd.cli import main as cli_main
from hacd.graph import AttributedGraph, SbmConfig, generate_sbm, load_dataset_dir
from hacd.metrics import accuracy_hungarian, all_metrics, ari, f1_macro, nmi

SBM_ARGS = ["--blocks", "50,50,50,50", "--p-in", "0.15", "--p-out", "0.01",
            "--n-attrs", "20", "--signature-size", "5", "--p-sig", "0.8",
            "--p-noise", "0.05", "--seed", "7"]
TRAIN_ARGS = ["--epochs", "200", "--seed", "7"]


def _report(criterion: int, detail: str):
    print(f"[criterion {criterion}] PASS - {detail}")


def _random_graph(rng, n):
    dense = rng.random((n, n)) < 0.45
    edges = [[i, j] for i in range(n) for j in range(i + 1, n) if dense[i, j]]
    if not edges:
        edges = [[0, 1]]
    return AttributedGraph(n_nodes=n, edges=np.asarray(edges),
                           features=sp.csr_matrix(np.eye(n)))


@pytest.fixture(scope="module")
def sbm_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance") / "sbm"
    assert cli_main(["synth", *SBM_ARGS, "-o", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained_runs(sbm_dataset, tmp_path_factory):
    """CLI training runs shared by criteria 6, 7 and 9."""
    root = tmp_path_factory.mktemp("acceptance_runs")
    out = {}
    for mode in ("full", "cmf", "a2m"):
        path = root / mode
        code = cli_main(["train", "--data", str(sbm_dataset), "-o", str(path),
                         *TRAIN_ARGS, "--loss", mode])
        assert code == 0, f"training run for mode {mode} failed"
        out[mode] = path
    return out


def _scores(run_dir: Path, dataset: Path) -> dict:
    g = load_dataset_dir(dataset)
    pred = np.empty(g.n_nodes, dtype=int)
    for line in (run_dir / "assignment.tsv").read_text().splitlines():
        nid, c = line.split("\t")
        pred[g.node_ids.index(nid)] = int(c)
    out = all_metrics(pred, g.labels)
    out["modularity"] = obj.classic_modularity(g, obj.CommunityAssignment.from_labels(pred))
    return out


def test_criterion_01_gradient_correctness():
    start = time.time()
    g = generate_sbm(SbmConfig(blocks=[6, 6], p_in=0.6, p_out=0.15, n_attrs=8,
                               signature_size=2, p_sig=0.9, p_noise=0.2, seed=0))
    assert g.n_nodes <= 15
    cfg = tr.TrainConfig(epochs=1, dim=8, layers=2, top_k=4, pair_budget=64, seed=0)
    report = tr.run_gradcheck(g, cfg, epsilon=1e-4)
    elapsed = time.time() - start
    assert report.max_rel_err < 1e-4, report.per_param
    assert elapsed < 30.0
    _report(1, f"max_rel_err={report.max_rel_err:.2e} (worst={report.worst_param}), "
               f"runtime={elapsed:.1f}s")


def test_criterion_02_modularity_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst_hard = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 13))
        g = _random_graph(rng, n)
        labels = rng.integers(0, int(rng.integers(1, 5)) + 1, size=n)
        got = obj.classic_modularity(g, obj.CommunityAssignment.from_labels(labels))
        a = g.adjacency().toarray()
        k = a.sum(axis=1)
        m = g.n_edges
        oracle = sum((a[i, j] - k[i] * k[j] / (2 * m))
                     for i in range(n) for j in range(n) if labels[i] == labels[j]) / (2 * m)
        worst_hard = max(worst_hard, abs(got - oracle))
    assert worst_hard < 1e-12

    worst_soft = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 11))
        g = _random_graph(rng, n)
        ctx = obj.higher_order_adjacency(g, order=2, decay=0.5)
        kcols = int(rng.integers(2, 5))
        logits = rng.normal(size=(n, kcols))
        b = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        trace_form = obj.generalized_modularity(b, ctx)
        double_sum = sum(b[i, c] * b[j, c] * ctx.p_tilde[i, j]
                         for c in range(kcols) for i in range(n) for j in range(n))
        double_sum /= 2.0 * ctx.m_tilde
        worst_soft = max(worst_soft, abs(trace_form - double_sum))
    assert worst_soft < 1e-9
    _report(2, f"hard max|diff|={worst_hard:.1e}, soft max|diff|={worst_soft:.1e} over 100+100 fixtures")


def test_criterion_03_reduction_law():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 12))
        g = _random_graph(rng, n)
        labels = rng.integers(0, 3, size=n)
        assign = obj.CommunityAssignment.from_labels(labels)
        b = np.zeros((n, assign.k))
        b[np.arange(n), assign.labels] = 1.0
        ctx = obj.higher_order_adjacency(g, order=1)
        diff = abs(obj.generalized_modularity(b, ctx) - obj.classic_modularity(g, assign))
        worst = max(worst, diff)
    assert worst < 1e-12
    _report(3, f"max|generalized - classic|={worst:.1e} over 50 hard fixtures")


def test_criterion_04_closed_form_fixtures():
    triangle = AttributedGraph(n_nodes=3, edges=np.array([[0, 1], [1, 2], [0, 2]]),
                               features=sp.csr_matrix(np.eye(3)))
    two = AttributedGraph(n_nodes=6,
                          edges=np.array([[0, 1], [1, 2], [0, 2], [3, 4], [4, 5], [3, 5]]),
                          features=sp.csr_matrix(np.eye(6)))
    q1 = obj.classic_modularity(triangle, obj.CommunityAssignment([0, 0, 0], 1))
    q2 = obj.classic_modularity(triangle, obj.CommunityAssignment([0, 1, 2], 3))
    q3 = obj.classic_modularity(two, obj.CommunityAssignment([0, 0, 0, 1, 1, 1], 2))
    assert abs(q1 - 0.0) < 1e-12
    assert abs(q2 - (-1.0 / 3.0)) < 1e-12
    assert abs(q3 - 0.5) < 1e-12
    _report(4, f"triangle/one={q1:.1e}, singletons={q2:.6f}, two-triangles={q3:.6f}")


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(5)

    def acc_oracle(pred, truth):
        from hacd.metrics import ContingencyTable
        square = ContingencyTable.from_labels(pred, truth).padded_square()
        k = square.shape[0]
        return max(sum(square[p, perm[p]] for p in range(k))
                   for perm in itertools.permutations(range(k))) / len(pred)

    def nmi_oracle(pred, truth):
        def entropy(x):
            return -sum(p * math.log(p) for p in np.bincount(x)[np.bincount(x) > 0] / len(x))
        pred, truth = np.asarray(pred), np.asarray(truth)
        hp, ht = entropy(pred), entropy(truth)
        if hp == 0 and ht == 0:
            return 1.0
        if hp == 0 or ht == 0:
            same = len(set(zip(pred, truth))) == len(set(pred)) == len(set(truth))
            return 1.0 if same else 0.0
        mi = 0.0
        for a in np.unique(pred):
            for b in np.unique(truth):
                pab = np.mean((pred == a) & (truth == b))
                if pab > 0:
                    mi += pab * math.log(pab / (np.mean(pred == a) * np.mean(truth == b)))
        return mi / math.sqrt(hp * ht)

    def ari_oracle(pred, truth):
        n = len(pred)
        a = b = both = 0
        for i, j in itertools.combinations(range(n), 2):
            s1, s2 = pred[i] == pred[j], truth[i] == truth[j]
            a += s1
            b += s2
            both += s1 and s2
        total = math.comb(n, 2)
        exp = a * b / total
        mx = (a + b) / 2
        if mx == exp:
            from hacd.metrics import ContingencyTable
            return 1.0 if ContingencyTable.from_labels(pred, truth).identical_partitions() else 0.0
        return (both - exp) / (mx - exp)

    def f1_oracle_set(pred, truth):
        from hacd.metrics import ContingencyTable
        table = ContingencyTable.from_labels(pred, truth)
        square = table.padded_square()
        k = square.shape[0]
        kt = table.counts.shape[1]
        best = max(sum(square[p, perm[p]] for p in range(k))
                   for perm in itertools.permutations(range(k)))
        values = set()
        for perm in itertools.permutations(range(k)):
            if sum(square[p, perm[p]] for p in range(k)) != best:
                continue
            f1s = []
            for c in range(kt):
                p_of_c = [p for p in range(k) if perm[p] == c]
                tp = sum(square[p, c] for p in p_of_c)
                predicted = sum(square[p, :].sum() for p in p_of_c)
                actual = square[:, c].sum()
                prec = tp / predicted if predicted else 0.0
                rec = tp / actual if actual else 0.0
                f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
            values.add(float(np.mean(f1s)))
        return values

    checked = 0
    for _ in range(200):
        n = int(rng.integers(2, 21))
        pred = rng.integers(0, int(rng.integers(1, 5)) + 1, size=n)
        truth = rng.integers(0, int(rng.integers(1, 5)) + 1, size=n)
        assert abs(accuracy_hungarian(pred, truth) - acc_oracle(pred, truth)) < 1e-10
        assert abs(nmi(pred, truth) - nmi_oracle(pred, truth)) < 1e-10
        assert abs(ari(pred, truth) - ari_oracle(pred, truth)) < 1e-10
        got = f1_macro(pred, truth)
        assert any(abs(got - v) < 1e-10 for v in f1_oracle_set(pred, truth))
        checked += 1
    _report(5, f"ACC/NMI/ARI/F1 matched brute force on {checked} fixtures")


def test_criterion_06_planted_partition_recovery(sbm_dataset, trained_runs):
    report = json.loads((trained_runs["full"] / "report.json").read_text())
    scores = _scores(trained_runs["full"], sbm_dataset)
    assert len(report["history"]) == 200
    assert scores["nmi"] >= 0.8, scores
    assert scores["acc"] >= 0.85, scores
    _report(6, f"NMI={scores['nmi']:.3f} (>=0.8), ACC={scores['acc']:.3f} (>=0.85)")


def test_criterion_06_runtime_budget(sbm_dataset, tmp_path):
    start = time.time()
    g = load_dataset_dir(sbm_dataset)
    tr.train(g, tr.TrainConfig(epochs=200, seed=7))
    elapsed = time.time() - start
    assert elapsed < 120.0
    _report(6, f"runtime={elapsed:.1f}s (< 120s)")


def test_criterion_07_ablation_ordering(sbm_dataset, trained_runs):
    scores = {mode: _scores(path, sbm_dataset) for mode, path in trained_runs.items()}
    assert scores["cmf"]["modularity"] >= scores["a2m"]["modularity"], scores
    floor = max(scores["cmf"]["nmi"], scores["a2m"]["nmi"]) - 0.02
    assert scores["full"]["nmi"] >= floor, scores
    _report(7, f"modularity cmf={scores['cmf']['modularity']:.3f} >= "
               f"a2m={scores['a2m']['modularity']:.3f}; "
               f"NMI full={scores['full']['nmi']:.3f} >= {floor:.3f}")


def _find_cora():
    env = os.environ.get("HACD_CORA_DIR")
    candidates = [env] if env else []
    candidates.append(str(Path(__file__).parent / "data" / "cora"))
    for c in candidates:
        if c and (Path(c) / "edges.tsv").exists():
            return Path(c)
    return None


def test_criterion_08_cora_directional():
    cora = _find_cora()
    if cora is None:
        pytest.skip("criterion 8 is optional: no user-supplied Cora dataset "
                    "(set HACD_CORA_DIR to a directory with edges.tsv/features.tsv/labels.tsv)")
    start = time.time()
    g = load_dataset_dir(cora)
    result = tr.train(g, tr.TrainConfig(epochs=400, dim=32, seed=7))
    elapsed = time.time() - start
    modularity = obj.classic_modularity(g, result.assignment)
    score = nmi(result.assignment.labels, g.labels)
    assert modularity >= 0.55
    assert score >= 0.25
    assert elapsed < 300.0
    _report(8, f"modularity={modularity:.3f} (>=0.55), NMI={score:.3f} (>=0.25), "
               f"runtime={elapsed:.0f}s")


def test_criterion_09_determinism(sbm_dataset, trained_runs, tmp_path):
    rerun = tmp_path / "rerun_full"
    assert cli_main(["train", "--data", str(sbm_dataset), "-o", str(rerun),
                     *TRAIN_ARGS, "--loss", "full"]) == 0
    d1 = hashlib.sha256((trained_runs["full"] / "report.json").read_bytes()).hexdigest()
    d2 = hashlib.sha256((rerun / "report.json").read_bytes()).hexdigest()
    a1 = hashlib.sha256((trained_runs["full"] / "assignment.tsv").read_bytes()).hexdigest()
    a2 = hashlib.sha256((rerun / "assignment.tsv").read_bytes()).hexdigest()
    assert d1 == d2, "history/report bytes differ between identical-seed runs"
    assert a1 == a2, "assignments differ between identical-seed runs"
    _report(9, f"report.json digests equal ({d1[:12]}...), assignment digests equal")


def test_criterion_10_invariance_suite(tmp_path):
    rng = np.random.default_rng(10)
    # softmax rows sum to 1 within 1e-10
    for _ in range(50):
        x = rng.normal(size=(8, 7)) * rng.uniform(0.1, 40)
        mask = rng.random((8, 7)) < 0.6
        mask[:, 0] = True
        sums = ad.masked_row_softmax(ad.constant(x), mask).data.sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-10
        sums = ad.row_softmax(ad.constant(x)).data.sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-10

    # relabeling invariance of all four metrics
    for _ in range(50):
        n = int(rng.integers(4, 20))
        pred = rng.integers(0, 4, size=n)
        truth = rng.integers(0, 3, size=n)
        pp, tt = rng.permutation(6), rng.permutation(6)
        before = all_metrics(pred, truth)
        after = all_metrics(pp[pred], tt[truth])
        for key in before:
            assert abs(before[key] - after[key]) < 1e-10, key

    # checkpoint save -> load -> step equals uninterrupted two steps
    g = generate_sbm(SbmConfig(blocks=[8, 8], p_in=0.6, p_out=0.05, n_attrs=10,
                               signature_size=4, p_sig=0.9, p_noise=0.1, seed=1))
    cfg1 = tr.TrainConfig(epochs=1, dim=8, pair_budget=64, seed=2, top_k=4)
    cfg2 = tr.TrainConfig(epochs=2, dim=8, pair_budget=64, seed=2, top_k=4)
    one = tr.train(g, cfg1)
    path = tmp_path / "step.ckpt"
    tr.save_checkpoint(one.state, path)
    resumed = tr.train(g, cfg2, resume_state=tr.load_checkpoint(path))
    straight = tr.train(g, cfg2)
    for name in straight.state.params:
        assert np.array_equal(resumed.state.params[name].data,
                              straight.state.params[name].data), name
    _report(10, "softmax normalization, metric relabel invariance, "
                "checkpoint step-equivalence all hold")
