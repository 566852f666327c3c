import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hacd.cli import main
from hacd.graph import load_dataset_dir
from hacd.metrics import all_metrics
from hacd.objectives import CommunityAssignment, classic_modularity


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


SYNTH = ["synth", "--blocks", "8,8", "--p-in", "0.6", "--p-out", "0.05",
         "--n-attrs", "8", "--signature-size", "3", "--p-sig", "0.9",
         "--p-noise", "0.1", "--seed", "7"]

FAST_TRAIN = ["--epochs", "3", "--dim", "8", "--pair-budget", "64",
              "--topk", "4", "--seed", "1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "sbm"
    assert main(SYNTH + ["-o", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "train"
    assert main(["train", "--data", str(dataset), "-o", str(out)] + FAST_TRAIN) == 0
    return out


class TestSynth:
    def test_writes_files_and_manifest(self, dataset):
        for name in ("edges.tsv", "features.tsv", "labels.tsv", "manifest.json"):
            assert (dataset / name).exists()
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["exit_status"] == 0
        assert manifest["command"] == "synth"

    def test_same_seed_identical_digests(self, dataset, tmp_path):
        other = tmp_path / "again"
        assert main(SYNTH + ["-o", str(other)]) == 0
        for name in ("edges.tsv", "features.tsv", "labels.tsv"):
            assert _digest(dataset / name) == _digest(other / name)

    def test_invalid_probabilities_exit_2(self, tmp_path):
        code = main(["synth", "--blocks", "8,8", "--p-in", "0.01", "--p-out", "0.15",
                     "-o", str(tmp_path / "bad")])
        assert code == 2


class TestIngest:
    def test_canonicalization_round_trip(self, tmp_path):
        edges = tmp_path / "raw_edges.tsv"
        feats = tmp_path / "raw_features.tsv"
        edges.write_text("b\ta\n# comment\nc\tb\n")
        feats.write_text("a\tw2\t1\nb\tw1\t2\nc\tw1\t0.5\n")
        out1 = tmp_path / "canon1"
        out2 = tmp_path / "canon2"
        assert main(["ingest", "--edges", str(edges), "--features", str(feats),
                     "-o", str(out1)]) == 0
        assert main(["ingest", "--edges", str(out1 / "edges.tsv"),
                     "--features", str(out1 / "features.tsv"), "-o", str(out2)]) == 0
        assert _digest(out1 / "edges.tsv") == _digest(out2 / "edges.tsv")
        assert _digest(out1 / "features.tsv") == _digest(out2 / "features.tsv")

    def test_self_loop_error_and_flag(self, tmp_path):
        edges = tmp_path / "e.tsv"
        feats = tmp_path / "f.tsv"
        edges.write_text("a\ta\nb\ta\n")
        feats.write_text("a\tw\t1\n")
        assert main(["ingest", "--edges", str(edges), "--features", str(feats),
                     "-o", str(tmp_path / "o1")]) == 2
        assert main(["ingest", "--edges", str(edges), "--features", str(feats),
                     "--drop-self-loops", "-o", str(tmp_path / "o2")]) == 0


class TestTrain:
    def test_outputs(self, trained):
        report = json.loads((trained / "report.json").read_text())
        assert len(report["history"]) == 3
        assert (trained / "model.ckpt").exists()
        assert (trained / "assignment.tsv").exists()
        assert report["metapaths"][0]["layers"] == [0]
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["exit_status"] == 0
        assert manifest["inputs"]

    def test_zero_epochs_exit_2(self, dataset, tmp_path):
        code = main(["train", "--data", str(dataset), "-o", str(tmp_path / "z"),
                     "--epochs", "0"])
        assert code == 2

    def test_missing_labels_with_labels_init_exit_2(self, tmp_path):
        edges = tmp_path / "e.tsv"
        feats = tmp_path / "f.tsv"
        edges.write_text("a\tb\nb\tc\n")
        feats.write_text("a\tw\t1\nb\tw\t1\nc\tw\t1\n")
        d = tmp_path / "nolabels"
        assert main(["ingest", "--edges", str(edges), "--features", str(feats),
                     "-o", str(d)]) == 0
        code = main(["train", "--data", str(d), "-o", str(tmp_path / "out")] + FAST_TRAIN)
        assert code == 2

    def test_idempotent_artifacts(self, dataset, trained, tmp_path):
        rerun = tmp_path / "rerun"
        assert main(["train", "--data", str(dataset), "-o", str(rerun)] + FAST_TRAIN) == 0
        assert _digest(rerun / "report.json") == _digest(trained / "report.json")
        assert _digest(rerun / "assignment.tsv") == _digest(trained / "assignment.tsv")
        assert _digest(rerun / "model.ckpt") == _digest(trained / "model.ckpt")


class TestEvaluate:
    def test_ground_truth_scores_one(self, dataset, tmp_path):
        out = tmp_path / "eval"
        code = main(["evaluate", "--assignment", str(dataset / "labels.tsv"),
                     "--data", str(dataset), "-o", str(out)])
        assert code == 0
        scores = json.loads((out / "metrics.json").read_text())
        for key in ("acc", "nmi", "ari", "f1"):
            assert scores[key] == pytest.approx(1.0)
        csv_lines = (out / "metrics.csv").read_text().splitlines()
        assert csv_lines[0].split(",") == sorted(scores)

    def test_constant_assignment(self, dataset, tmp_path):
        g = load_dataset_dir(dataset)
        const = tmp_path / "const.tsv"
        const.write_text("".join(f"{nid}\t0\n" for nid in g.node_ids))
        out = tmp_path / "eval_const"
        assert main(["evaluate", "--assignment", str(const), "--data", str(dataset),
                     "-o", str(out)]) == 0
        scores = json.loads((out / "metrics.json").read_text())
        assert scores["modularity"] == pytest.approx(0.0, abs=1e-12)
        assert scores["nmi"] == pytest.approx(0.0, abs=1e-12)

    def test_trained_assignment_matches_library(self, dataset, trained, tmp_path):
        out = tmp_path / "eval_trained"
        assert main(["evaluate", "--assignment", str(trained / "assignment.tsv"),
                     "--data", str(dataset), "-o", str(out)]) == 0
        scores = json.loads((out / "metrics.json").read_text())
        g = load_dataset_dir(dataset)
        pred = np.empty(g.n_nodes, dtype=int)
        for line in (trained / "assignment.tsv").read_text().splitlines():
            nid, c = line.split("\t")
            pred[g.node_ids.index(nid)] = int(c)
        expected = all_metrics(pred, g.labels)
        expected["modularity"] = classic_modularity(g, CommunityAssignment.from_labels(pred))
        for key, val in expected.items():
            assert scores[key] == pytest.approx(val, abs=1e-12)

    def test_coverage_mismatch_exit_2(self, dataset, tmp_path):
        partial = tmp_path / "partial.tsv"
        partial.write_text("0\t0\n1\t1\n")
        assert main(["evaluate", "--assignment", str(partial), "--data", str(dataset),
                     "-o", str(tmp_path / "out")]) == 2


class TestAblate:
    def test_three_modes_and_summary(self, dataset, tmp_path):
        out = tmp_path / "ablate"
        assert main(["ablate", "--data", str(dataset), "-o", str(out)] + FAST_TRAIN) == 0
        summary = json.loads((out / "ablation.json").read_text())
        assert set(summary) == {"full", "a2m", "cmf"}
        for mode in summary:
            assert (out / mode / "report.json").exists()
            assert "modularity" in summary[mode]


class TestDivergenceExit:
    def test_numerical_failure_exits_3_and_retains_checkpoint(self, dataset, tmp_path,
                                                              monkeypatch):
        import hacd.cli as cli
        from hacd.trainer import TrainingDiverged, ModelState
        import hacd.autodiff as ad_mod

        def explode(g, cfg, resume_state=None):
            state = ModelState.fresh({"x": ad_mod.param([1.0], "x")}, k=2)
            raise TrainingDiverged("synthetic blow-up", state, [])

        monkeypatch.setattr(cli, "train", explode)
        out = tmp_path / "diverged"
        code = main(["train", "--data", str(dataset), "-o", str(out)] + FAST_TRAIN)
        assert code == 3
        assert (out / "model.ckpt").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["exit_status"] == 3


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["passed"] is True
        assert payload["max_rel_err"] < 1e-4
        assert payload["worst_param"]

    def test_zero_epsilon_exit_2(self):
        assert main(["gradcheck", "--epsilon", "0"]) == 2

    def test_literal_variant_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3", "--paper-literal-eq3"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["passed"] is True


class TestEstimator:
    def test_fit_predict_and_params(self, dataset):
        from hacd.estimator import HACD

        g = load_dataset_dir(dataset)
        est = HACD(epochs=3, dim=8, pair_budget=64, top_k=4, seed=1)
        labels = est.fit_predict(g)
        assert labels.shape == (g.n_nodes,)
        assert est.n_communities_ == 2
        assert est.membership_.shape == (g.n_nodes, 2)
        assert est.transform().shape == (g.n_nodes, 8)
        assert len(est.history_) == 3

        params = est.get_params()
        assert params["epochs"] == 3
        clone = HACD(**params)
        assert clone.get_params() == params

    def test_predict_requires_fit(self, dataset):
        from hacd.estimator import HACD
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            HACD().predict()

    def test_rejects_non_graph_input(self):
        from hacd.estimator import HACD

        with pytest.raises(TypeError):
            HACD(epochs=1).fit(np.eye(4))
