import json
import os

import numpy as np
import pytest

from conceptdistil import cli, data, model


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Micro-scale run of the whole command suite, shared across tests."""
    root = tmp_path_factory.mktemp("pipeline")
    d = root / "data"
    gen_cfg = root / "gen.json"
    gen_cfg.write_text(json.dumps({"n_instances": 1600, "seed": 5}))
    assert run("gen-data", "--config", str(gen_cfg), "--out", str(d),
               "--golden", "300,60,150", "--seed", "5") == 0
    bb_dir = root / "bb"
    assert run("train-blackbox", "--train", str(d / "train.csv"), "--valid", str(d / "valid.csv"),
               "--out", str(bb_dir), "--epochs", "10", "--seed", "5") == 0
    teach_dir = root / "teachers"
    assert run("teach", "--golden-train", str(d / "golden_train.csv"),
               "--golden-valid", str(d / "golden_valid.csv"),
               "--out", str(teach_dir), "--config", str(_forest_cfg(root)),
               "--seed", "5") == 0
    for name in ("train", "valid", "test"):
        assert run("label", "--input", str(d / f"{name}.csv"), "--out", str(d / f"{name}_labeled.csv"),
                   "--teachers", str(teach_dir / "teachers.json"),
                   "--blackbox", str(bb_dir / "blackbox.json"), "--seed", "5") == 0
    model_dir = root / "model"
    assert run("distill", "--variant", "default", "--train", str(d / "train_labeled.csv"),
               "--valid", str(d / "valid_labeled.csv"), "--out", str(model_dir),
               "--epochs", "4", "--seed", "5") == 0
    return root


def _forest_cfg(root):
    path = root / "forest.json"
    path.write_text(json.dumps({"n_trees": 8, "max_depth": 6}))
    return path


class TestPipeline:
    def test_gen_data_writes_all_splits_and_manifest(self, pipeline):
        d = pipeline / "data"
        for name in ("full", "train", "valid", "test", "golden_train", "golden_valid", "golden_test"):
            assert (d / f"{name}.csv").exists()
        manifest = json.loads((d / "manifest_gen-data.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 5
        assert "outputs" in manifest and "wall_clock_s" in manifest

    def test_golden_rows_are_excluded_from_corpus(self, pipeline):
        d = pipeline / "data"
        corpus_ids = set()
        for name in ("train", "valid", "test"):
            corpus_ids |= set(data.load_csv(d / f"{name}.csv").ids)
        golden_ids = set(data.load_csv(d / "golden_train.csv").ids)
        assert not (corpus_ids & golden_ids)

    def test_labeled_files_carry_soft_and_scores(self, pipeline):
        ds = data.load_csv(pipeline / "data" / "train_labeled.csv")
        assert ds.soft is not None and ds.bb_scores is not None

    def test_evaluate_model_report(self, pipeline):
        out = pipeline / "report.json"
        code = run("evaluate", "--model", str(pipeline / "model" / "model.json"),
                   "--test", str(pipeline / "data" / "test_labeled.csv"),
                   "--golden", str(pipeline / "data" / "golden_test.csv"),
                   "--out", str(out), "--seed", "5")
        assert code == 0
        doc = json.loads(out.read_text())
        assert 0.0 <= doc["fidelity"] <= 1.0
        assert 0.0 <= doc["mean_auc"] <= 1.0
        assert len(doc["per_concept_auc"]) == 6

    def test_evaluate_prevalence_report(self, pipeline):
        out = pipeline / "prevalences.json"
        assert run("evaluate", "--data", str(pipeline / "data" / "full.csv"), "--out", str(out)) == 0
        doc = json.loads(out.read_text())
        for rule in data.GeneratorConfig().concepts:
            assert doc["concept_prevalences"][rule.name] == pytest.approx(rule.prevalence, abs=0.015)

    def test_explain_emits_jsonl_per_row(self, pipeline):
        out = pipeline / "explanations.jsonl"
        golden_test = pipeline / "data" / "golden_test.csv"
        assert run("explain", "--model", str(pipeline / "model" / "model.json"),
                   "--input", str(golden_test), "--out", str(out)) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 150
        doc = json.loads(lines[0])
        assert set(doc) == {"id", "kd_score", "concept_probs", "attention", "contributions"}
        assert sum(doc["attention"].values()) == pytest.approx(1.0, abs=1e-9)
        assert sum(doc["contributions"].values()) == pytest.approx(doc["kd_score"], abs=1e-9)

    def test_zeroed_attention_model_explains_uniformly(self, pipeline, tmp_path):
        params = model.load_model(pipeline / "model" / "model.json")
        for layer in params.theta_a.layers:
            layer.weights[:] = 0.0
            layer.bias[:] = 0.0
        zeroed = tmp_path / "zeroed.json"
        model.save_model(params, zeroed)
        out = tmp_path / "explanations.jsonl"
        assert run("explain", "--model", str(zeroed),
                   "--input", str(pipeline / "data" / "golden_test.csv"), "--out", str(out)) == 0
        for line in out.read_text().strip().splitlines():
            attention = list(json.loads(line)["attention"].values())
            np.testing.assert_allclose(attention, [1 / 6] * 6, atol=1e-12)

    def test_sweep_lambda_mode(self, pipeline, tmp_path):
        out = tmp_path / "sweep"
        code = run("sweep", "--mode", "lambda", "--lambda-grid", "0,1",
                   "--repeats", "1", "--epochs", "2",
                   "--train", str(pipeline / "data" / "train_labeled.csv"),
                   "--valid", str(pipeline / "data" / "valid_labeled.csv"),
                   "--test", str(pipeline / "data" / "test_labeled.csv"),
                   "--golden-test", str(pipeline / "data" / "golden_test.csv"),
                   "--out", str(out), "--seed", "3")
        assert code == 0
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + grid x repeats
        assert (out / "sweep_summary.json").exists()

    def test_rerun_reproduces_byte_identical_outputs(self, pipeline, tmp_path):
        d2 = tmp_path / "data2"
        gen_cfg = tmp_path / "gen.json"
        gen_cfg.write_text(json.dumps({"n_instances": 1600, "seed": 5}))
        assert run("gen-data", "--config", str(gen_cfg), "--out", str(d2),
                   "--golden", "300,60,150", "--seed", "5") == 0
        for name in ("full", "train", "golden_test"):
            a = (pipeline / "data" / f"{name}.csv").read_bytes()
            b = (d2 / f"{name}.csv").read_bytes()
            assert a == b


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run("gen-data", "--nope") == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_command_is_usage_error(self):
        assert run("frobnicate") == 1

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        assert run("train-blackbox", "--train", str(tmp_path / "none.csv"),
                   "--valid", str(tmp_path / "none.csv"), "--out", str(tmp_path)) == 2
        assert "no such file" in capsys.readouterr().err

    def test_schema_violation_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,f_0\n0,1.0\n1,oops\n")
        assert run("evaluate", "--data", str(bad), "--out", str(tmp_path / "r.json")) == 2

    def test_label_without_sources_is_usage_error(self, tmp_path):
        f = tmp_path / "x.csv"
        f.write_text("id,f_0\n0,1.0\n")
        assert run("label", "--input", str(f), "--out", str(tmp_path / "y.csv")) == 1

    def test_non_finite_model_is_numeric_error(self, pipeline, tmp_path, capsys):
        # 1e999 parses to infinity, which the forward pass must reject
        text = (pipeline / "model" / "model.json").read_text()
        broken = tmp_path / "model.json"
        first_weight = text.index('"weights": [') + len('"weights": [')
        end = text.index(",", first_weight)
        broken.write_text(text[:first_weight] + "1e999" + text[end:])
        code = run("explain", "--model", str(broken),
                   "--input", str(pipeline / "data" / "golden_test.csv"),
                   "--out", str(tmp_path / "o.jsonl"))
        assert code == 3
        assert "non-finite" in capsys.readouterr().err

    def test_corrupt_model_file_is_data_error(self, tmp_path):
        bad = tmp_path / "model.json"
        bad.write_text("{not json")
        assert run("explain", "--model", str(bad), "--input", str(bad),
                   "--out", str(tmp_path / "o.jsonl")) == 2

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV_VAR, "7")
        out = tmp_path / "data"
        gen_cfg = tmp_path / "gen.json"
        gen_cfg.write_text(json.dumps({"n_instances": 400, "seed": 0}))
        assert run("gen-data", "--config", str(gen_cfg), "--out", str(out), "--golden", "0,0,0") == 0
        manifest = json.loads((out / "manifest_gen-data.json").read_text())
        assert manifest["seed"] == 7

    def test_bad_env_seed_is_usage_error(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV_VAR, "not-a-number")
        assert run("gen-data", "--out", str(tmp_path / "d"), "--golden", "0,0,0") == 1

    def test_negative_seed_is_usage_error(self, tmp_path):
        assert run("gen-data", "--out", str(tmp_path / "d"), "--golden", "0,0,0", "--seed", "-3") == 1


class TestInputPreservation:
    def test_label_does_not_mutate_its_input(self, pipeline):
        d = pipeline / "data"
        before = (d / "test.csv").read_bytes()
        bb = pipeline / "bb" / "blackbox.json"
        assert run("label", "--input", str(d / "test.csv"), "--out", str(d / "test_again.csv"),
                   "--blackbox", str(bb)) == 0
        assert (d / "test.csv").read_bytes() == before


class TestOptionalFlags:
    def test_evaluate_with_recall_fpr(self, pipeline, tmp_path):
        out = tmp_path / "report.json"
        code = run("evaluate", "--model", str(pipeline / "model" / "model.json"),
                   "--test", str(pipeline / "data" / "test_labeled.csv"),
                   "--recall-fpr", "0.05", "--out", str(out))
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["recall_at_fpr"]["fpr_level"] == 0.05
        assert 0.0 <= doc["recall_at_fpr"]["recall"] <= 1.0

    def test_label_uncertainty_fraction_subsets_rows(self, pipeline, tmp_path):
        d = pipeline / "data"
        out = tmp_path / "uncertain.csv"
        assert run("label", "--input", str(d / "test.csv"), "--out", str(out),
                   "--blackbox", str(pipeline / "bb" / "blackbox.json"),
                   "--uncertainty-fraction", "0.2") == 0
        full = data.load_csv(d / "test.csv")
        subset = data.load_csv(out)
        assert subset.n == int(np.ceil(0.2 * full.n))
        assert subset.bb_scores is not None

    def test_teach_with_tuning(self, pipeline, tmp_path):
        d = pipeline / "data"
        out = tmp_path / "tuned"
        code = run("teach", "--golden-train", str(d / "golden_train.csv"),
                   "--golden-valid", str(d / "golden_valid.csv"),
                   "--out", str(out), "--tune", "2", "--seed", "3")
        assert code == 0
        report = json.loads((out / "teach_report.json").read_text())
        assert 0.0 <= report["tuned_valid_mean_auc"] <= 1.0

    def test_label_with_score_file(self, pipeline, tmp_path):
        from conceptdistil import blackbox

        d = pipeline / "data"
        ds = data.load_csv(d / "test.csv")
        score_path = tmp_path / "scores.csv"
        scores = np.linspace(0.0, 1.0, ds.n)
        blackbox.save_score_file(score_path, ds.ids, scores)
        out = tmp_path / "scored.csv"
        assert run("label", "--input", str(d / "test.csv"), "--out", str(out),
                   "--score-file", str(score_path)) == 0
        np.testing.assert_array_equal(data.load_csv(out).bb_scores, scores)
