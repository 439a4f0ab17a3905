"""Command-line pipeline: generate data, train the built-in black box,
teach and apply concept labels, distill, evaluate, explain, sweep.

Every command validates its inputs, writes its outputs only to the
declared paths and drops a manifest (resolved configuration, input and
output paths, seed, wall clock) next to them. Exit codes: 0 success,
1 usage error, 2 data/contract error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, blackbox, data, hpo, metrics, model, teachers, training
from .errors import ConceptDistilError, DataError, UsageError
from .nn import OptimizerConfig

SEED_ENV_VAR = "CONCEPTDISTIL_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_seed(args) -> int:
    seed = args.seed
    if seed is None:
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    if seed is None:
        return 0
    if seed < 0:
        raise UsageError(f"seed must be non-negative, got {seed}")
    return seed


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: dict, seed: int, started: float):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "wall_clock_s": round(time.time() - started, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _out_dir(raw) -> Path:
    out = Path(raw)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_int_list(raw: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {raw!r}") from None


def _parse_float_list(raw: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {raw!r}") from None


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    if args.config:
        cfg = data.GeneratorConfig.from_json_dict(_load_json(args.config))
    else:
        cfg = data.GeneratorConfig()
    if args.n is not None:
        cfg = replace(cfg, n_instances=args.n)
    if args.seed is not None or SEED_ENV_VAR in os.environ:
        cfg = replace(cfg, seed=seed)
    out = _out_dir(args.out)
    full = data.generate_synthetic(cfg)
    outputs = {"full": out / "full.csv"}
    data.save_csv(full, outputs["full"])

    corpus = full
    golden_sizes = _parse_int_list(args.golden, "--golden")
    if len(golden_sizes) != 3:
        raise UsageError("--golden expects three sizes, e.g. 1934,203,506")
    if any(golden_sizes):
        g_train, g_valid, g_test = data.golden_subset(full, *golden_sizes, seed=cfg.seed)
        for name, ds in (("golden_train", g_train), ("golden_valid", g_valid), ("golden_test", g_test)):
            outputs[name] = out / f"{name}.csv"
            data.save_csv(ds, outputs[name])
        taken = np.concatenate([g_train.ids, g_valid.ids, g_test.ids])
        corpus = full.exclude_ids(taken)

    fracs = _parse_float_list(args.split, "--split")
    if len(fracs) != 3:
        raise UsageError("--split expects three fractions, e.g. 0.8,0.1,0.1")
    tr, va, te = data.split(corpus, *fracs, mode=args.split_mode, seed=cfg.seed)
    for name, ds in (("train", tr), ("valid", va), ("test", te)):
        outputs[name] = out / f"{name}.csv"
        data.save_csv(ds, outputs[name])

    _write_manifest(out, "gen-data", cfg.to_json_dict(),
                    {"config": args.config or "<builtin>"}, outputs, cfg.seed, started)
    return 0


def cmd_train_blackbox(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    train_set = data.load_csv(args.train)
    valid_set = data.load_csv(args.valid)
    hidden = _parse_int_list(args.hidden, "--hidden")
    specs = blackbox.default_blackbox_specs(train_set.d, hidden=tuple(hidden))
    adapter = blackbox.train_ffnn_blackbox(
        train_set, valid_set, specs,
        learning_rate=args.learning_rate, epochs=args.epochs,
        batch_size=args.batch_size, patience=args.patience, seed=seed,
    )
    out = _out_dir(args.out)
    outputs = {"model": out / "blackbox.json"}
    blackbox.save_blackbox(adapter, outputs["model"])
    cfg = {"hidden": hidden, "learning_rate": args.learning_rate, "epochs": args.epochs,
           "batch_size": args.batch_size, "patience": args.patience}
    _write_manifest(out, "train-blackbox", cfg, {"train": args.train, "valid": args.valid}, outputs, seed, started)
    return 0


def cmd_teach(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    golden_train = data.load_csv(args.golden_train)
    params = teachers.ForestParams(seed=seed)
    if args.config:
        doc = _load_json(args.config)
        params = teachers.ForestParams(
            n_trees=int(doc.get("n_trees", params.n_trees)),
            max_depth=int(doc.get("max_depth", params.max_depth)),
            min_leaf=int(doc.get("min_leaf", params.min_leaf)),
            feature_subsample=doc.get("feature_subsample", params.feature_subsample),
            bootstrap=bool(doc.get("bootstrap", params.bootstrap)),
            seed=seed,
        )
    out = _out_dir(args.out)
    report: dict = {}
    if args.tune > 0:
        if not args.golden_valid:
            raise UsageError("--tune requires --golden-valid")
        golden_valid = data.load_csv(args.golden_valid)
        teacher_set, best_params, best_auc = teachers.tune_teachers(golden_train, golden_valid, args.tune, seed)
        report["tuned_valid_mean_auc"] = best_auc
        params = best_params
    else:
        teacher_set = teachers.fit_teachers(golden_train, params)
    outputs = {"teachers": out / "teachers.json"}
    teachers.save_teachers(teacher_set, outputs["teachers"])
    if args.golden_valid and args.tune == 0:
        golden_valid = data.load_csv(args.golden_valid)
        _, mean_auc = teachers.evaluate_teachers(teacher_set, golden_valid)
        report["valid_mean_auc"] = mean_auc
    if report:
        outputs["report"] = out / "teach_report.json"
        Path(outputs["report"]).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    cfg = {"n_trees": params.n_trees, "max_depth": params.max_depth, "min_leaf": params.min_leaf,
           "feature_subsample": params.feature_subsample, "bootstrap": params.bootstrap, "tune": args.tune}
    _write_manifest(out, "teach", cfg, {"golden_train": args.golden_train}, outputs, seed, started)
    return 0


def cmd_label(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    if not (args.teachers or args.blackbox or args.score_file):
        raise UsageError("label needs at least one of --teachers, --blackbox, --score-file")
    if args.blackbox and args.score_file:
        raise UsageError("--blackbox and --score-file are mutually exclusive")
    dataset = data.load_csv(args.input)
    inputs = {"input": args.input}
    if args.teachers:
        teacher_set = teachers.load_teachers(args.teachers)
        soft = teachers.teach_labels(teacher_set, dataset)
        dataset = dataset.with_soft(soft, teacher_set.concept_names)
        inputs["teachers"] = args.teachers
    adapter = None
    if args.blackbox:
        adapter = blackbox.load_blackbox(args.blackbox)
        inputs["blackbox"] = args.blackbox
    elif args.score_file:
        adapter = blackbox.load_score_file(args.score_file, dataset)
        inputs["score_file"] = args.score_file
    if adapter is not None:
        dataset = dataset.with_scores(adapter.score_batch(dataset.x))
    if args.uncertainty_fraction is not None:
        if adapter is None:
            raise UsageError("--uncertainty-fraction requires a score source")
        dataset = blackbox.uncertainty_sample(_attached_scores_adapter(dataset), dataset, args.uncertainty_fraction)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data.save_csv(dataset, out_path)
    cfg = {"uncertainty_fraction": args.uncertainty_fraction}
    _write_manifest(out_path.parent, "label", cfg, inputs, {"labeled": out_path}, seed, started)
    return 0


def _attached_scores_adapter(dataset):
    """Replay already-attached scores so sampling reuses them verbatim."""
    return blackbox.ScoreFileBlackBox(dataset.bb_scores, dataset.n, "attached scores")


def _train_config_from(args, doc: dict, seed: int) -> training.TrainConfig:
    opt_doc = doc.get("optimizer", {})
    optimizer = OptimizerConfig(
        algorithm=str(opt_doc.get("algorithm", "adam")),
        l2_penalty=float(opt_doc.get("l2_penalty", 0.0)),
        adam_beta1=float(opt_doc.get("adam_beta1", 0.9)),
        adam_beta2=float(opt_doc.get("adam_beta2", 0.999)),
        adam_eps=float(opt_doc.get("adam_eps", 1e-8)),
    )
    cfg = training.TrainConfig(
        lam=float(doc.get("lambda", 0.5)),
        learning_rate=float(doc.get("learning_rate", 1e-3)),
        epochs=int(doc.get("epochs", 100)),
        batch_size=int(doc.get("batch_size", 256)),
        early_stop_patience=int(doc.get("patience", 10)),
        seed=seed,
        variant=str(doc.get("variant", training.DEFAULT)),
        optimizer=optimizer,
        validation_metric=str(doc.get("validation_metric", training.METRIC_COMBINED)),
    )
    overrides = {}
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.variant is not None:
        overrides["variant"] = args.variant
    return replace(cfg, **overrides) if overrides else cfg


def _architecture_from(doc: dict, n_features: int, k: int) -> model.ArchitectureConfig:
    arch_doc = doc.get("architecture", {})
    return model.build_architecture(
        n_features,
        k,
        trunk_widths=tuple(arch_doc.get("trunk_widths", (64, 48, 32))),
        head_widths=tuple(arch_doc.get("head_widths", (16, 8))),
        attention_widths=tuple(arch_doc.get("attention_widths", (16,))),
        dropout_p=float(arch_doc.get("dropout", 0.0)),
        use_batchnorm=bool(arch_doc.get("batchnorm", False)),
    )


def cmd_distill(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    doc = _load_json(args.config) if args.config else {}
    train_set = data.load_csv(args.train)
    valid_set = data.load_csv(args.valid)
    cfg = _train_config_from(args, doc, seed)
    arch = _architecture_from(doc, train_set.d, train_set.k)
    params = model.init_model(arch, train_set.concept_names, seed)
    result = training.train(params, train_set, valid_set, cfg)
    out = _out_dir(args.out)
    outputs = {"model": out / "model.json", "history": out / "history.csv"}
    model.save_model(result.params, outputs["model"])
    training.history_to_csv(result.history, outputs["history"])
    resolved = {
        "variant": cfg.variant, "lambda": cfg.lam, "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "patience": cfg.early_stop_patience,
        "validation_metric": cfg.validation_metric, "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
    }
    _write_manifest(out, "distill", resolved, {"train": args.train, "valid": args.valid}, outputs, seed, started)
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    if args.model is None and args.data is None:
        raise UsageError("evaluate needs --model (with --test/--golden) or --data")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if args.model is None:
        dataset = data.load_csv(args.data)
        report = {"n": dataset.n, "concept_prevalences": data.concept_prevalences(dataset)}
        if dataset.y is not None:
            report["positive_rate"] = float(dataset.y.mean())
        out_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        _write_manifest(out_path.parent, "evaluate", {}, {"data": args.data}, {"report": out_path}, seed, started)
        return 0
    params = model.load_model(args.model)
    fid = None
    per = mean_auc = None
    names = None
    n_eval = 0
    recall = None
    if args.test:
        test_set = data.load_csv(args.test)
        if test_set.bb_scores is None:
            raise DataError("--test file must carry bb_score for fidelity")
        pred = model.predict_scores(params, test_set.x)
        fid = metrics.fidelity(pred, test_set.bb_scores)
        n_eval = max(n_eval, test_set.n)
        if args.recall_fpr is not None:
            if test_set.y is None:
                raise DataError("--recall-fpr needs task labels on the --test file")
            recall = metrics.recall_at_fpr(pred, test_set.y, args.recall_fpr)
    if args.golden:
        golden_set = data.load_csv(args.golden)
        if golden_set.golden is None:
            raise DataError("--golden file must carry hard concept labels")
        per, mean_auc = metrics.mean_concept_auc(
            model.predict_concepts(params, golden_set.x), golden_set.golden, golden_set.concept_names
        )
        names = golden_set.concept_names
        n_eval = max(n_eval, golden_set.n)
    if fid is None and mean_auc is None:
        raise UsageError("evaluate with --model needs --test and/or --golden")
    report = metrics.EvalReport(
        n_eval=n_eval, fidelity=fid, per_concept_auc=per, mean_auc=mean_auc, concept_names=names,
        recall_fpr_level=args.recall_fpr if recall is not None else None,
        recall_at_fpr=recall,
    )
    report.save(out_path)
    inputs = {k: v for k, v in (("model", args.model), ("test", args.test), ("golden", args.golden)) if v}
    _write_manifest(out_path.parent, "evaluate", {"recall_fpr": args.recall_fpr}, inputs, {"report": out_path}, seed, started)
    return 0


def cmd_explain(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    params = model.load_model(args.model)
    dataset = data.load_csv(args.input)
    explanations = model.explain(params, dataset.x, ids=list(dataset.ids))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.explanations_to_jsonl(explanations, out_path)
    _write_manifest(out_path.parent, "explain", {}, {"model": args.model, "input": args.input},
                    {"explanations": out_path}, seed, started)
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    bundle = hpo.SweepData(
        train=data.load_csv(args.train),
        valid=data.load_csv(args.valid),
        test=data.load_csv(args.test),
        golden_test=data.load_csv(args.golden_test),
    )
    doc = _load_json(args.config) if args.config else {}
    base = training.TrainConfig(
        epochs=args.epochs, batch_size=int(doc.get("batch_size", 256)),
        early_stop_patience=int(doc.get("patience", 6)),
    )
    if args.mode == "search":
        report = hpo.run_search(hpo.SearchSpace(), args.trials, bundle, base=base, master_seed=seed, jobs=args.jobs)
        cfg = {"mode": "search", "trials": args.trials, "epochs": args.epochs, "jobs": args.jobs}
    else:
        lambdas = _parse_float_list(args.lambda_grid, "--lambda-grid")
        arch = _architecture_from(doc, bundle.train.d, bundle.train.k)
        report = hpo.lambda_sweep(lambdas, args.repeats, bundle, arch=arch, base=base,
                                  master_seed=seed, jobs=args.jobs)
        cfg = {"mode": "lambda", "lambda_grid": lambdas, "repeats": args.repeats,
               "epochs": args.epochs, "jobs": args.jobs}
    out = _out_dir(args.out)
    outputs = {"csv": out / "sweep.csv", "summary": out / "sweep_summary.json"}
    report.to_csv(outputs["csv"])
    report.save_summary(outputs["summary"])
    inputs = {"train": args.train, "valid": args.valid, "test": args.test, "golden_test": args.golden_test}
    _write_manifest(out, "sweep", cfg, inputs, outputs, seed, started)
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="conceptdistil", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None,
                       help=f"run seed (falls back to ${SEED_ENV_VAR}, then 0)")
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset with latent concepts")
    p.add_argument("--config", default=None, help="generator config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="override n_instances")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,valid,test fractions")
    p.add_argument("--split-mode", choices=(data.SEQUENTIAL, data.RANDOM), default=data.SEQUENTIAL)
    p.add_argument("--golden", default=f"{data.GOLDEN_TRAIN_DEFAULT},{data.GOLDEN_VALID_DEFAULT},{data.GOLDEN_TEST_DEFAULT}",
                   help="golden train,valid,test sizes; 0,0,0 disables")

    p = add("train-blackbox", cmd_train_blackbox, "train the built-in feedforward classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", default="32,16")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--patience", type=int, default=8)

    p = add("teach", cmd_teach, "fit per-concept random-forest teachers on golden labels")
    p.add_argument("--golden-train", required=True)
    p.add_argument("--golden-valid", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="forest params JSON")
    p.add_argument("--tune", type=int, default=0, help="random-search trials (0 = defaults)")

    p = add("label", cmd_label, "attach soft concept labels and/or black-box scores")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teachers", default=None)
    p.add_argument("--blackbox", default=None)
    p.add_argument("--score-file", default=None)
    p.add_argument("--uncertainty-fraction", type=float, default=None,
                   help="keep only the most score-uncertain fraction of rows")

    p = add("distill", cmd_distill, "train the concept surrogate")
    p.add_argument("--variant", choices=training.VARIANTS, default=None)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = add("evaluate", cmd_evaluate, "evaluate a model or report dataset prevalences")
    p.add_argument("--model", default=None)
    p.add_argument("--test", default=None, help="scored set for fidelity")
    p.add_argument("--golden", default=None, help="golden set for concept AUC")
    p.add_argument("--data", default=None, help="prevalence report for a dataset")
    p.add_argument("--recall-fpr", type=float, default=None)
    p.add_argument("--out", required=True)

    p = add("explain", cmd_explain, "emit one explanation JSON object per input row")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = add("sweep", cmd_sweep, "random search or lambda sweep with trade-off report")
    p.add_argument("--mode", choices=("search", "lambda"), default="search")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--golden-test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--lambda-grid", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConceptDistilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
