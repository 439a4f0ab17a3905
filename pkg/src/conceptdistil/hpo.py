"""Random hyperparameter search and the loss-blend sweep.

Trials are isolated: each derives its own seed from (master seed, trial
index), so execution order and parallelism cannot change any outcome.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics, model, training
from .data import Dataset
from .errors import ConceptDistilError, DataError
from .nn import derive_seed

_TRIAL = 41
_REPEAT = 42


@dataclass(frozen=True)
class SearchSpace:
    """Bounds for random sampling; widths and learning rate are log-uniform."""

    trunk_depth: tuple[int, int] = (3, 5)
    head_depth: tuple[int, int] = (3, 7)
    attention_depth: tuple[int, int] = (1, 4)
    width: tuple[int, int] = (2, 2048)
    lam: tuple[float, float] = (0.2, 0.8)
    learning_rate: tuple[float, float] = (0.0005, 0.01)
    dropout: tuple[float, float] = (0.0, 0.4)
    l2: tuple[float, float] = (0.0, 0.1)
    batchnorm: tuple[bool, ...] = (False, True)

    def __post_init__(self):
        for name in ("trunk_depth", "head_depth", "attention_depth", "width", "lam", "learning_rate", "dropout", "l2"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"{name} bounds out of order: {lo} > {hi}")
        if self.width[0] < 1:
            raise DataError("widths must be >= 1")
        if not self.batchnorm:
            raise DataError("batchnorm options must not be empty")


def _log_uniform_int(rng, lo, hi):
    if lo == hi:
        return lo
    return int(np.clip(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))), lo, hi))


def _log_uniform(rng, lo, hi):
    if lo == hi:
        return lo
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_config(
    space: SearchSpace,
    rng: np.random.Generator,
    n_features: int,
    k_concepts: int,
    base: training.TrainConfig | None = None,
) -> tuple[model.ArchitectureConfig, training.TrainConfig]:
    """Draw one in-bounds (architecture, training) configuration.

    Depths are uniform integers, per-layer widths and the learning rate
    log-uniform, the remaining continuous knobs uniform. Epochs, batch
    size, patience, seed and variant are carried over from ``base``.
    """
    base = base or training.TrainConfig()
    trunk_depth = int(rng.integers(space.trunk_depth[0], space.trunk_depth[1] + 1))
    head_depth = int(rng.integers(space.head_depth[0], space.head_depth[1] + 1))
    attention_depth = int(rng.integers(space.attention_depth[0], space.attention_depth[1] + 1))
    trunk_widths = [_log_uniform_int(rng, *space.width) for _ in range(trunk_depth)]
    head_widths = [_log_uniform_int(rng, *space.width) for _ in range(head_depth - 1)]
    attention_widths = [_log_uniform_int(rng, *space.width) for _ in range(attention_depth - 1)]
    lam = float(rng.uniform(*space.lam))
    lr = _log_uniform(rng, *space.learning_rate)
    dropout = float(rng.uniform(*space.dropout))
    l2 = float(rng.uniform(*space.l2))
    batchnorm = bool(space.batchnorm[int(rng.integers(0, len(space.batchnorm)))])
    arch = model.build_architecture(
        n_features,
        k_concepts,
        trunk_widths=trunk_widths,
        head_widths=head_widths,
        attention_widths=attention_widths,
        dropout_p=dropout,
        use_batchnorm=batchnorm,
    )
    cfg = replace(
        base,
        lam=lam,
        learning_rate=lr,
        optimizer=replace(base.optimizer, l2_penalty=l2),
    )
    return arch, cfg


@dataclass
class Trial:
    index: int
    seed: int
    lam: float
    trunk_widths: tuple[int, ...]
    head_widths: tuple[int, ...]
    attention_widths: tuple[int, ...]
    learning_rate: float
    dropout: float
    l2: float
    batchnorm: bool
    status: str = "completed"
    fidelity: float | None = None
    mean_auc: float | None = None
    history_digest: str | None = None
    error: str | None = None


@dataclass
class SweepReport:
    trials: list[Trial]
    on_frontier: np.ndarray  # aligned with trials; failed trials are never flagged

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.status == "completed"]

    def best_by_fidelity(self) -> Trial | None:
        done = self.completed()
        return max(done, key=lambda t: t.fidelity) if done else None

    def best_by_auc(self) -> Trial | None:
        done = self.completed()
        return max(done, key=lambda t: t.mean_auc) if done else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["trial_id", "lambda", "trunk_widths", "head_widths", "attention_widths",
                 "learning_rate", "dropout", "l2", "batchnorm", "fidelity", "mean_auc",
                 "on_frontier", "status"]
            )
            for t, flag in zip(self.trials, self.on_frontier):
                w.writerow(
                    [t.index, repr(t.lam), "|".join(map(str, t.trunk_widths)),
                     "|".join(map(str, t.head_widths)), "|".join(map(str, t.attention_widths)),
                     repr(t.learning_rate), repr(t.dropout), repr(t.l2), int(t.batchnorm),
                     "" if t.fidelity is None else repr(t.fidelity),
                     "" if t.mean_auc is None else repr(t.mean_auc),
                     int(bool(flag)), t.status]
                )

    def summary(self) -> dict:
        best_f, best_a = self.best_by_fidelity(), self.best_by_auc()
        return {
            "n_trials": len(self.trials),
            "n_completed": len(self.completed()),
            "n_on_frontier": int(self.on_frontier.sum()),
            "best_fidelity": None if best_f is None else {"trial_id": best_f.index, "fidelity": best_f.fidelity},
            "best_mean_auc": None if best_a is None else {"trial_id": best_a.index, "mean_auc": best_a.mean_auc},
        }

    def save_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SweepData:
    """Read-only dataset bundle shared by every trial."""

    train: Dataset
    valid: Dataset
    test: Dataset
    golden_test: Dataset


def evaluate_params(params: model.ConceptDistilParams, test: Dataset, golden_test: Dataset) -> tuple[float, float]:
    """(fidelity on the score set, mean concept AUC on the golden set)."""
    if test.bb_scores is None:
        raise DataError("fidelity evaluation requires black-box scores on the test set")
    if golden_test.golden is None:
        raise DataError("explainability evaluation requires hard concept labels")
    fid = metrics.fidelity(model.predict_scores(params, test.x), test.bb_scores)
    _, mean_auc = metrics.mean_concept_auc(
        model.predict_concepts(params, golden_test.x), golden_test.golden, golden_test.concept_names
    )
    return fid, mean_auc


def _run_trial(args) -> Trial:
    space, data, base, master_seed, index, fixed = args
    seed = derive_seed(master_seed, _TRIAL, index)
    rng = np.random.default_rng(seed)
    if fixed is None:
        arch, cfg = sample_config(space, rng, len(data.train.feature_names), data.train.k, base)
    else:
        arch, cfg = fixed
    cfg = replace(cfg, seed=seed if fixed is None else cfg.seed)
    trial = Trial(
        index=index,
        seed=cfg.seed,
        lam=cfg.lam,
        trunk_widths=tuple(s.out_dim for s in arch.trunk),
        head_widths=tuple(s.out_dim for s in arch.head_template[:-1]),
        attention_widths=tuple(s.out_dim for s in arch.attention[:-1]),
        learning_rate=cfg.learning_rate,
        dropout=arch.trunk[0].dropout_p,
        l2=cfg.optimizer.l2_penalty,
        batchnorm=arch.trunk[0].use_batchnorm,
    )
    try:
        params = model.init_model(arch, data.train.concept_names, cfg.seed)
        result = training.train(params, data.train, data.valid, cfg)
        trial.fidelity, trial.mean_auc = evaluate_params(result.params, data.test, data.golden_test)
        trial.history_digest = _history_digest(result)
    except (ConceptDistilError, FloatingPointError) as exc:
        trial.status = "failed"
        trial.error = str(exc)
    return trial


def _history_digest(result) -> str:
    h = hashlib.sha256()
    for r in result.history:
        h.update(repr((r.epoch, r.stage, r.total, r.kd_component, r.concept_component, r.valid_total)).encode())
    h.update(result.params.digest().encode())
    return h.hexdigest()


def _assemble(trials: list[Trial]) -> SweepReport:
    trials = sorted(trials, key=lambda t: t.index)
    done = [t for t in trials if t.status == "completed"]
    if not done:
        raise DataError("all trials failed")
    flags = np.zeros(len(trials), dtype=bool)
    pts = np.array([[t.fidelity, t.mean_auc] for t in done])
    done_flags = metrics.pareto_frontier(pts)
    by_index = {t.index: f for t, f in zip(done, done_flags)}
    for i, t in enumerate(trials):
        flags[i] = by_index.get(t.index, False)
    return SweepReport(trials, flags)


def run_search(
    space: SearchSpace,
    n_trials: int,
    data: SweepData,
    *,
    base: training.TrainConfig | None = None,
    master_seed: int = 0,
    jobs: int = 1,
) -> SweepReport:
    """Independent sample-train-evaluate trials over the search space."""
    if n_trials < 1:
        raise DataError("n_trials must be >= 1")
    base = base or training.TrainConfig()
    work = [(space, data, base, master_seed, i, None) for i in range(n_trials)]
    trials = _execute(work, jobs)
    return _assemble(trials)


def lambda_sweep(
    lambdas,
    n_repeats: int,
    data: SweepData,
    *,
    arch: model.ArchitectureConfig | None = None,
    base: training.TrainConfig | None = None,
    master_seed: int = 0,
    jobs: int = 1,
) -> SweepReport:
    """Grid of blend weights x repeat seeds on one fixed architecture.

    Produces exactly len(lambdas) * n_repeats trials, repeat r of every
    lambda sharing the same derived seed so the comparison is paired.
    """
    lambdas = [float(v) for v in lambdas]
    for v in lambdas:
        if not 0.0 <= v <= 1.0:
            raise DataError(f"lambda {v} outside [0, 1]")
    if n_repeats < 1:
        raise DataError("n_repeats must be >= 1")
    base = base or training.TrainConfig()
    arch = arch or model.build_architecture(len(data.train.feature_names), data.train.k)
    work = []
    index = 0
    for v in lambdas:
        for r in range(n_repeats):
            seed = derive_seed(master_seed, _REPEAT, r)
            cfg = replace(base, lam=v, seed=seed)
            work.append((None, data, base, master_seed, index, (arch, cfg)))
            index += 1
    trials = _execute(work, jobs)
    return _assemble(trials)


def _execute(work, jobs: int) -> list[Trial]:
    if jobs <= 1:
        return [_run_trial(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_trial, work))
