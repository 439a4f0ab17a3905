"""Joint, gradient-blocked and two-stage fitting of the surrogate.

The objective is a convex blend of two binary cross-entropies: ``lam``
weights the mimicry term (surrogate score vs. black-box score) and
``1 - lam`` the concept term (mean per-concept BCE against soft or hard
concept labels). The variants differ only in gradient routing:

* ``default``        joint training, both terms reach every block;
* ``no-gradient``    the mimicry term is stopped at the concept outputs,
                     so trunk and heads learn from the concept term only
                     while the attention stack learns from the mimicry
                     term, simultaneously;
* ``2-staged``       concept blocks are fitted first (lam forced to 0),
                     frozen bit-exactly, then the attention stack is
                     fitted against their eval-mode predictions (lam 1);
* ``baseline-distill``  single-task run with lam forced to 1;
* ``baseline-concept``  single-task run with lam forced to 0.

The two baselines share the joint code path, so a ``default`` run with
the same pinned lam reproduces them step for step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, model, nn
from .errors import DataError, NumericError
from .nn import EVAL, TRAIN, OptimizerConfig, derive_seed

DEFAULT = "default"
NO_GRADIENT = "no-gradient"
TWO_STAGED = "2-staged"
BASELINE_DISTILL = "baseline-distill"
BASELINE_CONCEPT = "baseline-concept"
VARIANTS = (DEFAULT, NO_GRADIENT, TWO_STAGED, BASELINE_DISTILL, BASELINE_CONCEPT)

METRIC_COMBINED = "combined_loss"
METRIC_FIDELITY = "fidelity"
METRIC_CONCEPT_BCE = "mean_concept_bce"
VALIDATION_METRICS = (METRIC_COMBINED, METRIC_FIDELITY, METRIC_CONCEPT_BCE)

# seed-stream tags
_SHUFFLE = 101
_BATCH = 102


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    early_stop_patience: int = 10
    seed: int = 0
    variant: str = DEFAULT
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    validation_metric: str = METRIC_COMBINED

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise DataError(f"lam must be in [0, 1], got {self.lam}")
        if self.variant not in VARIANTS:
            raise DataError(f"unknown variant {self.variant!r}")
        if self.validation_metric not in VALIDATION_METRICS:
            raise DataError(f"unknown validation metric {self.validation_metric!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise DataError("epochs, batch_size and early_stop_patience must be >= 1")
        if self.learning_rate <= 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")

    def effective_optimizer(self) -> OptimizerConfig:
        return replace(self.optimizer, lr=self.learning_rate)


@dataclass
class LossBreakdown:
    total: float
    kd_component: float
    concept_component: float
    per_concept_bce: np.ndarray


def concept_loss(y_e_pred, y_e_target) -> tuple[float, np.ndarray]:
    """Mean over concepts of the per-concept batch BCE (soft targets allowed).

    Averaging each concept column over the batch and then averaging the K
    column means equals the plain mean over all entries, which is what
    this returns along with its gradient.
    """
    return nn.bce_loss(y_e_pred, y_e_target)


def per_concept_bce(y_e_pred, y_e_target) -> np.ndarray:
    p = np.clip(np.asarray(y_e_pred, dtype=np.float64), nn.BCE_EPS, 1.0 - nn.BCE_EPS)
    t = np.asarray(y_e_target, dtype=np.float64)
    entries = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return entries.mean(axis=0)


def total_loss(
    y_e: np.ndarray,
    y_kd: np.ndarray,
    y_e_target: np.ndarray | None,
    kd_target: np.ndarray | None,
    lam: float,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Blended loss and its gradients w.r.t. the model outputs.

    Returns ``(breakdown, d_y_kd, d_y_e)`` where the gradients already
    carry the lam / (1 - lam) weights. Missing targets are only allowed
    when their weight is zero.
    """
    k = y_e.shape[1]
    n = y_e.shape[0]
    if kd_target is None:
        if lam > 0.0:
            raise DataError("kd_target (black-box scores) required when lam > 0")
        kd_component, d_y_kd = 0.0, np.zeros(n)
    else:
        kd_target = np.asarray(kd_target, dtype=np.float64)
        if kd_target.shape != (n,):
            raise DataError("kd_target must have one score per batch row")
        kd_component, g = nn.bce_loss(y_kd.reshape(-1, 1), kd_target.reshape(-1, 1))
        d_y_kd = lam * g[:, 0]
    if y_e_target is None:
        if lam < 1.0:
            raise DataError("concept targets required when lam < 1")
        concept_component, d_y_e = 0.0, np.zeros_like(y_e)
        per_concept = np.zeros(k)
    else:
        concept_component, g = concept_loss(y_e, y_e_target)
        d_y_e = (1.0 - lam) * g
        per_concept = per_concept_bce(y_e, y_e_target)
    total = lam * kd_component + (1.0 - lam) * concept_component
    return LossBreakdown(total, kd_component, concept_component, per_concept), d_y_kd, d_y_e


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    total: float
    kd_component: float
    concept_component: float
    valid_total: float
    valid_kd: float
    valid_concept: float
    valid_fidelity: float  # nan when no scores are attached


@dataclass
class TrainResult:
    params: model.ConceptDistilParams
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool


def history_to_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["epoch", "stage", "total", "kd_component", "concept_component",
             "valid_total", "valid_kd", "valid_concept", "valid_fidelity"]
        )
        for r in history:
            w.writerow(
                [r.epoch, r.stage, repr(r.total), repr(r.kd_component), repr(r.concept_component),
                 repr(r.valid_total), repr(r.valid_kd), repr(r.valid_concept), repr(r.valid_fidelity)]
            )


def _concept_targets(dataset) -> np.ndarray | None:
    if dataset.soft is not None:
        return dataset.soft
    if dataset.golden is not None:
        return dataset.golden.astype(np.float64)
    return None


def evaluate_loss(params, dataset, lam: float) -> LossBreakdown:
    """Eval-mode loss breakdown over a whole dataset (dropout off)."""
    out = model.forward_full(params, dataset.x, EVAL)
    breakdown, _, _ = total_loss(out.y_e, out.y_kd, _concept_targets(dataset), dataset.bb_scores, lam)
    return breakdown


@dataclass
class _OptStates:
    c: nn.OptimizerState | None = None
    m: list = field(default_factory=list)
    a: nn.OptimizerState | None = None


def _joint_step(params, xb, ye_t, kd_t, lam, stop_concept_grad, opt_cfg, states, rng_seed):
    out = model.forward_full(params, xb, TRAIN, rng_seed)
    breakdown, d_kd, d_ye = total_loss(out.y_e, out.y_kd, ye_t, kd_t, lam)
    grads = model.backward_full(params, out, d_kd, d_ye, stop_concept_grad=stop_concept_grad)
    states.c = nn.optimizer_step(params.theta_c, grads.theta_c, opt_cfg, states.c)
    if not states.m:
        states.m = [None] * len(params.theta_m)
    for i, head in enumerate(params.theta_m):
        states.m[i] = nn.optimizer_step(head, grads.theta_m[i], opt_cfg, states.m[i])
    states.a = nn.optimizer_step(params.theta_a, grads.theta_a, opt_cfg, states.a)
    nn.update_running_stats(params.theta_c, out.concept_traces.trunk)
    for head, tr in zip(params.theta_m, out.concept_traces.heads):
        nn.update_running_stats(head, tr)
    nn.update_running_stats(params.theta_a, out.attention_trace)
    return breakdown


def _attention_step(params, xb, kd_t, opt_cfg, states, rng_seed):
    # stage 2: concept predictions frozen at their deployment-time values
    y_e, _ = model.concept_forward(params, xb, EVAL)
    alpha, trace_a = model.attention_forward(params, xb, TRAIN, rng_seed)
    y_kd = (y_e * alpha).sum(axis=1)
    kd_component, g = nn.bce_loss(y_kd.reshape(-1, 1), kd_t.reshape(-1, 1))
    d_kd = g[:, 0].reshape(-1, 1)
    d_alpha = d_kd * y_e
    d_e = nn.softmax_backward(alpha, d_alpha)
    grads_a, _ = nn.backward(params.theta_a, trace_a, d_e)
    states.a = nn.optimizer_step(params.theta_a, grads_a, opt_cfg, states.a)
    nn.update_running_stats(params.theta_a, trace_a)
    return LossBreakdown(kd_component, kd_component, 0.0, np.zeros(params.config.k_concepts))


def _validation_record(params, valid_set, lam):
    out = model.forward_full(params, valid_set.x, EVAL)
    breakdown, _, _ = total_loss(out.y_e, out.y_kd, _concept_targets(valid_set), valid_set.bb_scores, lam)
    fid = float("nan")
    if valid_set.bb_scores is not None:
        fid = metrics.fidelity(out.y_kd, valid_set.bb_scores)
    return breakdown, fid


def _metric_value(metric, breakdown, fid):
    if metric == METRIC_COMBINED:
        return breakdown.total
    if metric == METRIC_CONCEPT_BCE:
        return breakdown.concept_component
    if math.isnan(fid):
        raise DataError("fidelity validation metric requires black-box scores on the validation set")
    return -fid  # maximized metric, minimized internally


def _run_stage(params, train_set, valid_set, config, *, stage, lam, step_fn, start_epoch):
    n = train_set.n
    opt_cfg = config.effective_optimizer()
    states = _OptStates()
    history = []
    best_value = math.inf
    best_snapshot = params.copy()
    best_epoch = start_epoch
    bad_epochs = 0
    stopped_early = False
    for e in range(config.epochs):
        epoch = start_epoch + e
        order = np.random.default_rng(derive_seed(config.seed, _SHUFFLE, stage, e)).permutation(n)
        sums = np.zeros(3)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            seed_b = derive_seed(config.seed, _BATCH, stage, e, b)
            breakdown = step_fn(idx, opt_cfg, states, seed_b)
            if not math.isfinite(breakdown.total):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            sums += len(idx) * np.array([breakdown.total, breakdown.kd_component, breakdown.concept_component])
        train_means = sums / n
        vb, vfid = _validation_record(params, valid_set, lam)
        history.append(
            EpochRecord(epoch, stage, float(train_means[0]), float(train_means[1]), float(train_means[2]),
                        vb.total, vb.kd_component, vb.concept_component, vfid)
        )
        value = _metric_value(config.validation_metric, vb, vfid)
        if value < best_value:
            best_value = value
            best_snapshot = params.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                stopped_early = True
                break
    return best_snapshot, history, best_epoch, stopped_early


def _require(condition, message):
    if not condition:
        raise DataError(message)


def train(params: model.ConceptDistilParams, train_set, valid_set, config: TrainConfig) -> TrainResult:
    """Fit the surrogate under the configured variant.

    The input params are not mutated; the best-validation-epoch copy is
    returned. Identical (params, data, config) reproduce the history and
    the final parameters bit for bit.
    """
    for ds in (train_set, valid_set):
        if ds.k and ds.k != params.config.k_concepts:
            raise DataError("dataset concept count does not match the model")
    work = params.copy()
    variant = config.variant
    ye_train = _concept_targets(train_set)
    needs_concepts = variant != BASELINE_DISTILL
    needs_scores = variant != BASELINE_CONCEPT
    if needs_concepts:
        _require(ye_train is not None, f"{variant} training requires concept labels")
        _require(_concept_targets(valid_set) is not None, f"{variant} validation requires concept labels")
    if needs_scores:
        _require(train_set.bb_scores is not None, f"{variant} training requires black-box scores")
        _require(valid_set.bb_scores is not None, f"{variant} validation requires black-box scores")

    if variant == TWO_STAGED:
        stage1 = replace(config, variant=BASELINE_CONCEPT)
        res1 = train(work, train_set, valid_set, stage1)
        work = res1.params
        frozen = work.concept_digest()
        kd_t = train_set.bb_scores

        def stage2_step(idx, opt_cfg, states, seed_b):
            return _attention_step(work, train_set.x[idx], kd_t[idx], opt_cfg, states, seed_b)

        stage2_cfg = replace(config, validation_metric=METRIC_COMBINED)
        best, hist2, best_epoch, stopped = _run_stage(
            work, train_set, valid_set, stage2_cfg,
            stage=2, lam=1.0, step_fn=stage2_step, start_epoch=len(res1.history),
        )
        if best.concept_digest() != frozen:
            raise NumericError("stage 2 modified frozen concept parameters")
        return TrainResult(best, res1.history + hist2, best_epoch, stopped)

    if variant in (DEFAULT, NO_GRADIENT):
        lam = config.lam
    elif variant == BASELINE_DISTILL:
        lam = 1.0
    else:
        lam = 0.0
    stop = variant == NO_GRADIENT
    kd_t = train_set.bb_scores
    x_train = train_set.x

    def joint(idx, opt_cfg, states, seed_b):
        ye_b = None if ye_train is None else ye_train[idx]
        kd_b = None if kd_t is None else kd_t[idx]
        return _joint_step(work, x_train[idx], ye_b, kd_b, lam, stop, opt_cfg, states, seed_b)

    best, history, best_epoch, stopped = _run_stage(
        work, train_set, valid_set, config, stage=1, lam=lam, step_fn=joint, start_epoch=0
    )
    return TrainResult(best, history, best_epoch, stopped)
