"""Dataset container, CSV round-tripping, splits, and a synthetic
fraud-like generator with known latent concepts.

The CSV layout is fixed: ``id`` first, then features ``f_*``, the
optional binary task label ``y``, hard concept labels ``c_<name>``, soft
concept labels ``c_<name>_soft``, black-box scores ``bb_score`` and
teacher-only enrichment columns ``t_*``. Floats are written with their
shortest round-trip representation, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .nn import derive_seed

SEQUENTIAL = "sequential"
RANDOM = "random"

GOLDEN_TRAIN_DEFAULT = 1934
GOLDEN_VALID_DEFAULT = 203
GOLDEN_TEST_DEFAULT = 506


@dataclass(frozen=True)
class Dataset:
    ids: np.ndarray  # unicode, unique
    feature_names: tuple[str, ...]
    x: np.ndarray  # (n, d) float64
    y: np.ndarray | None = None  # (n,) int 0/1 task labels
    concept_names: tuple[str, ...] = ()
    golden: np.ndarray | None = None  # (n, K) int 0/1 expert labels
    soft: np.ndarray | None = None  # (n, K) float in [0, 1]
    bb_scores: np.ndarray | None = None  # (n,) float in [0, 1]
    teacher_feature_names: tuple[str, ...] = ()
    teacher_x: np.ndarray | None = None  # (n, t) enrichment, never fed to surrogates

    def __post_init__(self):
        n = self.ids.shape[0]
        if len(np.unique(self.ids)) != n:
            raise DataError("instance ids must be unique")
        if self.x.shape != (n, len(self.feature_names)):
            raise DataError("feature matrix shape does not match ids/feature_names")
        if not np.isfinite(self.x).all():
            raise DataError("features must be finite")
        k = len(self.concept_names)
        for name, block, width in (
            ("y", self.y, 1),
            ("golden", self.golden, k),
            ("soft", self.soft, k),
            ("bb_scores", self.bb_scores, 1),
            ("teacher_x", self.teacher_x, len(self.teacher_feature_names)),
        ):
            if block is None:
                continue
            expected = (n,) if name in ("y", "bb_scores") else (n, width)
            if block.shape != expected:
                raise DataError(f"{name} shape {block.shape} does not match {expected}")
        if (self.golden is not None or self.soft is not None) and k == 0:
            raise DataError("concept labels present but concept_names is empty")
        if self.y is not None and not np.isin(self.y, (0, 1)).all():
            raise DataError("y must be binary 0/1")
        if self.golden is not None and not np.isin(self.golden, (0, 1)).all():
            raise DataError("golden concept labels must be binary 0/1")
        if self.soft is not None and (self.soft.min() < 0 or self.soft.max() > 1):
            raise DataError("soft concept labels must lie in [0, 1]")
        if self.bb_scores is not None and (self.bb_scores.min() < 0 or self.bb_scores.max() > 1):
            raise DataError("black-box scores must lie in [0, 1]")
        if (self.teacher_x is None) != (len(self.teacher_feature_names) == 0):
            raise DataError("teacher columns and names must be present together")

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def k(self) -> int:
        return len(self.concept_names)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(
            ids=self.ids[idx],
            feature_names=self.feature_names,
            x=self.x[idx],
            y=pick(self.y),
            concept_names=self.concept_names,
            golden=pick(self.golden),
            soft=pick(self.soft),
            bb_scores=pick(self.bb_scores),
            teacher_feature_names=self.teacher_feature_names,
            teacher_x=pick(self.teacher_x),
        )

    def exclude_ids(self, ids) -> "Dataset":
        drop = set(map(str, ids))
        keep = np.array([i for i in range(self.n) if str(self.ids[i]) not in drop])
        return self.take(keep)

    def with_soft(self, soft, concept_names=None) -> "Dataset":
        names = self.concept_names if concept_names is None else tuple(concept_names)
        return replace(self, soft=np.asarray(soft, dtype=np.float64), concept_names=names)

    def with_scores(self, scores) -> "Dataset":
        return replace(self, bb_scores=np.asarray(scores, dtype=np.float64))


def concept_prevalences(dataset: Dataset) -> dict[str, float]:
    if dataset.golden is None:
        raise DataError("dataset has no hard concept labels")
    return {
        name: float(dataset.golden[:, i].mean())
        for i, name in enumerate(dataset.concept_names)
    }


# -- synthetic generator ------------------------------------------------------

@dataclass(frozen=True)
class ConceptRule:
    """Linear threshold rule: concept fires when the weighted feature sum
    exceeds a quantile calibrated to hit the target prevalence."""

    name: str
    feature_indices: tuple[int, ...]
    weights: tuple[float, ...]
    prevalence: float


# Default concept vocabulary. The oblique eight-feature rules (overlapping
# subsets, mixed signs) keep small-sample axis-aligned learners away from
# the ceiling, so the weak-supervision pipeline has headroom to improve on
# its teachers; a plain feedforward net still learns them cleanly.
_DEFAULT_CONCEPTS = (
    ConceptRule("good_customer_history", (0, 3, 5, 6, 7, 10, 11, 12),
                (-0.69, -0.9, 0.88, -0.8, -0.57, -0.68, 0.94, -0.99), 0.2445),
    ConceptRule("high_speed_ordering", (1, 3, 4, 5, 10, 11, 12, 13),
                (0.7, -0.5, -0.73, 0.54, -0.52, -0.91, 0.6, 0.91), 0.1133),
    ConceptRule("suspicious_delivery", (1, 2, 6, 8, 9, 12, 13, 15),
                (-0.72, -0.54, -0.74, -0.94, -0.88, 0.74, 0.96, 0.74), 0.2286),
    ConceptRule("suspicious_device", (1, 3, 7, 8, 10, 11, 12, 13),
                (0.72, 0.98, -0.97, 0.88, 0.89, 0.84, 0.88, -0.65), 0.1173),
    ConceptRule("suspicious_email", (1, 2, 3, 8, 9, 11, 12, 15),
                (-0.77, 0.93, -0.92, -0.97, 0.9, 0.52, 0.64, -0.65), 0.2107),
    ConceptRule("suspicious_items", (0, 2, 3, 5, 6, 9, 13, 14),
                (-0.53, 0.68, -0.73, 0.66, -0.55, 0.99, -0.54, -0.87), 0.1849),
)


@dataclass(frozen=True)
class GeneratorConfig:
    n_instances: int = 50_000
    d_features: int = 16
    concepts: tuple[ConceptRule, ...] = _DEFAULT_CONCEPTS
    fraud_weights: tuple[float, ...] = (-1.4, 1.5, 1.1, 1.5, 1.2, 0.9)
    fraud_intercept: float = -2.3
    noise_level: float = 0.6
    teacher_feature_count: int = 6
    teacher_flip_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_instances < 1 or self.d_features < 1:
            raise DataError("n_instances and d_features must be >= 1")
        if len(self.fraud_weights) != len(self.concepts):
            raise DataError("fraud_weights must have one entry per concept")
        for rule in self.concepts:
            if not 0.0 < rule.prevalence < 1.0:
                raise DataError(f"infeasible prevalence {rule.prevalence} for {rule.name!r}")
            if len(rule.feature_indices) != len(rule.weights):
                raise DataError(f"rule {rule.name!r}: indices and weights differ in length")
            if max(rule.feature_indices) >= self.d_features:
                raise DataError(f"rule {rule.name!r} references a feature beyond d_features")
            if not all(np.isfinite(rule.weights)):
                raise DataError(f"rule {rule.name!r} has non-finite weights")
        if not all(np.isfinite(self.fraud_weights)) or not np.isfinite(self.fraud_intercept):
            raise DataError("fraud link parameters must be finite")
        if not 0.0 <= self.teacher_flip_p < 0.5:
            raise DataError("teacher_flip_p must be in [0, 0.5)")
        if self.teacher_feature_count < 0:
            raise DataError("teacher_feature_count must be >= 0")

    def to_json_dict(self) -> dict:
        return {
            "n_instances": self.n_instances,
            "d_features": self.d_features,
            "concepts": [
                {
                    "name": r.name,
                    "feature_indices": list(r.feature_indices),
                    "weights": list(r.weights),
                    "prevalence": r.prevalence,
                }
                for r in self.concepts
            ],
            "fraud_weights": list(self.fraud_weights),
            "fraud_intercept": self.fraud_intercept,
            "noise_level": self.noise_level,
            "teacher_feature_count": self.teacher_feature_count,
            "teacher_flip_p": self.teacher_flip_p,
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "GeneratorConfig":
        base = GeneratorConfig()
        concepts = base.concepts
        if "concepts" in doc:
            concepts = tuple(
                ConceptRule(
                    name=str(r["name"]),
                    feature_indices=tuple(int(i) for i in r["feature_indices"]),
                    weights=tuple(float(w) for w in r["weights"]),
                    prevalence=float(r["prevalence"]),
                )
                for r in doc["concepts"]
            )
        return GeneratorConfig(
            n_instances=int(doc.get("n_instances", base.n_instances)),
            d_features=int(doc.get("d_features", base.d_features)),
            concepts=concepts,
            fraud_weights=tuple(float(w) for w in doc.get("fraud_weights", base.fraud_weights)),
            fraud_intercept=float(doc.get("fraud_intercept", base.fraud_intercept)),
            noise_level=float(doc.get("noise_level", base.noise_level)),
            teacher_feature_count=int(doc.get("teacher_feature_count", base.teacher_feature_count)),
            teacher_flip_p=float(doc.get("teacher_flip_p", base.teacher_flip_p)),
            seed=int(doc.get("seed", base.seed)),
        )


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Draw a dataset with known latent concepts.

    Features are standard normal. Each concept fires when its linear rule
    score exceeds the empirical quantile matching the target prevalence.
    The fraud label thresholds a noisy linear function of the concepts,
    so with ``noise_level`` 0 the label is a deterministic function of
    the concept vector. Teacher-only columns are the concept indicators
    with labels flipped independently at ``teacher_flip_p``.
    """
    rng = np.random.default_rng(config.seed)
    n, d = config.n_instances, config.d_features
    x = rng.standard_normal((n, d))
    k = len(config.concepts)
    concepts = np.empty((n, k), dtype=np.int64)
    for i, rule in enumerate(config.concepts):
        score = x[:, list(rule.feature_indices)] @ np.asarray(rule.weights)
        tau = np.quantile(score, 1.0 - rule.prevalence)
        concepts[:, i] = score > tau
    latent = concepts @ np.asarray(config.fraud_weights) + config.fraud_intercept
    latent = latent + config.noise_level * rng.standard_normal(n)
    y = (latent > 0.0).astype(np.int64)
    t_count = config.teacher_feature_count
    teacher_x = None
    teacher_names: tuple[str, ...] = ()
    if t_count > 0:
        teacher_x = np.empty((n, t_count))
        for j in range(t_count):
            flips = rng.random(n) < config.teacher_flip_p
            teacher_x[:, j] = np.where(flips, 1 - concepts[:, j % k], concepts[:, j % k])
        teacher_names = tuple(f"t_{j}" for j in range(t_count))
    width = max(6, len(str(n - 1)))
    ids = np.array([str(i).zfill(width) for i in range(n)])
    return Dataset(
        ids=ids,
        feature_names=tuple(f"f_{j}" for j in range(d)),
        x=x,
        y=y,
        concept_names=tuple(r.name for r in config.concepts),
        golden=concepts,
        teacher_feature_names=teacher_names,
        teacher_x=teacher_x,
    )


# -- CSV ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(dataset: Dataset, path) -> None:
    header = ["id", *dataset.feature_names]
    if dataset.y is not None:
        header.append("y")
    if dataset.golden is not None:
        header += [f"c_{n}" for n in dataset.concept_names]
    if dataset.soft is not None:
        header += [f"c_{n}_soft" for n in dataset.concept_names]
    if dataset.bb_scores is not None:
        header.append("bb_score")
    header += list(dataset.teacher_feature_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n):
            row = [str(dataset.ids[i]), *(_fmt(v) for v in dataset.x[i])]
            if dataset.y is not None:
                row.append(str(int(dataset.y[i])))
            if dataset.golden is not None:
                row += [str(int(v)) for v in dataset.golden[i]]
            if dataset.soft is not None:
                row += [_fmt(v) for v in dataset.soft[i]]
            if dataset.bb_scores is not None:
                row.append(_fmt(dataset.bb_scores[i]))
            if dataset.teacher_x is not None:
                row += [_fmt(v) for v in dataset.teacher_x[i]]
            w.writerow(row)


def _parse_float(cell: str, line_no: int, column: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {line_no}: non-numeric value {cell!r} in column {column!r}") from None


def _parse_binary(cell: str, line_no: int, column: str) -> int:
    if cell not in ("0", "1"):
        raise DataError(f"line {line_no}: expected 0/1 in column {column!r}, got {cell!r}")
    return int(cell)


def load_csv(path) -> Dataset:
    """Read a dataset CSV; errors carry 1-based file line numbers."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "id":
            raise DataError(f"{path}: first column must be 'id'")
        feature_cols, teacher_cols, golden_cols, soft_cols = [], [], [], []
        y_col = score_col = None
        for j, name in enumerate(header[1:], start=1):
            if name == "y":
                y_col = j
            elif name == "bb_score":
                score_col = j
            elif name.startswith("f_"):
                feature_cols.append((j, name))
            elif name.startswith("t_"):
                teacher_cols.append((j, name))
            elif name.startswith("c_") and name.endswith("_soft"):
                soft_cols.append((j, name[2:-5]))
            elif name.startswith("c_"):
                golden_cols.append((j, name[2:]))
            else:
                raise DataError(f"{path}: unrecognized column {name!r}")
        golden_names = [n for _, n in golden_cols]
        soft_names = [n for _, n in soft_cols]
        if golden_names and soft_names and golden_names != soft_names:
            raise DataError(f"{path}: hard and soft concept columns disagree")
        concept_names = tuple(golden_names or soft_names)

        ids, xs, ys, gs, ss, scores, ts = [], [], [], [], [], [], []
        n_fields = len(header)
        for line_no, row in enumerate(reader, start=2):
            if len(row) != n_fields:
                raise DataError(f"{path}: line {line_no}: expected {n_fields} fields, got {len(row)}")
            ids.append(row[0])
            xs.append([_parse_float(row[j], line_no, name) for j, name in feature_cols])
            if y_col is not None:
                ys.append(_parse_binary(row[y_col], line_no, "y"))
            if golden_cols:
                gs.append([_parse_binary(row[j], line_no, f"c_{n}") for j, n in golden_cols])
            if soft_cols:
                ss.append([_parse_float(row[j], line_no, f"c_{n}_soft") for j, n in soft_cols])
            if score_col is not None:
                scores.append(_parse_float(row[score_col], line_no, "bb_score"))
            if teacher_cols:
                ts.append([_parse_float(row[j], line_no, name) for j, name in teacher_cols])

    ids_arr = np.asarray(ids)
    if len(np.unique(ids_arr)) != len(ids):
        raise DataError(f"{path}: duplicate instance ids")
    to_mat = lambda rows: np.asarray(rows, dtype=np.float64)
    return Dataset(
        ids=ids_arr,
        feature_names=tuple(name for _, name in feature_cols),
        x=to_mat(xs).reshape(len(ids), len(feature_cols)),
        y=np.asarray(ys, dtype=np.int64) if y_col is not None else None,
        concept_names=concept_names,
        golden=np.asarray(gs, dtype=np.int64) if golden_cols else None,
        soft=to_mat(ss) if soft_cols else None,
        bb_scores=to_mat(scores) if score_col is not None else None,
        teacher_feature_names=tuple(name for _, name in teacher_cols),
        teacher_x=to_mat(ts) if teacher_cols else None,
    )


# -- splits -------------------------------------------------------------------

def split(
    dataset: Dataset,
    train_frac: float,
    valid_frac: float,
    test_frac: float,
    mode: str = SEQUENTIAL,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Exact three-way partition; sequential mode preserves id order."""
    for name, frac in (("train", train_frac), ("valid", valid_frac), ("test", test_frac)):
        if not 0.0 < frac < 1.0:
            raise DataError(f"{name} fraction must be in (0, 1), got {frac}")
    if abs(train_frac + valid_frac + test_frac - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    if mode not in (SEQUENTIAL, RANDOM):
        raise DataError(f"unknown split mode {mode!r}")
    n = dataset.n
    i1 = int(round(train_frac * n))
    i2 = int(round((train_frac + valid_frac) * n))
    if i1 == 0 or i2 == i1 or i2 == n:
        raise DataError("split produces an empty subset")
    order = np.arange(n) if mode == SEQUENTIAL else np.random.default_rng(seed).permutation(n)
    return dataset.take(order[:i1]), dataset.take(order[i1:i2]), dataset.take(order[i2:])


def golden_subset(
    dataset: Dataset,
    n_train: int = GOLDEN_TRAIN_DEFAULT,
    n_valid: int = GOLDEN_VALID_DEFAULT,
    n_test: int = GOLDEN_TEST_DEFAULT,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint expert-labelled subsets for teachers and evaluation."""
    if dataset.golden is None:
        raise DataError("golden_subset requires hard concept labels")
    total = n_train + n_valid + n_test
    if total > dataset.n:
        raise DataError(f"requested {total} golden rows but only {dataset.n} are available")
    if min(n_train, n_valid, n_test) < 1:
        raise DataError("golden subset sizes must be >= 1")
    perm = np.random.default_rng(derive_seed(seed, 3)).permutation(dataset.n)
    sel_train = np.sort(perm[:n_train])
    sel_valid = np.sort(perm[n_train : n_train + n_valid])
    sel_test = np.sort(perm[n_train + n_valid : total])
    return dataset.take(sel_train), dataset.take(sel_valid), dataset.take(sel_test)
