"""Surrogate architecture: shared trunk, per-concept heads, attention combiner.

The network predicts K concept probabilities through a shared trunk plus
one small sigmoid head per concept. A separate attention stack maps the
raw feature vector to K logits whose row-wise softmax weights combine the
concept probabilities into a single mimicry score. Because the score is a
convex combination, it always lies inside the interval spanned by the
instance's concept probabilities and decomposes into per-concept
contributions, which is what the explanation output exposes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import DataError
from .nn import EVAL, LayerSpec, MLPParams, derive_seed

FORMAT_VERSION = 1

# seed-stream tags for the three sub-networks
_SEED_TRUNK = 0
_SEED_HEAD = 1
_SEED_ATTENTION = 2


@dataclass(frozen=True)
class ArchitectureConfig:
    """Layer stacks for the three sub-networks.

    ``head_template`` is replicated once per concept (each head gets its
    own parameters); it must end in a single sigmoid unit. The attention
    stack consumes the raw features and must end in ``k_concepts``
    identity units.
    """

    k_concepts: int
    trunk: tuple[LayerSpec, ...]
    head_template: tuple[LayerSpec, ...]
    attention: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.k_concepts < 1:
            raise DataError("k_concepts must be >= 1")
        for name, stack in (("trunk", self.trunk), ("head", self.head_template), ("attention", self.attention)):
            if not stack:
                raise DataError(f"{name} stack must have at least one layer")
            for i in range(len(stack) - 1):
                if stack[i].out_dim != stack[i + 1].in_dim:
                    raise DataError(f"{name} stack dims do not chain at layer {i}")
        if self.head_template[0].in_dim != self.trunk[-1].out_dim:
            raise DataError("head input dim must equal trunk output dim")
        if self.head_template[-1].out_dim != 1 or self.head_template[-1].activation != "sigmoid":
            raise DataError("head must end in a single sigmoid unit")
        if self.attention[0].in_dim != self.trunk[0].in_dim:
            raise DataError("attention input dim must equal the raw feature dim")
        if self.attention[-1].out_dim != self.k_concepts:
            raise DataError("attention must end in k_concepts units")
        if self.attention[-1].activation != "identity":
            raise DataError("attention output layer must be identity (logits)")

    @property
    def n_features(self) -> int:
        return self.trunk[0].in_dim


def build_architecture(
    n_features: int,
    k_concepts: int,
    trunk_widths=(64, 48, 32),
    head_widths=(16, 8),
    attention_widths=(16,),
    dropout_p: float = 0.0,
    use_batchnorm: bool = False,
) -> ArchitectureConfig:
    """Assemble a standard relu architecture from width lists.

    Dropout and batchnorm apply to hidden layers only; head and attention
    output layers stay plain.
    """
    def chain(in_dim, widths, last_dim, last_act):
        dims = [in_dim, *widths]
        layers = [
            LayerSpec(dims[i], dims[i + 1], "relu", dropout_p, use_batchnorm)
            for i in range(len(dims) - 1)
        ]
        layers.append(LayerSpec(dims[-1], last_dim, last_act))
        return tuple(layers)

    if not trunk_widths:
        raise DataError("trunk needs at least one width")
    trunk_dims = [n_features, *trunk_widths]
    trunk = tuple(
        LayerSpec(trunk_dims[i], trunk_dims[i + 1], "relu", dropout_p, use_batchnorm)
        for i in range(len(trunk_dims) - 1)
    )
    heads = chain(trunk_widths[-1], head_widths, 1, "sigmoid")
    attention = chain(n_features, attention_widths, k_concepts, "identity")
    return ArchitectureConfig(k_concepts, trunk, heads, attention)


@dataclass
class ConceptDistilParams:
    """All learnable state: trunk, K concept heads, attention stack."""

    config: ArchitectureConfig
    theta_c: MLPParams
    theta_m: list[MLPParams]
    theta_a: MLPParams
    concept_names: tuple[str, ...]

    def __post_init__(self):
        k = self.config.k_concepts
        if len(self.theta_m) != k:
            raise DataError(f"expected {k} heads, got {len(self.theta_m)}")
        if len(self.concept_names) != k or len(set(self.concept_names)) != k:
            raise DataError("concept_names must be unique and match k_concepts")
        if tuple(self.theta_c.specs) != self.config.trunk:
            raise DataError("trunk params do not match architecture")
        for i, head in enumerate(self.theta_m):
            if tuple(head.specs) != self.config.head_template:
                raise DataError(f"head {i} params do not match architecture")
        if tuple(self.theta_a.specs) != self.config.attention:
            raise DataError("attention params do not match architecture")

    def copy(self) -> "ConceptDistilParams":
        return ConceptDistilParams(
            self.config,
            self.theta_c.copy(),
            [h.copy() for h in self.theta_m],
            self.theta_a.copy(),
            tuple(self.concept_names),
        )

    def digest(self, include_running_stats: bool = True) -> str:
        return nn.params_digest(
            self.theta_c, *self.theta_m, self.theta_a, include_running_stats=include_running_stats
        )

    def concept_digest(self, include_running_stats: bool = True) -> str:
        """Digest over the concept blocks only (trunk + heads)."""
        return nn.params_digest(
            self.theta_c, *self.theta_m, include_running_stats=include_running_stats
        )


def init_model(config: ArchitectureConfig, concept_names, seed: int = 0) -> ConceptDistilParams:
    names = tuple(concept_names)
    theta_c = nn.init_mlp(config.trunk, derive_seed(seed, _SEED_TRUNK))
    theta_m = [
        nn.init_mlp(config.head_template, derive_seed(seed, _SEED_HEAD, i))
        for i in range(config.k_concepts)
    ]
    theta_a = nn.init_mlp(config.attention, derive_seed(seed, _SEED_ATTENTION))
    return ConceptDistilParams(config, theta_c, theta_m, theta_a, names)


@dataclass
class ConceptTraces:
    trunk: nn.ForwardTrace
    heads: list[nn.ForwardTrace]


def concept_forward(params: ConceptDistilParams, x, mode: str = EVAL, rng_seed: int = 0):
    """Concept probabilities, column i from head i on the shared trunk."""
    trunk_out, trace_c = nn.forward(params.theta_c, x, mode, derive_seed(rng_seed, _SEED_TRUNK))
    cols = []
    traces = []
    for i, head in enumerate(params.theta_m):
        out, tr = nn.forward(head, trunk_out, mode, derive_seed(rng_seed, _SEED_HEAD, i))
        cols.append(out[:, 0])
        traces.append(tr)
    y_e = np.column_stack(cols)
    return y_e, ConceptTraces(trace_c, traces)


def attention_forward(params: ConceptDistilParams, x, mode: str = EVAL, rng_seed: int = 0):
    """Attention weights: row-wise softmax over the attention stack's logits."""
    e, trace = nn.forward(params.theta_a, x, mode, derive_seed(rng_seed, _SEED_ATTENTION))
    return nn.softmax_rowwise(e), trace


@dataclass
class ModelOutputs:
    y_e: np.ndarray  # (n, K) concept probabilities
    alpha: np.ndarray  # (n, K) attention weights, rows sum to 1
    y_kd: np.ndarray  # (n,) mimicry score, rows of y_e * alpha summed
    concept_traces: ConceptTraces
    attention_trace: nn.ForwardTrace
    mode: str


def forward_full(params: ConceptDistilParams, x, mode: str = EVAL, rng_seed: int = 0) -> ModelOutputs:
    y_e, ct = concept_forward(params, x, mode, rng_seed)
    alpha, at = attention_forward(params, x, mode, rng_seed)
    y_kd = (y_e * alpha).sum(axis=1)
    return ModelOutputs(y_e, alpha, y_kd, ct, at, mode)


@dataclass
class ModelGrads:
    theta_c: nn.GradientSet
    theta_m: list[nn.GradientSet]
    theta_a: nn.GradientSet


def backward_full(
    params: ConceptDistilParams,
    outputs: ModelOutputs,
    d_y_kd: np.ndarray,
    d_y_e: np.ndarray,
    stop_concept_grad: bool = False,
) -> ModelGrads:
    """Backpropagate loss gradients through the combiner and all stacks.

    ``d_y_kd`` is the loss gradient w.r.t. the mimicry score, ``d_y_e``
    the direct gradient w.r.t. the concept probabilities. With
    ``stop_concept_grad`` the mimicry path is cut at the concept outputs:
    its gradient still reaches the attention stack but contributes
    nothing to trunk or heads.
    """
    y_e, alpha = outputs.y_e, outputs.alpha
    dk = np.asarray(d_y_kd, dtype=np.float64).reshape(-1, 1)
    d_alpha = dk * y_e
    d_e = nn.softmax_backward(alpha, d_alpha)
    grads_a, _ = nn.backward(params.theta_a, outputs.attention_trace, d_e)

    d_ye_total = np.asarray(d_y_e, dtype=np.float64)
    if not stop_concept_grad:
        d_ye_total = d_ye_total + dk * alpha

    grads_m = []
    d_trunk_out = None
    for i, head in enumerate(params.theta_m):
        g, d_in = nn.backward(head, outputs.concept_traces.heads[i], d_ye_total[:, i : i + 1])
        grads_m.append(g)
        d_trunk_out = d_in if d_trunk_out is None else d_trunk_out + d_in
    grads_c, _ = nn.backward(params.theta_c, outputs.concept_traces.trunk, d_trunk_out)
    return ModelGrads(grads_c, grads_m, grads_a)


@dataclass(frozen=True)
class Explanation:
    """Per-instance explanation: what the surrogate saw and why it scored so."""

    concept_names: tuple[str, ...]
    concept_probs: np.ndarray
    attention: np.ndarray
    kd_score: float
    contributions: np.ndarray
    instance_id: str | None = None

    def __post_init__(self):
        if abs(self.kd_score - float(self.contributions.sum())) > 1e-9:
            raise DataError("kd_score must equal the sum of contributions")
        lo, hi = float(self.concept_probs.min()), float(self.concept_probs.max())
        if not (lo - 1e-9 <= self.kd_score <= hi + 1e-9):
            raise DataError("kd_score must lie within the concept probability range")

    def to_json_dict(self) -> dict:
        return {
            "id": self.instance_id,
            "kd_score": self.kd_score,
            "concept_probs": {n: float(p) for n, p in zip(self.concept_names, self.concept_probs)},
            "attention": {n: float(a) for n, a in zip(self.concept_names, self.attention)},
            "contributions": {n: float(c) for n, c in zip(self.concept_names, self.contributions)},
        }


def explain(params: ConceptDistilParams, x, ids=None) -> list[Explanation]:
    """Eval-mode forward returning one Explanation per row."""
    out = forward_full(params, x, EVAL)
    n = out.y_e.shape[0]
    if ids is None:
        ids = [None] * n
    elif len(ids) != n:
        raise DataError("ids length does not match the number of rows")
    contributions = out.y_e * out.alpha
    return [
        Explanation(
            params.concept_names,
            out.y_e[i].copy(),
            out.alpha[i].copy(),
            float(out.y_kd[i]),
            contributions[i].copy(),
            None if ids[i] is None else str(ids[i]),
        )
        for i in range(n)
    ]


def explanations_to_jsonl(explanations, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in explanations:
            fh.write(json.dumps(ex.to_json_dict(), allow_nan=False) + "\n")


def predict_concepts(params: ConceptDistilParams, x) -> np.ndarray:
    return concept_forward(params, x, EVAL)[0]


def predict_scores(params: ConceptDistilParams, x) -> np.ndarray:
    return forward_full(params, x, EVAL).y_kd


# -- serialization ----------------------------------------------------------

def model_to_doc(params: ConceptDistilParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "concept_distil",
        "concept_names": list(params.concept_names),
        "trunk": nn.mlp_to_doc(params.theta_c),
        "heads": [nn.mlp_to_doc(h) for h in params.theta_m],
        "attention": nn.mlp_to_doc(params.theta_a),
    }


def model_from_doc(doc: dict) -> ConceptDistilParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported model format_version {doc.get('format_version')!r}")
    if doc.get("kind") != "concept_distil":
        raise DataError(f"not a surrogate model file (kind={doc.get('kind')!r})")
    theta_c = nn.mlp_from_doc(doc["trunk"])
    theta_m = [nn.mlp_from_doc(h) for h in doc["heads"]]
    theta_a = nn.mlp_from_doc(doc["attention"])
    config = ArchitectureConfig(
        k_concepts=len(theta_m),
        trunk=tuple(theta_c.specs),
        head_template=tuple(theta_m[0].specs),
        attention=tuple(theta_a.specs),
    )
    return ConceptDistilParams(config, theta_c, theta_m, theta_a, tuple(doc["concept_names"]))


def save_model(params: ConceptDistilParams, path) -> None:
    Path(path).write_text(json.dumps(model_to_doc(params), allow_nan=False), encoding="utf-8")


def load_model(path) -> ConceptDistilParams:
    return model_from_doc(json.loads(Path(path).read_text(encoding="utf-8")))
