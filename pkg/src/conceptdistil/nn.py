"""Minimal float64 feedforward engine with exact backpropagation.

All tensors are dense row-major 2-D numpy arrays (rows are instances).
A layer applies a linear map, optional batch normalization, an elementwise
activation (relu / sigmoid / identity) and optional inverted dropout.

Forward passes are pure functions: train-mode randomness is fully
determined by the ``rng_seed`` argument, and batchnorm running statistics
are folded in explicitly via :func:`update_running_stats`, never as a
side effect of :func:`forward`. This keeps (params, input, mode, seed)
-> output bit-reproducible, which the rest of the toolkit relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

TRAIN = "train"
EVAL = "eval"
ACTIVATIONS = ("relu", "sigmoid", "identity")

BCE_EPS = 1e-7  # prediction clamp keeping the loss finite at saturation
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def derive_seed(*parts: int) -> int:
    """Deterministic, platform-stable child seed from integer parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint32)[0])


def as_matrix(a, name: str = "input") -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise DataError(f"{name} must be a 2-D array, got shape {out.shape}")
    return out


def ensure_finite(a: np.ndarray, context: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite values in {context}")
    return a


@dataclass(frozen=True)
class LayerSpec:
    """Shape and behaviour of one layer.

    Dropout and batch normalization, when enabled, act on this layer's
    pre-activation / output respectively (linear -> batchnorm ->
    activation -> dropout).
    """

    in_dim: int
    out_dim: int
    activation: str = "relu"
    dropout_p: float = 0.0
    use_batchnorm: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DataError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DataError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")


@dataclass
class LayerParams:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def copy(self) -> "LayerParams":
        c = lambda a: None if a is None else a.copy()
        return LayerParams(
            self.weights.copy(),
            self.bias.copy(),
            c(self.gamma),
            c(self.beta),
            c(self.running_mean),
            c(self.running_var),
        )


@dataclass
class MLPParams:
    layers: list[LayerParams]
    specs: list[LayerSpec]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.layers) != len(self.specs) or not self.specs:
            raise DataError("params and specs must pair one layer each, at least one layer")
        for i, (layer, spec) in enumerate(zip(self.layers, self.specs)):
            if layer.weights.shape != (spec.out_dim, spec.in_dim):
                raise DataError(f"layer {i}: weights {layer.weights.shape} do not match spec")
            if layer.bias.shape != (spec.out_dim,):
                raise DataError(f"layer {i}: bias shape {layer.bias.shape} does not match spec")
            if i + 1 < len(self.specs) and spec.out_dim != self.specs[i + 1].in_dim:
                raise DataError(f"layer {i}->{i + 1}: dims do not chain")
            has_bn = layer.gamma is not None
            if has_bn != spec.use_batchnorm:
                raise DataError(f"layer {i}: batchnorm state inconsistent with spec")
            if spec.use_batchnorm and np.any(layer.running_var <= 0):
                raise DataError(f"layer {i}: running_var must be strictly positive")

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def copy(self) -> "MLPParams":
        return MLPParams([l.copy() for l in self.layers], list(self.specs))


def init_mlp(specs, seed: int = 0) -> MLPParams:
    """Fan-based uniform init: W ~ U(+-sqrt(6/(fan_in+fan_out))), zero bias."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
        b = np.zeros(spec.out_dim)
        if spec.use_batchnorm:
            layers.append(
                LayerParams(
                    w,
                    b,
                    gamma=np.ones(spec.out_dim),
                    beta=np.zeros(spec.out_dim),
                    running_mean=np.zeros(spec.out_dim),
                    running_var=np.ones(spec.out_dim),
                )
            )
        else:
            layers.append(LayerParams(w, b))
    return MLPParams(layers, list(specs))


@dataclass
class LayerTrace:
    x_in: np.ndarray
    z_hat: np.ndarray | None  # normalized pre-activation (batchnorm layers)
    bn_mean: np.ndarray | None
    bn_var: np.ndarray | None
    act_out: np.ndarray  # post-activation, pre-dropout
    mask: np.ndarray | None  # scaled inverted-dropout mask


@dataclass
class ForwardTrace:
    mode: str
    layers: list[LayerTrace]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params: MLPParams, x, mode: str = EVAL, rng_seed: int = 0):
    """Run the network, returning ``(output, trace)``.

    Train-mode dropout masks are drawn from ``rng_seed`` alone, so
    identical arguments give bit-identical outputs. In eval mode dropout
    is a no-op and batchnorm uses the running statistics.
    """
    if mode not in (TRAIN, EVAL):
        raise DataError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    x = as_matrix(x)
    if x.shape[1] != params.in_dim:
        raise DataError(f"input has {x.shape[1]} columns, network expects {params.in_dim}")
    rng = np.random.default_rng(rng_seed)
    traces = []
    h = x
    for i, (spec, layer) in enumerate(zip(params.specs, params.layers)):
        x_in = h
        z = h @ layer.weights.T + layer.bias
        # checked per layer: relu and sigmoid would silently absorb an
        # overflowed infinity before it could reach the output check
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite values in layer {i} pre-activation")
        z_hat = bn_mean = bn_var = None
        if spec.use_batchnorm:
            if mode == TRAIN:
                bn_mean = z.mean(axis=0)
                bn_var = z.var(axis=0)
            else:
                bn_mean = layer.running_mean
                bn_var = layer.running_var
            z_hat = (z - bn_mean) / np.sqrt(bn_var + BN_EPS)
            z = layer.gamma * z_hat + layer.beta
        if spec.activation == "relu":
            a = np.maximum(z, 0.0)
        elif spec.activation == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
        mask = None
        if mode == TRAIN and spec.dropout_p > 0.0:
            keep = rng.random(a.shape) >= spec.dropout_p
            mask = keep / (1.0 - spec.dropout_p)
            h = a * mask
        else:
            h = a
        traces.append(LayerTrace(x_in=x_in, z_hat=z_hat, bn_mean=bn_mean, bn_var=bn_var, act_out=a, mask=mask))
    ensure_finite(h, "forward output")
    return h, ForwardTrace(mode, traces)


@dataclass
class LayerGrads:
    weights: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None


@dataclass
class GradientSet:
    layers: list[LayerGrads]


def backward(params: MLPParams, trace: ForwardTrace, upstream_grad) -> tuple[GradientSet, np.ndarray]:
    """Exact reverse-mode gradients of the traced computation.

    Differentiates through the dropout masks and, in train mode, through
    the batch statistics. Returns ``(grads, gradient w.r.t. the input)``.
    """
    if len(trace.layers) != len(params.specs):
        raise DataError("trace does not match params (layer counts differ)")
    d = as_matrix(upstream_grad, "upstream_grad")
    last = trace.layers[-1].act_out
    if d.shape != last.shape:
        raise DataError(f"upstream_grad shape {d.shape} does not match output {last.shape}")
    grads: list[LayerGrads] = []
    for spec, layer, lt in zip(reversed(params.specs), reversed(params.layers), reversed(trace.layers)):
        if lt.x_in.shape[1] != spec.in_dim:
            raise DataError("trace does not match params (layer input width differs)")
        if lt.mask is not None:
            d = d * lt.mask
        if spec.activation == "relu":
            d = d * (lt.act_out > 0.0)
        elif spec.activation == "sigmoid":
            d = d * (lt.act_out * (1.0 - lt.act_out))
        dgamma = dbeta = None
        if spec.use_batchnorm:
            dgamma = (d * lt.z_hat).sum(axis=0)
            dbeta = d.sum(axis=0)
            if trace.mode == TRAIN:
                n = d.shape[0]
                dzh = d * layer.gamma
                inv = 1.0 / np.sqrt(lt.bn_var + BN_EPS)
                d = (inv / n) * (n * dzh - dzh.sum(axis=0) - lt.z_hat * (dzh * lt.z_hat).sum(axis=0))
            else:
                d = d * (layer.gamma / np.sqrt(lt.bn_var + BN_EPS))
        dw = d.T @ lt.x_in
        db = d.sum(axis=0)
        d = d @ layer.weights
        grads.append(LayerGrads(dw, db, dgamma, dbeta))
    grads.reverse()
    return GradientSet(grads), d


def zero_grads(params: MLPParams) -> GradientSet:
    out = []
    for layer in params.layers:
        out.append(
            LayerGrads(
                np.zeros_like(layer.weights),
                np.zeros_like(layer.bias),
                None if layer.gamma is None else np.zeros_like(layer.gamma),
                None if layer.beta is None else np.zeros_like(layer.beta),
            )
        )
    return GradientSet(out)


def bce_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy; targets may be soft probabilities.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the logs so
    saturated probabilities keep the loss finite; the gradient is taken
    at the clamped value.
    """
    pred = as_matrix(pred, "pred")
    target = as_matrix(target, "target")
    if pred.shape != target.shape:
        raise DataError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log1p(-p))))
    grad = (p - target) / (p * (1.0 - p)) / p.size
    return loss, grad


def softmax_rowwise(e) -> np.ndarray:
    """Row-wise softmax with max subtraction; every row sums to 1."""
    e = as_matrix(e, "softmax input")
    ensure_finite(e, "softmax input")
    shifted = e - e.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def softmax_backward(alpha: np.ndarray, d_alpha: np.ndarray) -> np.ndarray:
    """Gradient through a row-wise softmax, given its output ``alpha``."""
    inner = (d_alpha * alpha).sum(axis=1, keepdims=True)
    return alpha * (d_alpha - inner)


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"  # "sgd" or "adam"
    lr: float = 1e-3
    l2_penalty: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer {self.algorithm!r}")
        if self.lr < 0:
            raise DataError(f"learning rate must be >= 0, got {self.lr}")
        if self.l2_penalty < 0:
            raise DataError(f"l2 penalty must be >= 0, got {self.l2_penalty}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(
    params: MLPParams,
    grads: GradientSet,
    config: OptimizerConfig,
    state: OptimizerState | None = None,
) -> OptimizerState:
    """One SGD or Adam update, applied in place. Returns the optimizer state.

    The l2 penalty enters through the gradient, theta <- theta - lr * (g +
    l2 * theta), for every learnable block (weights, bias, batchnorm
    gamma/beta). Running statistics are never touched here.
    """
    if state is None:
        state = OptimizerState()
    state.step += 1
    t = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    for i, (layer, g) in enumerate(zip(params.layers, grads.layers)):
        blocks = (
            ("weights", layer.weights, g.weights),
            ("bias", layer.bias, g.bias),
            ("gamma", layer.gamma, g.gamma),
            ("beta", layer.beta, g.beta),
        )
        for name, theta, grad in blocks:
            if theta is None:
                continue
            gg = grad + config.l2_penalty * theta if config.l2_penalty else grad
            if config.algorithm == "sgd":
                theta -= config.lr * gg
            else:
                key = (i, name)
                m = state.m.get(key)
                if m is None:
                    m = np.zeros_like(theta)
                    state.v[key] = np.zeros_like(theta)
                v = state.v[key]
                m = b1 * m + (1.0 - b1) * gg
                v = b2 * v + (1.0 - b2) * (gg * gg)
                state.m[key], state.v[key] = m, v
                m_hat = m / (1.0 - b1**t)
                v_hat = v / (1.0 - b2**t)
                theta -= config.lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def update_running_stats(params: MLPParams, trace: ForwardTrace, momentum: float = BN_MOMENTUM) -> None:
    """Fold a train-mode trace's batch statistics into the running ones."""
    if trace.mode != TRAIN:
        return
    for spec, layer, lt in zip(params.specs, params.layers, trace.layers):
        if spec.use_batchnorm:
            layer.running_mean = (1.0 - momentum) * layer.running_mean + momentum * lt.bn_mean
            layer.running_var = (1.0 - momentum) * layer.running_var + momentum * lt.bn_var


# -- serialization ----------------------------------------------------------

def spec_to_doc(spec: LayerSpec) -> dict:
    return {
        "in_dim": spec.in_dim,
        "out_dim": spec.out_dim,
        "activation": spec.activation,
        "dropout_p": spec.dropout_p,
        "use_batchnorm": spec.use_batchnorm,
    }


def spec_from_doc(doc: dict) -> LayerSpec:
    return LayerSpec(
        in_dim=int(doc["in_dim"]),
        out_dim=int(doc["out_dim"]),
        activation=str(doc["activation"]),
        dropout_p=float(doc["dropout_p"]),
        use_batchnorm=bool(doc["use_batchnorm"]),
    )


def mlp_to_doc(params: MLPParams) -> dict:
    layers = []
    for layer in params.layers:
        doc = {"weights": layer.weights.ravel().tolist(), "bias": layer.bias.tolist()}
        if layer.gamma is not None:
            doc["batchnorm"] = {
                "gamma": layer.gamma.tolist(),
                "beta": layer.beta.tolist(),
                "running_mean": layer.running_mean.tolist(),
                "running_var": layer.running_var.tolist(),
            }
        else:
            doc["batchnorm"] = None
        layers.append(doc)
    return {"specs": [spec_to_doc(s) for s in params.specs], "layers": layers}


def mlp_from_doc(doc: dict) -> MLPParams:
    specs = [spec_from_doc(s) for s in doc["specs"]]
    layers = []
    for spec, blob in zip(specs, doc["layers"]):
        w = np.asarray(blob["weights"], dtype=np.float64).reshape(spec.out_dim, spec.in_dim)
        b = np.asarray(blob["bias"], dtype=np.float64)
        bn = blob.get("batchnorm")
        if bn is None:
            layers.append(LayerParams(w, b))
        else:
            layers.append(
                LayerParams(
                    w,
                    b,
                    gamma=np.asarray(bn["gamma"], dtype=np.float64),
                    beta=np.asarray(bn["beta"], dtype=np.float64),
                    running_mean=np.asarray(bn["running_mean"], dtype=np.float64),
                    running_var=np.asarray(bn["running_var"], dtype=np.float64),
                )
            )
    return MLPParams(layers, specs)


def params_digest(*mlps: MLPParams, include_running_stats: bool = True) -> str:
    """SHA-256 over the raw parameter bytes, for exact-equality checks."""
    h = hashlib.sha256()
    for params in mlps:
        for layer in params.layers:
            arrays = [layer.weights, layer.bias, layer.gamma, layer.beta]
            if include_running_stats:
                arrays += [layer.running_mean, layer.running_var]
            for a in arrays:
                if a is None:
                    h.update(b"\x00")
                else:
                    h.update(np.asarray(a.shape, dtype=np.int64).tobytes())
                    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
