"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, O(n^2) scans, finite
differences); none of it shares code with the library paths it checks.
"""

import numpy as np


def central_difference(f, array, index, h=1e-5):
    """Two-sided finite difference of scalar f w.r.t. one array entry."""
    orig = array[index]
    array[index] = orig + h
    fp = f()
    array[index] = orig - h
    fm = f()
    array[index] = orig
    return (fp - fm) / (2.0 * h)


def fd_check_blocks(f, blocks, grads, h=1e-5, max_coords=12, rng_seed=0):
    """Max relative FD error over sampled coordinates of (array, grad) pairs."""
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for array, grad in zip(blocks, grads):
        flat = array.reshape(-1)
        gflat = grad.reshape(-1)
        count = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for c in coords:
            fd = central_difference(f, flat, c, h)
            err = abs(gflat[c] - fd) / max(abs(gflat[c]), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


def relu_kink_clearance(params, trace):
    """Smallest |pre-activation| over relu layers; FD checks need it > ~h."""
    clearance = np.inf
    for spec, layer, lt in zip(params.specs, params.layers, trace.layers):
        if spec.activation != "relu":
            continue
        z = lt.x_in @ layer.weights.T + layer.bias
        if spec.use_batchnorm:
            z = layer.gamma * lt.z_hat + layer.beta
        clearance = min(clearance, float(np.abs(z).min()))
    return clearance


def pairwise_auc(scores, labels):
    """O(n^2) pair count: P(pos > neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def brute_force_mae(pred, true):
    total = 0.0
    for a, b in zip(pred, true):
        total += abs(float(a) - float(b))
    return total / len(pred)


def dominance_flags(points):
    """O(n^2) Pareto check: flag points no other point dominates."""
    pts = [tuple(map(float, p)) for p in points]
    flags = []
    for i, p in enumerate(pts):
        dominated = False
        for j, q in enumerate(pts):
            if i == j:
                continue
            if q[0] >= p[0] and q[1] >= p[1] and (q[0] > p[0] or q[1] > p[1]):
                dominated = True
                break
        flags.append(not dominated)
    return np.asarray(flags)


def recall_by_threshold_scan(scores, labels, fpr_level):
    """Try every distinct threshold plus 'predict none'; pick the lowest
    threshold with FPR within the level and report its TPR."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    best = 0.0  # predicting none is always feasible (FPR 0, TPR 0)
    for t in np.unique(scores):
        predicted = scores >= t
        fpr = float(predicted[labels == 0].sum()) / n_neg
        tpr = float(predicted[labels == 1].sum()) / n_pos
        if fpr <= fpr_level:
            best = max(best, tpr)
    return best


def straight_line_mlp(x, layers):
    """Plain loop-and-matmul forward for [(W, b, activation), ...]."""
    h = np.asarray(x, dtype=float)
    for w, b, act in layers:
        z = h @ w.T + b
        if act == "relu":
            h = np.maximum(z, 0.0)
        elif act == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-z))
        else:
            h = z
    return h
