"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np

from hmil import model as M
from hmil import tensor as T
from hmil.gradcheck import finite_diff_check


def baseline_oracle(x, c):
    """Attention pooling by a learned query, written out with plain loops."""
    scores = [float(np.dot(c, xk)) for xk in x]
    m = max(scores)
    e = [np.exp(s - m) for s in scores]
    a = np.array([v / sum(e) for v in e])
    z = np.zeros(x.shape[1])
    for ak, xk in zip(a, x):
        z += ak * xk
    return z, a


def exhaustive_two_means(values):
    """Minimum within-cluster sum of squares over every 2-partition (all-in-one allowed).

    Returns ``(best_sse, high_mask)`` with the same tie rule as the library:
    among minimal partitions the one with the larger high set.
    """
    x = np.asarray(values, dtype=float)
    n = len(x)
    tol = 1e-12 * ((x - x.mean()) ** 2).sum()  # costs this close count as equal
    best_sse, best_high = np.inf, None
    for bits in itertools.product([False, True], repeat=n):
        high = np.array(bits)
        if not high.any():
            continue
        sse = ((x[high] - x[high].mean()) ** 2).sum()
        if (~high).any():
            sse += ((x[~high] - x[~high].mean()) ** 2).sum()
            if x[~high].mean() >= x[high].mean():
                continue
        if sse < best_sse - tol or (sse <= best_sse + tol and high.sum() > best_high.sum()):
            best_sse, best_high = min(sse, best_sse), high
    return best_sse, best_high


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def expected_parameter_count(d, heads, levels, mlp_ratio=2, layers=1, shared=True, aggregator="transformer"):
    """Analytic parameter count of the model family."""
    embed = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * d + d)
    if aggregator == "baseline":
        return embed + d + d + 1
    attn = 3 * (d * d + d) + d * d  # q, v, out projections with bias; key projection without
    mlp = (d * mlp_ratio * d + mlp_ratio * d) + (mlp_ratio * d * d + d)
    norms = 4 * d
    module = layers * (attn + mlp + norms) + d  # plus class token
    n_modules = (1 if shared else levels) + levels
    return embed + n_modules * module + levels * d + 1


def toy_model_gradcheck(seed=0):
    """Worst relative error of tape vs central-difference gradients over every parameter of a small 2-level model."""
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(embed_dim=8, heads=2, levels=2, patch_px=8)
    params = M.init_params(cfg, rng)
    patches = rng.integers(0, 256, size=(8, 8, 8, 3))
    names = list(params)

    def loss(*ps):
        P = dict(zip(names, ps))
        res = M.forward(P, patches, (1, 2, 4), cfg)
        return T.bce_with_logits(T.reshape(res.logit, ()), 1)

    return finite_diff_check(loss, [params[k] for k in names], eps=1e-5)
