"""Central finite-difference oracle shared by the test modules."""
import numpy as np

import noisydarts.functional as F
from noisydarts.tensor import Tensor, backward


def numeric_grad(fn, arrays, h=1e-5):
    """d fn / d arrays[k] by central differences; ``fn`` maps arrays -> float."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = fn(arrays)
            a[idx] = old - h
            fm = fn(arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_op(build, arrays, h=1e-5):
    """Max relative error between analytic and numeric gradients.

    ``build`` maps a list of Tensors to a scalar Tensor. A fixed random
    projection is folded into the loss by the caller when needed.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)
    analytic = [t.grad for t in leaves]

    def f(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    numeric = numeric_grad(f, [a.copy() for a in arrays], h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = max(np.max(np.abs(gn)), np.max(np.abs(ga)), 1e-8)
        worst = max(worst, float(np.max(np.abs(ga - gn)) / denom))
    return worst


# --- randomized instances per op kind -------------------------------------

def _projected(rng, op):
    """Wrap ``op`` so the loss is a fixed random projection of its output."""
    cache = {}

    def build(ts):
        out = op(ts)
        if "r" not in cache:
            cache["r"] = rng.standard_normal(out.shape)
        return F.sum_all(F.mul(out, Tensor(cache["r"])))

    return build


def case_conv2d(rng):
    groups = int(rng.choice([1, 2, 4]))
    c = 4
    o = int(rng.choice([4, 8])) if groups != 4 else 4
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    dil = int(rng.choice([1, 2])) if k > 1 else 1
    pad = dil * (k - 1) // 2
    x = rng.standard_normal((2, c, 6, 6))
    w = rng.standard_normal((o, c // groups, k, k))
    return _projected(rng, lambda t: F.conv2d(t[0], t[1], stride, pad, dil, groups)), [x, w]


def case_relu(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return _projected(rng, lambda t: F.relu(t[0])), [x]


def case_batch_norm(rng):
    x = rng.standard_normal((4, 3, 3, 3)) * 2 + 1
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    if rng.random() < 0.5:
        return _projected(rng, lambda t: F.batch_norm(t[0], t[1], t[2])), [x, gamma, beta]
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.5
    return _projected(rng, lambda t: F.batch_norm(
        t[0], t[1], t[2], rm, rv, training=False)), [x, gamma, beta]


def case_avg_pool2d(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    k, s, p = [(3, 1, 1), (2, 2, 0), (3, 2, 1), (3, 1, 0)][int(rng.integers(4))]
    return _projected(rng, lambda t: F.avg_pool2d(t[0], k, s, p)), [x]


def case_max_pool2d(rng):
    # distinct values spaced well beyond the FD step: no ties
    x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01
    k, s, p = [(3, 1, 1), (2, 2, 0), (3, 2, 1)][int(rng.integers(3))]
    return _projected(rng, lambda t: F.max_pool2d(t[0], k, s, p)), [x]


def case_global_avg_pool(rng):
    return _projected(rng, lambda t: F.global_avg_pool(t[0])), [rng.standard_normal((3, 4, 3, 5))]


def case_dense(rng):
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    return _projected(rng, lambda t: F.dense(t[0], t[1], t[2])), [x, w, b]


def case_add(rng):
    xs = [rng.standard_normal((2, 3, 4)) for _ in range(int(rng.integers(1, 4)))]
    return _projected(rng, lambda t: F.add(*t)), xs


def case_scale(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    s = rng.standard_normal(5)
    k = int(rng.integers(5))
    return _projected(rng, lambda t: F.scale(t[0], t[1], k)), [x, s]


def case_softmax(rng):
    return _projected(rng, lambda t: F.softmax(t[0])), [rng.standard_normal((3, 5))]


def case_cross_entropy(rng):
    logits = rng.standard_normal((6, 4)) * 2
    labels = rng.integers(0, 4, 6)
    return (lambda t: F.cross_entropy(t[0], labels)), [logits]


def case_mul(rng):
    return _projected(rng, lambda t: F.mul(t[0], t[1])), [
        rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))]


def case_zero(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    stride = int(rng.choice([1, 2]))
    # zero output + a live branch so the loss still depends on x
    return _projected(rng, lambda t: F.add(F.zero(t[0], stride), F.avg_pool2d(t[0], stride, stride))), [x]


def case_sum_all(rng):
    return (lambda t: F.sum_all(F.mul(t[0], t[0]))), [rng.standard_normal((3, 4))]


def case_concat(rng):
    return _projected(rng, lambda t: F.concat(t, axis=1)), [
        rng.standard_normal((2, int(rng.integers(1, 4)), 3, 3)) for _ in range(3)]


def case_crop(rng):
    return _projected(rng, lambda t: F.crop(t[0], 1)), [rng.standard_normal((2, 2, 5, 5))]


def case_weighted_sum(rng):
    m = int(rng.integers(1, 5))
    xs = [rng.standard_normal((2, 3, 3, 3)) for _ in range(m)]
    w = rng.standard_normal(m)
    return _projected(rng, lambda t: F.weighted_sum(t[:-1], t[-1])), xs + [w]


OP_CASES = {
    "conv2d": case_conv2d,
    "relu": case_relu,
    "batch_norm": case_batch_norm,
    "avg_pool2d": case_avg_pool2d,
    "max_pool2d": case_max_pool2d,
    "global_avg_pool": case_global_avg_pool,
    "dense": case_dense,
    "add": case_add,
    "scale": case_scale,
    "softmax": case_softmax,
    "cross_entropy": case_cross_entropy,
    "mul": case_mul,
    "zero": case_zero,
    "sum_all": case_sum_all,
    "concat": case_concat,
    "crop": case_crop,
    "weighted_sum": case_weighted_sum,
}


def naive_conv2d(x, w, stride=1, pad=0, dil=1, groups=1):
    """Seven nested loops, no vectorization."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (w[oc, ci, i, j]
                                        * xp[b, g * cg + ci, r * stride + i * dil, s * stride + j * dil])
                    out[b, oc, r, s] = acc
    return out
